"""Non-autoregressive translation by training inference networks against an
autoregressive teacher's energy."""

__version__ = "0.1.0"
