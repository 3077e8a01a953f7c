"""Maps from inference-network logits to points on the probability simplex.

Five choices, each with a forward map and the Jacobian used on the way back:

====  ==============================  ===============================
kind  forward                         backward (J^T u)
====  ==============================  ===============================
sx    softmax(z)                      softmax Jacobian at z
stl   onehot(argmax z)                identity
sg    onehot(argmax softmax(z + g))   softmax Jacobian at z + g
st    onehot(argmax softmax(z))       softmax Jacobian at z
gx    softmax(z + g)                  softmax Jacobian at z + g
====  ==============================  ===============================

``g`` is standard Gumbel noise. All functions act on the last axis so a whole
``(batch, length, vocab)`` block can be mapped at once.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from . import autodiff as ad


class OperatorKind(str, Enum):
    SX = "sx"
    STL = "stl"
    SG = "sg"
    ST = "st"
    GX = "gx"

    @property
    def needs_noise(self) -> bool:
        return self in (OperatorKind.SG, OperatorKind.GX)

    @classmethod
    def parse(cls, name) -> "OperatorKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown operator {name!r}; expected one of sx|stl|sg|st|gx") from None


ALL_KINDS = tuple(OperatorKind)

_U_CLAMP = 1e-12


def gumbel_from_uniform(u):
    u = np.clip(np.asarray(u, dtype=np.float64), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Gumbel(0, 1) draws via -log(-log u), u ~ Uniform(0, 1)."""
    return gumbel_from_uniform(rng.random(shape))


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def onehot_argmax(z) -> np.ndarray:
    # np.argmax returns the first maximal index, so ties go to the lowest index
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros_like(z)
    np.put_along_axis(out, z.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return out


def softmax_vjp(z, upstream) -> np.ndarray:
    """J^T u for J = diag(q) - q q^T, q = softmax(z); J is symmetric."""
    q = softmax(z)
    u = np.asarray(upstream, dtype=np.float64)
    return q * (u - (q * u).sum(axis=-1, keepdims=True))


def _check_noise(kind: OperatorKind, noise, z):
    if kind.needs_noise and noise is None:
        raise ValueError(f"operator {kind.value} needs Gumbel noise")
    if not kind.needs_noise and noise is not None:
        raise ValueError(f"operator {kind.value} takes no noise")
    if noise is not None and np.shape(noise) != np.shape(z):
        raise ValueError(f"noise shape {np.shape(noise)} != logits shape {np.shape(z)}")


def apply_forward(kind, z, noise=None) -> np.ndarray:
    kind = OperatorKind.parse(kind)
    _check_noise(kind, noise, z)
    if kind is OperatorKind.SX:
        return softmax(z)
    if kind is OperatorKind.STL:
        return onehot_argmax(z)
    if kind is OperatorKind.ST:
        return onehot_argmax(softmax(z))
    zt = np.asarray(z, dtype=np.float64) + noise
    if kind is OperatorKind.SG:
        return onehot_argmax(softmax(zt))
    return softmax(zt)


def apply_backward(kind, z, noise, upstream) -> np.ndarray:
    kind = OperatorKind.parse(kind)
    _check_noise(kind, noise, z)
    if np.shape(upstream) != np.shape(z):
        raise ValueError(f"upstream shape {np.shape(upstream)} != logits shape {np.shape(z)}")
    if kind is OperatorKind.STL:
        return np.array(upstream, dtype=np.float64)
    if kind in (OperatorKind.SX, OperatorKind.ST):
        return softmax_vjp(z, upstream)
    return softmax_vjp(np.asarray(z, dtype=np.float64) + noise, upstream)


def relax(kind, z, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Apply an operator on the tape. Noise is drawn once here and reused by backward."""
    kind = OperatorKind.parse(kind)
    z = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    noise = None
    if kind.needs_noise:
        if rng is None:
            raise ValueError(f"operator {kind.value} needs a random generator")
        noise = sample_gumbel(z.shape, rng)
    if kind is OperatorKind.SX:
        return ad.softmax_rows(z)
    if kind is OperatorKind.GX:
        return ad.softmax_rows(ad.add(z, noise))
    value = apply_forward(kind, z.data, noise)
    if kind is OperatorKind.STL:
        return ad.custom_grad(value, z, "identity-passthrough")
    if kind is OperatorKind.ST:
        return ad.custom_grad(value, z, "softmax-jacobian-at-z")
    return ad.custom_grad(value, z, "softmax-jacobian-at-shifted-z", shift=noise)
