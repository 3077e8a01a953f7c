"""
Energies and relaxations on an untrained teacher
================================================

A few seconds of arithmetic: how the relaxed energy of a logit matrix relates
to the energy of a token sequence.
"""
import numpy as np

from engine_nat import autodiff as ad
from engine_nat.corpus import EOS
from engine_nat.operators import ALL_KINDS, apply_forward, sample_gumbel
from engine_nat.teacher import TeacherHyper, TeacherModel, energy, generalized_energy, onehot

rng = np.random.default_rng(0)
teacher = TeacherModel.init(TeacherHyper(src_vocab=12, tgt_vocab=10, emb=8, enc_hidden=8, dec_hidden=16), seed=0)
x = [5, 6, 7, 8]
y = [9, 6, EOS]

# %% energy of a token sequence = -log p(y | x) under the teacher
print("energy(x, y) =", round(energy(teacher, x, y), 4))

# %% the five output maps, applied to one row of logits
z = rng.normal(size=10)
g = sample_gumbel(z.shape, rng)
for kind in ALL_KINDS:
    q = apply_forward(kind, z, g if kind.needs_noise else None)
    print(f"{kind.value:>3}", np.round(q, 3))

# %% one-hot logits give back the token-sequence energy
z = np.where(onehot(y, 10) > 0, 3.0, -3.0)
for o1, o2 in [("stl", "stl"), ("st", "st"), ("sx", "sx")]:
    print(o1, o2, round(generalized_energy(teacher, x, z, o1, o2).item(), 4))
print("saturated sx", round(generalized_energy(teacher, x, 13 * z, "sx", "sx").item(), 4))

# %% and the relaxed energy is differentiable in the logits
z = rng.normal(size=(3, 10))
tape = ad.Tape()
tz = tape.watch(z)
e = generalized_energy(teacher, x, tz, "sx", "st", rng=rng)
grad = tape.gradient(e, [tz])[0]
print("d energy / d logits, row norms:", np.round(np.linalg.norm(grad, axis=1), 4))
print("grad check (sx, sx):", ad.grad_check(lambda v: generalized_energy(teacher, x, v, "sx", "sx"), z))
