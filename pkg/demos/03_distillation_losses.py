"""
The four distillation terms on hand-made feature maps
=====================================================

Shows the value each term takes when the student copies the teacher, and how
it reacts to the kinds of mismatch it is meant to penalise.
"""

import math

import numpy as np

from bevdistill.losses import affinity, msfd_loss, qfl, reld_loss, teacher_objectness

rng = np.random.default_rng(3)
teacher = rng.normal(size=(6, 16, 16))

# Objectness: the teacher's class logits squashed and pooled into one map.
print("objectness of zero logits:", float(teacher_objectness(np.zeros((4, 16, 16))).data.max()))

# Masked imitation only looks inside the foreground mask.
mask = np.zeros((16, 16))
mask[4:8, 4:8] = 1.0
student = teacher.copy()
student[:, 10:, 10:] += 5.0  # wrong, but outside the mask
print("masked imitation, error outside mask:", msfd_loss(teacher, student, mask).item())
student[:, 5, 5] += 1.0
print("masked imitation, error inside mask: ", round(msfd_loss(teacher, student, mask).item(), 6))

# Relation distillation compares cosine affinities, so per-position scale does not matter.
rescaled = teacher * np.exp(rng.normal(size=(1, 16, 16)))
print("\nrelation loss under per-position rescaling:", f"{reld_loss(teacher, rescaled, 4).item():.1e}")
print("relation loss against unrelated features: ", round(reld_loss(teacher, rng.normal(size=teacher.shape), 4).item(), 4))
a = affinity(teacher[:, :4, :4]).data
print("affinity is symmetric with unit diagonal:", bool(np.allclose(a, a.T) and np.allclose(np.diag(a), 1.0)))

# Quality focal loss: zero logits against zero targets give 0.25 * ln 2 per element.
print("\nQFL(sigma=0.5, y=0):", qfl(np.zeros(1), np.zeros(1)).item(), "expected", 0.25 * math.log(2))
