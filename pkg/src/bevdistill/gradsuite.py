"""Finite-difference audit of every differentiable op and loss.

Each case builds a scalar function of fresh random parameters; fixtures keep
inputs away from the non-differentiable points of ``abs``/``relu``/``max`` so a
central difference is meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .losses import (
    CalibrationModule,
    RelationAdapter,
    csrd_loss,
    msfd_loss,
    qfl,
    reld_loss,
    respd_loss,
    smooth_l1_loss,
    total_loss,
    LossWeights,
)
from .model import HeadOutput, detection_loss, focal_loss, gated_fuse
from .numerics import Tensor, ops
from .numerics.gradcheck import check_gradients

Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]

TOLERANCE = 1e-4
STEP = 1e-5


def _p(rng, shape, scale=1.0, name=None) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)


def _away(rng, shape, margin=0.2, scale=1.0) -> Tensor:
    """Random values with magnitude at least ``margin`` (clear of kinks at 0)."""
    v = rng.normal(scale=scale, size=shape)
    v = np.sign(v) * (margin + np.abs(v))
    return Tensor(v, requires_grad=True)


def _positive(rng, shape, lo=0.5) -> Tensor:
    return Tensor(lo + rng.random(shape), requires_grad=True)


def _unary(op, make=_p):
    def build(rng):
        x = make(rng, (3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda: ops.sum(ops.mul(op(x), w))), [x]
    return build


def _binary(op, make_b=_p):
    def build(rng):
        a = _p(rng, (3, 4))
        b = make_b(rng, (4,))   # broadcast along the leading axis
        w = rng.normal(size=(3, 4))
        return (lambda: ops.sum(ops.mul(op(a, b), w))), [a, b]
    return build


def _clear_of_delta(rng, shape, delta=1.0) -> Tensor:
    """Values at least 0.05 away from the quadratic/linear seam at +-delta."""
    v = 2.0 * rng.normal(size=shape)
    v = np.where(np.abs(np.abs(v) - delta) < 0.05, v + 0.2 * np.sign(v), v)
    return Tensor(v, requires_grad=True)


def _distinct(rng, shape) -> Tensor:
    """Entries with pairwise gaps of at least 0.1 so argmax is stable."""
    n = int(np.prod(shape))
    v = rng.permutation(n) * 0.1 + rng.random(n) * 0.01
    return Tensor(v.reshape(shape), requires_grad=True)


def _conv(stride, padding, k, bias=True):
    def build(rng):
        x = _p(rng, (2, 3, 7, 6))
        w = _p(rng, (4, 3, k, k), 0.5)
        b = _p(rng, (4,)) if bias else None
        params = [x, w] + ([b] if bias else [])
        r = rng.normal(size=ops.conv2d(x, w, b, stride=stride, padding=padding).shape)
        return (lambda: ops.sum(ops.mul(ops.conv2d(x, w, b, stride=stride, padding=padding), r))), params
    return build


def _batchnorm(rng):
    x = _p(rng, (2, 3, 4, 5), 2.0)
    g = _p(rng, (3,))
    b = _p(rng, (3,))
    r = rng.normal(size=x.shape)
    return (lambda: ops.sum(ops.mul(ops.batchnorm(x, g, b), r))), [x, g, b]


def _matmul(rng):
    a = _p(rng, (2, 3, 4))
    b = _p(rng, (2, 4, 5))
    r = rng.normal(size=(2, 3, 5))
    return (lambda: ops.sum(ops.mul(ops.matmul(a, b), r))), [a, b]


def _shape_ops(rng):
    x = _p(rng, (2, 3, 4))
    r = rng.normal(size=(3, 3, 2))

    def fn():
        y = ops.transpose(ops.reshape(x, (6, 4)), (1, 0))           # [4, 6]
        y = ops.getitem(ops.reshape(y, (4, 3, 2)), (slice(1, 4), slice(None), slice(None)))
        return ops.sum(ops.mul(ops.transpose(y, (1, 0, 2)), r))
    return fn, [x]


def _reductions(rng):
    x = _p(rng, (2, 3, 4))
    r1, r2 = rng.normal(size=(2, 4)), rng.normal(size=(3,))
    return (lambda: ops.add(ops.sum(ops.mul(ops.sum(x, axis=1), r1)),
                            ops.sum(ops.mul(ops.mean(x, axis=(0, 2)), r2)))), [x]


def _max(rng):
    x = _distinct(rng, (2, 3, 4))
    r = rng.normal(size=(2, 4))
    return (lambda: ops.sum(ops.mul(ops.max(x, axis=1), r))), [x]


def _channel_norm(rng):
    x = _away(rng, (2, 3, 4, 4))
    r = rng.normal(size=(2, 4, 4))
    return (lambda: ops.sum(ops.mul(ops.channel_norm(x), r))), [x]


def _concat_pool(rng):
    a = _p(rng, (2, 2, 4, 6))
    b = _p(rng, (2, 3, 4, 6))
    r = rng.normal(size=(2, 5, 2, 3))
    return (lambda: ops.sum(ops.mul(ops.avgpool2x(ops.concat_channels(a, b)), r))), [a, b]


def _gated_fusion(rng):
    f1, f2 = _p(rng, (2, 3, 4, 4)), _p(rng, (2, 2, 4, 4))
    params = {
        "gate.camera.weight": _p(rng, (3, 5, 1, 1), 0.5), "gate.camera.bias": _p(rng, (3,), 0.5),
        "gate.points.weight": _p(rng, (2, 5, 1, 1), 0.5), "gate.points.bias": _p(rng, (2,), 0.5),
    }
    r1, r2 = rng.normal(size=f1.shape), rng.normal(size=f2.shape)

    def fn():
        g1, g2 = gated_fuse(f1, f2, params)
        return ops.add(ops.sum(ops.mul(g1, r1)), ops.sum(ops.mul(g2, r2)))
    return fn, [f1, f2, *params.values()]


# -- losses ------------------------------------------------------------------

def _csrd(rng):
    calib = CalibrationModule.init(3, seed=int(rng.integers(1 << 30)), zero_proj=False)
    f_r = _p(rng, (2, 3, 6, 6))
    y_t = rng.normal(size=(2, 4, 6, 6))
    return (lambda: csrd_loss(f_r, y_t, calib)), [f_r, *calib.parameters()]


def _msfd(rng):
    f_t = rng.normal(size=(2, 3, 5, 5))
    f_s = _p(rng, (2, 3, 5, 5))
    mask = (rng.random((2, 5, 5)) < 0.5).astype(float)
    return (lambda: msfd_loss(f_t, f_s, mask)), [f_s]


def _reld(rng):
    adapter = RelationAdapter.init(3, 3, seed=int(rng.integers(1 << 30)))
    f_t = rng.normal(size=(2, 3, 8, 8))
    f_s = _p(rng, (2, 3, 8, 8))
    return (lambda: reld_loss(f_t, f_s, 3, adapter)), [f_s]


def _qfl(rng):
    x = _p(rng, (2, 3, 4), 2.0)
    y = rng.random((2, 3, 4))
    return (lambda: qfl(x, y, 2.0)), [x]


def _smooth_l1(rng):
    pred = _p(rng, (3, 5), 2.0)
    target = pred.data - _clear_of_delta(rng, (3, 5)).data
    weight = rng.random((3, 5))
    return (lambda: smooth_l1_loss(target, pred, 1.0, weight)), [pred]


def _head(rng, k=3, size=6):
    return HeadOutput(cls=_p(rng, (2, k, size, size)), reg=_p(rng, (2, 8, size, size)))


def _respd(rng):
    teacher = HeadOutput(cls=Tensor(rng.normal(size=(2, 3, 5, 5))), reg=Tensor(rng.normal(size=(2, 8, 5, 5))))
    student = _head(rng, 3, 5)
    w = (2.0, 1.0, 2.0)

    def fn():
        c, r = respd_loss(teacher, student, w)
        return ops.add(c, r)
    return fn, [student.cls, student.reg]


def _respd_objects(rng):
    teacher = HeadOutput(cls=Tensor(rng.normal(size=(2, 3, 5, 5))), reg=Tensor(rng.normal(size=(2, 8, 5, 5))))
    student = _head(rng, 3, 5)
    region = rng.random((2, 3, 5, 5))

    def fn():
        c, r = respd_loss(teacher, student, (2.0, 1.0, 2.0), region=region, normalizer=3.0)
        return ops.add(c, r)
    return fn, [student.cls, student.reg]


def _det_targets(rng, k=3, size=6):
    hm = rng.random((2, k, size, size)) * 0.9
    hm[0, 1, 1, 2] = hm[1, 0, size - 1, 1] = 1.0
    reg = rng.normal(size=(2, 8, size, size))
    mask = np.zeros((2, size, size))
    mask[0, 1, 2] = mask[1, size - 1, 1] = 1.0
    return hm, reg, mask


def _focal(rng):
    logits = _p(rng, (2, 3, 6, 6))
    hm, _, _ = _det_targets(rng)
    return (lambda: focal_loss(logits, hm)), [logits]


def _detection(rng):
    out = _head(rng)
    hm, reg, mask = _det_targets(rng)
    return (lambda: detection_loss(out, hm, reg, mask)), [out.cls, out.reg]


def _total(rng):
    f_t = rng.normal(size=(2, 3, 4, 4))
    f_s = _p(rng, (2, 3, 4, 4))
    mask = (rng.random((2, 4, 4)) < 0.5).astype(float)
    adapter = RelationAdapter.init(3, 2, seed=int(rng.integers(1 << 30)))
    teacher = HeadOutput(cls=Tensor(rng.normal(size=(2, 3, 4, 4))), reg=Tensor(rng.normal(size=(2, 8, 4, 4))))
    student = _head(rng, 3, 4)
    hm, reg, rmask = _det_targets(rng, 3, 4)
    weights = LossWeights(task_weights=(2.0, 2.0, 1.0))

    def fn():
        c, r = respd_loss(teacher, student, weights.task_weights)
        comps = {
            "csrd": csrd_loss(f_s, teacher.cls.data, None),
            "msfd": msfd_loss(f_t, f_s, mask),
            "reld": reld_loss(f_t, f_s, 2, adapter),
            "cls": c, "reg": r,
            "det": detection_loss(student, hm, reg, rmask),
        }
        return total_loss(comps, weights)
    return fn, [f_s, student.cls, student.reg]


CASES: Tuple[Tuple[str, Builder, Optional[int]], ...] = (
    ("op.add", _binary(ops.add), None),
    ("op.sub", _binary(ops.sub), None),
    ("op.mul", _binary(ops.mul), None),
    ("op.div", _binary(ops.div, lambda r, s: _away(r, s, 0.5)), None),
    ("op.power", _unary(lambda x: ops.power(x, 2.5), _positive), None),
    ("op.exp", _unary(ops.exp), None),
    ("op.log", _unary(ops.log, _positive), None),
    ("op.abs", _unary(ops.abs, _away), None),
    ("op.sigmoid", _unary(ops.sigmoid), None),
    ("op.log_sigmoid", _unary(ops.log_sigmoid), None),
    ("op.relu", _unary(ops.relu, _away), None),
    ("op.clamp_min", _unary(lambda x: ops.clamp_min(x, 0.0), _away), None),
    ("op.smooth_l1", _unary(lambda x: ops.smooth_l1(x, 1.0), _clear_of_delta), None),
    ("op.sum_mean", _reductions, None),
    ("op.max", _max, None),
    ("op.shape", _shape_ops, None),
    ("op.matmul", _matmul, None),
    ("op.channel_norm", _channel_norm, None),
    ("op.conv2d", _conv(1, 1, 3), 12),
    ("op.conv2d_1x1", _conv(1, 0, 1), 12),
    ("op.conv2d_strided", _conv(2, 1, 3, bias=False), 12),
    ("op.batchnorm", _batchnorm, 16),
    ("op.concat_avgpool", _concat_pool, 16),
    ("op.gated_fusion", _gated_fusion, 12),
    ("loss.csrd", _csrd, 4),
    ("loss.msfd", _msfd, 24),
    ("loss.reld", _reld, 24),
    ("loss.qfl", _qfl, None),
    ("loss.smooth_l1", _smooth_l1, None),
    ("loss.respd", _respd, 24),
    ("loss.respd_objects", _respd_objects, 24),
    ("loss.focal", _focal, 24),
    ("loss.detection", _detection, 24),
    ("loss.total", _total, 16),
)


@dataclass
class CaseResult:
    name: str
    fixtures: int
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_case(name: str, build: Builder, max_coords: Optional[int], seed: int, fixtures: int) -> CaseResult:
    t0 = time.perf_counter()
    worst = 0.0
    for f in range(fixtures):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), f, *name.encode()]))
        fn, params = build(rng)
        res = check_gradients(fn, params, h=STEP, max_coords=max_coords, rng=rng, tol=TOLERANCE)
        worst = max(worst, res.max_rel_error)
    return CaseResult(name, fixtures, worst, time.perf_counter() - t0)


def run_suite(seed: int = 0, fixtures: int = 20, names: Optional[Sequence[str]] = None) -> List[CaseResult]:
    out = []
    for name, build, max_coords in CASES:
        if names is None or name in names:
            out.append(run_case(name, build, max_coords, seed, fixtures))
    return out
