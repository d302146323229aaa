"""Cross-modality distillation losses.

* radar-to-objectness (CSRD): calibrated radar map vs the teacher's pooled heatmap, L1
* masked feature imitation (MSFD): per-cell L2 distance under a foreground mask
* relation distillation (RelD): L1 between cosine affinity matrices, multi-scale
* response distillation (RespD): QFL on class maps + SmoothL1 on box maps, per-task weights

Feature maps may carry a leading batch axis; every loss is averaged over it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import HeadOutput
from .numerics import Tensor, as_tensor, ops
from .numerics.init import conv_params

LOSS_TERMS = ("csrd", "msfd", "reld", "respd", "det")
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_csrd: float = 100.0
    lambda_msfd: float = 10.0
    lambda_reld: float = 0.25
    lambda_respd: float = 1.0
    lambda_det: float = 1.0
    task_weights: Tuple[float, ...] = (2.0, 2.0, 2.0, 1.0)

    def __post_init__(self):
        if min(self.lambdas) < 0:
            raise ValueError("loss weights must be non-negative")
        if any(w <= 0 for w in self.task_weights):
            raise ValueError("task weights must be positive")

    @property
    def lambdas(self) -> Tuple[float, float, float, float, float]:
        return (self.lambda_csrd, self.lambda_msfd, self.lambda_reld, self.lambda_respd, self.lambda_det)


def task_weights_for(is_dynamic: Sequence[bool], mode: str = "dynamic", boost: float = 2.0) -> Tuple[float, ...]:
    """``dynamic``: moving classes get ``boost``; ``static``: the reverse; ``vanilla``: all ones."""
    if mode == "vanilla":
        return tuple(1.0 for _ in is_dynamic)
    if mode == "dynamic":
        return tuple(boost if d else 1.0 for d in is_dynamic)
    if mode == "static":
        return tuple(1.0 if d else boost for d in is_dynamic)
    raise ValueError(f"unknown RespD weight mode {mode!r}")


def _batch_mean(x: Tensor, sample_axes: int) -> Tensor:
    """Mean over a leading batch axis if present (``sample_axes`` = rank of one sample)."""
    return ops.mean(x) if x.ndim > sample_axes else x


# ---------------------------------------------------------------------------
# CSRD
# ---------------------------------------------------------------------------

def teacher_objectness(y_t, pooling: str = "mean") -> Tensor:
    """Class-pooled sigmoid of teacher logits: ``[.., K, H, W] -> [.., H, W]``."""
    p = ops.sigmoid(as_tensor(y_t))
    if pooling == "mean":
        return ops.mean(p, axis=-3)
    if pooling == "max":
        return ops.max(p, axis=-3)
    raise ValueError(f"pooling must be 'mean' or 'max', got {pooling!r}")


@dataclass
class CalibrationModule:
    """Three (3x3 conv, batchnorm, relu) blocks then a 1x1 projection to one channel.

    The projection starts at zero by default so the map begins near the
    objectness background and the radar encoder is not jolted by a random head.
    """

    params: Dict[str, Tensor]
    n_blocks: int = 3

    @classmethod
    def init(cls, channels: int, seed: int, n_blocks: int = 3, zero_proj: bool = True) -> "CalibrationModule":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 29]))
        p: Dict[str, Tensor] = {}
        for b in range(n_blocks):
            w, bias = conv_params(rng, channels, channels, 3, f"calib.block{b}.conv")
            p[w.name], p[bias.name] = w, bias
            p[f"calib.block{b}.bn.gamma"] = Tensor(np.ones(channels), requires_grad=True, name=f"calib.block{b}.bn.gamma")
            p[f"calib.block{b}.bn.beta"] = Tensor(np.zeros(channels), requires_grad=True, name=f"calib.block{b}.bn.beta")
        w, bias = conv_params(rng, 1, channels, 1, "calib.proj")
        if zero_proj:
            w.data[...] = 0.0
            bias.data[...] = 0.0
        p[w.name], p[bias.name] = w, bias
        return cls(p, n_blocks)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def __call__(self, f_r) -> Tensor:
        p = self.params
        x = as_tensor(f_r)
        for b in range(self.n_blocks):
            x = ops.conv2d(x, p[f"calib.block{b}.conv.weight"], p[f"calib.block{b}.conv.bias"], padding=1)
            x = ops.relu(ops.batchnorm(x, p[f"calib.block{b}.bn.gamma"], p[f"calib.block{b}.bn.beta"]))
        y = ops.conv2d(x, p["calib.proj.weight"], p["calib.proj.bias"])
        return ops.getitem(y, (Ellipsis, 0, slice(None), slice(None)))


def csrd_from_maps(objectness, calibrated) -> Tensor:
    """Mean absolute difference between two ``[.., H, W]`` maps."""
    d = ops.abs(ops.sub(as_tensor(objectness), as_tensor(calibrated)))
    return ops.mean(d)


def csrd_loss(f_s_r, y_t, calib: Optional[CalibrationModule], pooling: str = "mean",
              target=None) -> Tensor:
    """Radar-to-objectness loss.

    ``target`` overrides the pooled teacher map (used for the ground-truth
    source ablation). Without a calibration module the radar map is
    channel-averaged instead of projected.
    """
    if target is None:
        target = teacher_objectness(y_t, pooling).data
    pred = ops.mean(as_tensor(f_s_r), axis=-3) if calib is None else calib(f_s_r)
    return csrd_from_maps(np.asarray(target, dtype=float), pred)


# ---------------------------------------------------------------------------
# MSFD
# ---------------------------------------------------------------------------

def msfd_loss(f_t, f_s, mask) -> Tensor:
    """(1/HW) * sum over cells of mask * ||F_T - F_S||_2, averaged over the batch."""
    f_t, f_s = as_tensor(f_t), as_tensor(f_s)
    if f_t.shape != f_s.shape:
        raise ValueError(f"MSFD feature shapes differ: teacher {f_t.shape} vs student {f_s.shape}")
    mask = np.asarray(mask, dtype=float)
    if mask.shape[-2:] != f_t.shape[-2:]:
        raise ValueError(f"MSFD mask spatial size {mask.shape[-2:]} != feature size {f_t.shape[-2:]}")
    dist = ops.channel_norm(ops.sub(f_t, f_s))
    h, w = f_t.shape[-2:]
    per_sample = ops.mul(ops.sum(ops.mul(dist, mask), axis=(-2, -1)), 1.0 / (h * w))
    return _batch_mean(per_sample, 0)


# ---------------------------------------------------------------------------
# RelD
# ---------------------------------------------------------------------------

def affinity(f) -> Tensor:
    """Cosine similarity between the channel vectors of all flattened positions.

    ``[C, H, W] -> [HW, HW]`` (batched inputs give ``[N, HW, HW]``). Zero
    vectors score 0 against everything and 1 against themselves.
    """
    f = as_tensor(f)
    c, h, w = f.shape[-3:]
    lead = f.shape[:-3]
    flat = ops.reshape(f, lead + (c, h * w))
    norm = ops.clamp_min(ops.channel_norm(ops.reshape(flat, lead + (c, 1, h * w))), NORM_FLOOR)
    unit = ops.div(flat, norm)  # norm: lead + (1, HW)
    sim = ops.matmul(ops.transpose(unit, tuple(range(len(lead))) + (len(lead) + 1, len(lead))), unit)
    dead = (np.sqrt((f.data.reshape(lead + (c, h * w)) ** 2).sum(axis=-2)) < NORM_FLOOR)
    if dead.any():
        fix = np.zeros(lead + (h * w, h * w))
        idx = np.arange(h * w)
        fix[..., idx, idx] = dead.astype(float)
        sim = ops.add(sim, fix)
    # rounding can push |cos| an ulp past 1; clip the value only, the gradient is unchanged
    np.clip(sim.data, -1.0, 1.0, out=sim.data)
    return sim


def unit_normalize(f) -> Tensor:
    """Scale every position's channel vector to unit length (zero vectors stay zero)."""
    f = as_tensor(f)
    norm = ops.clamp_min(ops.channel_norm(f), NORM_FLOOR)
    return ops.div(f, ops.reshape(norm, f.shape[:-3] + (1,) + f.shape[-2:]))


def affinity_l1(f_t, f_s) -> Tensor:
    """Mean absolute difference of the two affinity matrices (per matrix entry)."""
    return ops.mean(ops.abs(ops.sub(affinity(f_t), affinity(f_s))))


@dataclass
class RelationAdapter:
    """Fixed, non-trainable conv block applied after each 2x downsampling.

    Shared by teacher and student paths so identical inputs stay identical.
    """

    weights: List[Tuple[Tensor, Tensor]] = field(default_factory=list)
    adapt: bool = True

    @classmethod
    def init(cls, channels: int, n_scales: int, seed: int, adapt: bool = True) -> "RelationAdapter":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31]))
        ws = []
        for s in range(1, n_scales):
            w, b = conv_params(rng, channels, channels, 3, f"reld.level{s}")
            w.requires_grad = False
            b.requires_grad = False
            ws.append((w, b))
        return cls(ws, adapt)

    def level(self, x: Tensor, s: int) -> Tensor:
        x = ops.avgpool2x(x)
        if not self.adapt:
            return x
        w, b = self.weights[s - 1]
        return ops.relu(ops.conv2d(x, w, b, padding=1))


def reld_loss(f_t_f, f_s_f, n_scales: int = 4, adapter: Optional[RelationAdapter] = None,
              reduction: str = "mean") -> Tensor:
    """Multi-scale relation loss; scale 0 is the input resolution.

    Positions are unit-normalised before the pyramid is built, so the loss
    depends only on feature directions at every scale.
    """
    f_t, f_s = as_tensor(f_t_f), as_tensor(f_s_f)
    if f_t.shape != f_s.shape:
        raise ValueError(f"RelD feature shapes differ: {f_t.shape} vs {f_s.shape}")
    h, w = f_t.shape[-2:]
    div = 2 ** (n_scales - 1)
    if h % div or w % div:
        raise ValueError(f"spatial size {h}x{w} not divisible by 2^{n_scales - 1}")
    if adapter is None:
        adapter = RelationAdapter.init(f_t.shape[-3], n_scales, seed=0)
    f_t, f_s = unit_normalize(f_t), unit_normalize(f_s)
    terms = []
    for s in range(n_scales):
        if s > 0:
            f_t = adapter.level(f_t, s)
            f_s = adapter.level(f_s, s)
        terms.append(affinity_l1(f_t, f_s))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    if reduction == "sum":
        return total
    return ops.mul(total, 1.0 / n_scales)


# ---------------------------------------------------------------------------
# RespD
# ---------------------------------------------------------------------------

LOG_FLOOR = 1e-12


def qfl(pred_logits, target, gamma: float = 2.0, reduction: str = "mean") -> Tensor:
    """Quality focal loss, mean (or sum) over elements.

    ``-|y - s|^gamma * ((1 - y) log(1 - s) + y log s)`` with ``s = sigmoid(x)``.
    """
    x = as_tensor(pred_logits)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    s = ops.sigmoid(x)
    log_s = ops.log(s, floor=LOG_FLOOR)
    log_1ms = ops.log(ops.sub(1.0, s), floor=LOG_FLOOR)
    ce = ops.add(ops.mul(log_s, y), ops.mul(log_1ms, 1.0 - y))
    reduce = _reducer(reduction)
    if gamma == 0:
        return ops.mul(reduce(ce), -1.0)
    mod = ops.power(ops.abs(ops.sub(s, y)), gamma)
    return ops.mul(reduce(ops.mul(mod, ce)), -1.0)


def bce(pred_logits, target) -> Tensor:
    """Binary cross-entropy on logits with the same log floor as :func:`qfl`."""
    x = as_tensor(pred_logits)
    y = np.asarray(target, dtype=float)
    s = ops.sigmoid(x)
    ce = ops.add(ops.mul(ops.log(s, floor=LOG_FLOOR), y), ops.mul(ops.log(ops.sub(1.0, s), floor=LOG_FLOOR), 1.0 - y))
    return ops.mul(ops.mean(ce), -1.0)


def smooth_l1_loss(target, pred, delta: float = 1.0, weight=None, reduction: str = "mean") -> Tensor:
    d = ops.smooth_l1(ops.sub(as_tensor(pred), as_tensor(target)), delta)
    if weight is not None:
        d = ops.mul(d, weight)
    return _reducer(reduction)(d)


def _reducer(reduction: str):
    if reduction == "mean":
        return ops.mean
    if reduction == "sum":
        return ops.sum
    raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def respd_loss(teacher: HeadOutput, student: HeadOutput, task_weights: Sequence[float],
               gamma: float = 2.0, delta: float = 1.0, region=None,
               normalizer: Optional[float] = None) -> Tuple[Tensor, Tensor]:
    """Per-task soft-label classification and box-map imitation.

    ``region`` is a per-class ``[.., K, H, W]`` weight on the regression term
    (typically the ground-truth centre heatmaps). Without it the shared
    regression map is apportioned to tasks by the teacher's normalised class
    response, so unit weights give plain dense SmoothL1. With ``normalizer``
    both terms are sums divided by it (the object count) instead of means.
    """
    t_cls = teacher.cls.data
    t_reg = teacher.reg.data
    k = t_cls.shape[-3]
    if len(task_weights) != k:
        raise ValueError(f"{len(task_weights)} task weights for {k} tasks")
    soft = ops._sigmoid(t_cls)
    if region is None:
        share = soft / np.maximum(soft.sum(axis=-3, keepdims=True), LOG_FLOOR)
    else:
        share = np.asarray(region, dtype=float)
        if share.shape != t_cls.shape:
            raise ValueError(f"region shape {share.shape} != class map shape {t_cls.shape}")
    mode = "mean" if normalizer is None else "sum"
    # summed terms: classification per object, regression per object and per channel
    c_scale = 1.0 if normalizer is None else 1.0 / max(float(normalizer), 1.0)
    r_scale = 1.0 if normalizer is None else c_scale / t_reg.shape[-3]
    l_cls: Optional[Tensor] = None
    l_reg: Optional[Tensor] = None
    for i, w_i in enumerate(task_weights):
        s_cls = ops.getitem(student.cls, (Ellipsis, slice(i, i + 1), slice(None), slice(None)))
        c = qfl(s_cls, soft[..., i:i + 1, :, :], gamma, reduction=mode)
        r = smooth_l1_loss(t_reg, student.reg, delta, weight=share[..., i:i + 1, :, :], reduction=mode)
        c = ops.mul(c, float(w_i) * c_scale)
        r = ops.mul(r, float(w_i) * r_scale)
        l_cls = c if l_cls is None else ops.add(l_cls, c)
        l_reg = r if l_reg is None else ops.add(l_reg, r)
    return l_cls, l_reg


# ---------------------------------------------------------------------------
# overall objective
# ---------------------------------------------------------------------------

def total_loss(components: Dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum over present terms; ``respd`` may be given as ``cls`` + ``reg``."""
    comps = dict(components)
    if "respd" not in comps and ("cls" in comps or "reg" in comps):
        parts = [comps[k] for k in ("cls", "reg") if k in comps]
        comps["respd"] = parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])
    lam = dict(zip(LOSS_TERMS, weights.lambdas))
    total: Optional[Tensor] = None
    for name in LOSS_TERMS:
        if name not in comps:
            continue
        term = as_tensor(comps[name])
        if not np.all(np.isfinite(term.data)):
            raise FloatingPointError(f"loss term {name} is not finite")
        term = ops.mul(term, lam[name])
        total = term if total is None else ops.add(total, term)
    return total if total is not None else Tensor(0.0)
