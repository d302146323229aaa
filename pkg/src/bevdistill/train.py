"""Teacher / baseline training and distillation into a camera+radar student."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .config import DistillConfig
from .losses import (
    CalibrationModule,
    RelationAdapter,
    csrd_loss,
    msfd_loss,
    reld_loss,
    respd_loss,
    total_loss,
)
from .model import DetectorModel, detection_loss, regression_targets
from .numerics import Tensor, backward, bdt, ops
from .raster import feature_mask, gaussian_heatmap
from .scene import SceneSample

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "csrd", "msfd", "reld", "cls", "reg", "det", "total")


class TrainingDiverged(RuntimeError):
    pass


class IncompatibleModels(ValueError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class PreparedCorpus:
    """Stacked inputs and targets for a list of scenes under one config."""

    scenes: List[SceneSample]
    camera: np.ndarray
    lidar: np.ndarray
    radar: np.ndarray
    heatmap: np.ndarray
    reg: np.ndarray
    reg_mask: np.ndarray
    config: DistillConfig
    _masks: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, scenes: Sequence[SceneSample], config: DistillConfig) -> "PreparedCorpus":
        if not scenes:
            raise ValueError("corpus is empty")
        grid, classes = config.grid_spec, config.class_spec
        hms, regs, rms = [], [], []
        for s in scenes:
            if s.camera_bev.shape[-2:] != (grid.H, grid.W):
                raise ValueError(f"scene {s.seed} grid {s.camera_bev.shape[-2:]} does not match config {grid.H}x{grid.W}")
            hms.append(gaussian_heatmap(s.annotations, grid, classes))
            r, m = regression_targets(s.annotations, grid)
            regs.append(r)
            rms.append(m)
        return cls(
            scenes=list(scenes),
            camera=np.stack([s.camera_bev for s in scenes]),
            lidar=np.stack([s.lidar_bev for s in scenes]),
            radar=np.stack([s.radar_bev for s in scenes]),
            heatmap=np.stack(hms),
            reg=np.stack(regs),
            reg_mask=np.stack(rms),
            config=config,
        )

    def __len__(self) -> int:
        return len(self.scenes)

    def digest(self) -> str:
        """Content hash of annotations and sensor grids, used for seed audits."""
        return corpus_digest(self.scenes)

    def points(self, modality: str) -> np.ndarray:
        return self.lidar if modality == "lidar" else self.radar

    def mask(self, variant: str) -> np.ndarray:
        if variant not in self._masks:
            grid, classes = self.config.grid_spec, self.config.class_spec
            self._masks[variant] = np.stack(
                [feature_mask(variant, s.annotations, grid, classes, self.config.mask) for s in self.scenes])
        return self._masks[variant]


def corpus_digest(scenes: Sequence[SceneSample]) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(json.dumps([a.to_dict() for a in s.annotations], sort_keys=True).encode())
        for grid in (s.lidar_bev, s.camera_bev, s.radar_bev):
            h.update(bdt.to_bytes(grid))
    return h.hexdigest()


def batch_indices(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of minibatches: a fresh seeded permutation each epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    bs = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield np.sort(perm[start:start + bs])


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive moments, no weight decay.

    With ``total_steps`` set, the step size follows a half cosine from ``lr`` down to zero
    over that many steps; otherwise it stays at ``lr``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 total_steps: Optional[int] = None):
        self.params = list(params)
        self.base_lr = lr
        self.lr = lr
        self.total_steps = total_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.total_steps:
            self.lr = 0.5 * self.base_lr * (1.0 + math.cos(math.pi * self.t / self.total_steps))
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _adam(params, config: DistillConfig, steps: int) -> Adam:
    o = config.optim
    total = steps if o.schedule == "cosine" else None
    return Adam(params, lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps, total_steps=total)


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DetectorModel
    curve: List[Dict[str, float]]
    calib: Optional[CalibrationModule] = None


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at step {step}")


def _check_grads(params: Sequence[Tensor], step: int) -> None:
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient at step {step}")


def new_model(config: DistillConfig, modality: str, seed: Optional[int] = None) -> DetectorModel:
    return DetectorModel.init(config.model, modality, config.seeds.model if seed is None else seed)


def train_model(
    corpus: PreparedCorpus,
    config: DistillConfig,
    modality: str,
    steps: int,
    model: Optional[DetectorModel] = None,
    seed: Optional[int] = None,
    batch_seed: Optional[int] = None,
) -> TrainResult:
    """Supervised training on the detection loss alone.

    ``modality`` picks the point stream: ``lidar`` (teacher) or ``radar`` (student).
    """
    model = model or new_model(config, modality, seed)
    if model.modality != modality:
        raise ValueError(f"model modality {model.modality} != requested {modality}")
    opt = _adam(model.parameters(), config, steps)
    weights = config.loss_weights
    points = corpus.points(modality)
    batches = batch_indices(len(corpus), config.optim.batch_size, config.seeds.batches if batch_seed is None else batch_seed)
    curve: List[Dict[str, float]] = []
    for step in range(steps):
        idx = next(batches)
        _, out = model.forward(corpus.camera[idx], points[idx])
        det = detection_loss(out, corpus.heatmap[idx], corpus.reg[idx], corpus.reg_mask[idx],
                             config.loss.det_reg_weight)
        loss = total_loss({"det": det}, weights)
        val = loss.item()
        _check_finite(val, step)
        opt.zero_grad()
        backward(loss)
        _check_grads(opt.params, step)
        opt.step()
        curve.append(_curve_row(step, {"det": det}, val))
    return TrainResult(model, curve)


def _curve_row(step: int, comps: Dict[str, Tensor], total: float) -> Dict[str, float]:
    row = {"step": step}
    for k in CURVE_COLUMNS[1:-1]:
        row[k] = comps[k].item() if k in comps else 0.0
    row["total"] = total
    return row


def check_compatible(teacher: DetectorModel, student: DetectorModel) -> None:
    ta, sa = teacher.arch, student.arch
    problems = []
    if ta.camera_channels != sa.camera_channels:
        problems.append(f"camera channels {ta.camera_channels} vs {sa.camera_channels}")
    if ta.points_channels != sa.points_channels:
        problems.append(f"point-stream channels {ta.points_channels} vs {sa.points_channels}")
    if ta.fused_channels != sa.fused_channels:
        problems.append(f"fused channels {ta.fused_channels} vs {sa.fused_channels}")
    if ta.num_classes != sa.num_classes:
        problems.append(f"classes {ta.num_classes} vs {sa.num_classes}")
    if problems:
        raise IncompatibleModels("teacher/student feature maps are incompatible: " + "; ".join(problems))


def distill(
    teacher: DetectorModel,
    student: DetectorModel,
    corpus: PreparedCorpus,
    config: DistillConfig,
    steps: int,
    calib: Optional[CalibrationModule] = None,
    batch_seed: Optional[int] = None,
) -> TrainResult:
    """Train ``student`` against a frozen ``teacher`` with the enabled distillation terms."""
    if not teacher.frozen:
        raise ValueError("teacher must be frozen before distillation")
    check_compatible(teacher, student)
    tg, lo = config.toggles, config.loss
    weights = config.loss_weights
    params = student.parameters()
    if tg.csrd and lo.calibration:
        calib = calib or CalibrationModule.init(student.arch.points_channels, seed=config.seeds.model)
        params = params + calib.parameters()
    else:
        calib = None
    adapter = RelationAdapter.init(student.arch.fused_channels, lo.reld_scales, seed=config.seeds.model,
                                   adapt=lo.reld_adapt) if tg.reld else None
    need_teacher = tg.respd or tg.csrd or tg.msfd or tg.reld
    opt = _adam(params, config, steps)
    batches = batch_indices(len(corpus), config.optim.batch_size, config.seeds.batches if batch_seed is None else batch_seed)
    curve: List[Dict[str, float]] = []
    for step in range(steps):
        idx = next(batches)
        cam = corpus.camera[idx]
        s_feat, s_out = student.forward(cam, corpus.radar[idx])
        comps: Dict[str, Tensor] = {
            "det": detection_loss(s_out, corpus.heatmap[idx], corpus.reg[idx], corpus.reg_mask[idx], lo.det_reg_weight)
        }
        if need_teacher:
            t_feat, t_out = teacher.forward(cam, corpus.lidar[idx])
            if s_feat.fused.shape != t_feat.fused.shape:
                raise IncompatibleModels(f"fused maps differ: {t_feat.fused.shape} vs {s_feat.fused.shape}")
            if tg.respd:
                region = normalizer = None
                if lo.respd_mode == "objects":
                    region = corpus.heatmap[idx]
                    normalizer = float(corpus.reg_mask[idx].sum())
                comps["cls"], comps["reg"] = respd_loss(t_out, s_out, weights.task_weights, lo.qfl_gamma,
                                                        lo.smooth_l1_delta, region, normalizer)
            if tg.csrd:
                target = None
                if lo.csrd_source == "gt":
                    hm = corpus.heatmap[idx]
                    target = hm.mean(axis=-3) if lo.pooling == "mean" else hm.max(axis=-3)
                comps["csrd"] = csrd_loss(s_feat.points, t_out.cls, calib, lo.pooling, target=target)
            if tg.msfd:
                mask = corpus.mask(lo.msfd_mask)[idx]
                terms = []
                if "camera" in lo.msfd_locations:
                    t_cam = t_feat.gated_camera if lo.msfd_gated else t_feat.camera
                    s_cam = s_feat.gated_camera if lo.msfd_gated else s_feat.camera
                    terms.append(msfd_loss(t_cam, s_cam, mask))
                if "fused" in lo.msfd_locations:
                    terms.append(msfd_loss(t_feat.fused, s_feat.fused, mask))
                m = terms[0]
                for t in terms[1:]:
                    m = ops.add(m, t)
                comps["msfd"] = m
            if tg.reld:
                ft, fs = t_feat.fused, s_feat.fused
                for _ in range(lo.reld_input_pool):
                    ft, fs = ops.avgpool2x(ft), ops.avgpool2x(fs)
                comps["reld"] = reld_loss(ft, fs, lo.reld_scales, adapter, lo.reld_reduction)
        loss = total_loss(comps, weights)
        val = loss.item()
        _check_finite(val, step)
        opt.zero_grad()
        backward(loss)
        _check_grads(opt.params, step)
        opt.step()
        curve.append(_curve_row(step, comps, val))
    return TrainResult(student, curve, calib)
