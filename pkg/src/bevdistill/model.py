"""Two-stream BEV detector shared by teacher (camera + LiDAR) and student (camera + radar).

camera grid --enc--> F_c --+                         +--> cls [K,H,W]
                           +-- gate --> fuser --> decoder --> head
points grid --enc--> F_p --+                         +--> reg [8,H,W]

``points`` is the LiDAR stream in the teacher and the radar stream in the
student; both produce the same channel count so feature maps line up.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter

from .numerics import Tensor, bdt, ops
from .numerics.init import conv_params
from .scene import BoxAnnotation, ClassSpec, GridSpec

REG_CHANNELS = 8  # offset x/y, log w/l, sin/cos yaw, vx/vy
MODALITIES = ("lidar", "radar")


@dataclass(frozen=True)
class ArchConfig:
    camera_in: int = 4
    points_in: int = 4
    camera_channels: int = 8
    points_channels: int = 16
    fused_channels: int = 24
    decoder_channels: int = 24
    head_channels: int = 16
    num_classes: int = 4
    gated: bool = True
    gate_kernel: int = 1
    cls_prior: float = 0.1


@dataclass
class Features:
    camera: Tensor
    points: Tensor
    gated_camera: Tensor
    gated_points: Tensor
    fused: Tensor
    decoded: Tensor


@dataclass
class HeadOutput:
    cls: Tensor
    reg: Tensor


@dataclass
class Detection:
    box: BoxAnnotation
    class_id: int
    score: float


@dataclass
class DetectorModel:
    arch: ArchConfig
    modality: str
    params: Dict[str, Tensor]
    seed: int = 0
    frozen: bool = False

    @classmethod
    def init(cls, arch: ArchConfig, modality: str, seed: int) -> "DetectorModel":
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
        p: Dict[str, Tensor] = {}

        def conv(name, c_out, c_in, k):
            w, b = conv_params(rng, c_out, c_in, k, name)
            p[f"{name}.weight"], p[f"{name}.bias"] = w, b

        cc, pc = arch.camera_channels, arch.points_channels
        conv("camera.enc0", cc, arch.camera_in, 3)
        conv("camera.enc1", cc, cc, 3)
        conv("points.enc0", pc, arch.points_in, 3)
        conv("points.enc1", pc, pc, 3)
        if arch.gated:
            conv("gate.camera", cc, cc + pc, arch.gate_kernel)
            conv("gate.points", pc, cc + pc, arch.gate_kernel)
        conv("fuser", arch.fused_channels, cc + pc, 3)
        conv("decoder", arch.decoder_channels, arch.fused_channels, 3)
        conv("head.trunk", arch.head_channels, arch.decoder_channels, 3)
        conv("head.cls", arch.num_classes, arch.head_channels, 1)
        conv("head.reg", REG_CHANNELS, arch.head_channels, 1)
        p["head.cls.bias"].data[:] = -math.log((1.0 - arch.cls_prior) / arch.cls_prior)
        return cls(arch, modality, p, seed=int(seed))

    # -- parameter bookkeeping ----------------------------------------------
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "DetectorModel":
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(bdt.to_bytes(self.params[k].data))
        return h.hexdigest()

    def copy(self) -> "DetectorModel":
        params = {k: Tensor(v.data.copy(), requires_grad=not self.frozen, name=k) for k, v in self.params.items()}
        return DetectorModel(self.arch, self.modality, params, seed=self.seed, frozen=self.frozen)

    def forward(self, camera, points) -> Tuple[Features, HeadOutput]:
        return forward(self, camera, points)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def conv_block(x, params: Dict[str, Tensor], name: str, relu: bool = True) -> Tensor:
    w = params[f"{name}.weight"]
    y = ops.conv2d(x, w, params[f"{name}.bias"], stride=1, padding=w.shape[-1] // 2)
    return ops.relu(y) if relu else y


def encode_stream(grid, params: Dict[str, Tensor], stream: str) -> Tensor:
    """Two stride-1 conv+relu blocks."""
    x = conv_block(grid, params, f"{stream}.enc0")
    return conv_block(x, params, f"{stream}.enc1")


def gated_fuse(f_m1: Tensor, f_m2: Tensor, params: Dict[str, Tensor],
               names: Tuple[str, str] = ("gate.camera", "gate.points")) -> Tuple[Tensor, Tensor]:
    """Each stream is re-weighted by a sigmoid gate computed from both streams."""
    both = ops.concat_channels(f_m1, f_m2)
    g1 = ops.sigmoid(conv_block(both, params, names[0], relu=False))
    g2 = ops.sigmoid(conv_block(both, params, names[1], relu=False))
    return ops.mul(f_m1, g1), ops.mul(f_m2, g2)


def fuse_conv(f_m1: Tensor, f_m2: Tensor, params: Dict[str, Tensor]) -> Tensor:
    return conv_block(ops.concat_channels(f_m1, f_m2), params, "fuser")


def head_forward(feat: Tensor, params: Dict[str, Tensor]) -> HeadOutput:
    trunk = conv_block(feat, params, "head.trunk")
    return HeadOutput(
        cls=conv_block(trunk, params, "head.cls", relu=False),
        reg=conv_block(trunk, params, "head.reg", relu=False),
    )


def forward(model: DetectorModel, camera, points) -> Tuple[Features, HeadOutput]:
    p = model.params
    f_c = encode_stream(camera, p, "camera")
    f_p = encode_stream(points, p, "points")
    if model.arch.gated:
        g_c, g_p = gated_fuse(f_c, f_p, p)
    else:
        g_c, g_p = f_c, f_p
    fused = fuse_conv(g_c, g_p, p)
    decoded = conv_block(fused, p, "decoder")
    return Features(f_c, f_p, g_c, g_p, fused, decoded), head_forward(decoded, p)


# ---------------------------------------------------------------------------
# targets, loss, decoding
# ---------------------------------------------------------------------------

def regression_targets(boxes: Sequence[BoxAnnotation], grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Dense ``[8, H, W]`` targets and the ``[H, W]`` centre-cell mask."""
    reg = np.zeros((REG_CHANNELS, grid.H, grid.W))
    mask = np.zeros((grid.H, grid.W))
    xs, ys = grid.cell_centers()
    for b in boxes:
        i, j = grid.cell_of(b.x, b.y)
        reg[:, i, j] = (b.x - xs[j], b.y - ys[i], math.log(b.w), math.log(b.l),
                        math.sin(b.yaw), math.cos(b.yaw), b.vx, b.vy)
        mask[i, j] = 1.0
    return reg, mask


def focal_loss(logits: Tensor, heatmap: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss against a Gaussian heatmap, normalised by peak count."""
    pos = (heatmap >= 1.0).astype(float)
    neg_w = (1.0 - pos) * np.power(1.0 - heatmap, beta)
    p = ops.sigmoid(logits)
    log_p = ops.log_sigmoid(logits)
    log_q = ops.log_sigmoid(ops.mul(logits, -1.0))
    pos_term = ops.mul(ops.mul(ops.power(ops.sub(1.0, p), alpha), log_p), pos)
    neg_term = ops.mul(ops.mul(ops.power(p, alpha), log_q), neg_w)
    n_pos = max(1.0, float(pos.sum()))
    return ops.mul(ops.sum(ops.add(pos_term, neg_term)), -1.0 / n_pos)


def detection_loss(out: HeadOutput, heatmap: np.ndarray, reg_target: np.ndarray, reg_mask: np.ndarray,
                   reg_weight: float = 0.25) -> Tensor:
    """Focal heatmap loss plus L1 box regression at object-centre cells."""
    cls_l = focal_loss(out.cls, heatmap)
    m = np.expand_dims(reg_mask, -3)
    n_obj = max(1.0, float(reg_mask.sum()))
    reg_l = ops.mul(ops.sum(ops.mul(ops.abs(ops.sub(out.reg, reg_target)), m)), reg_weight / n_obj)
    return ops.add(cls_l, reg_l)


def decode(cls_logits: np.ndarray, reg: np.ndarray, grid: GridSpec, score_thresh: float = 0.1,
           max_dets: int = 50) -> List[Detection]:
    """Peak extraction on one sample's ``[K,H,W]`` logits and ``[8,H,W]`` regression."""
    if not (0.0 < score_thresh < 1.0):
        raise ValueError("score_thresh must lie in (0, 1)")
    scores = ops._sigmoid(np.asarray(cls_logits, dtype=float))
    peaks = (scores == maximum_filter(scores, size=(1, 3, 3), mode="constant", cval=-np.inf)) & (scores > score_thresh)
    ks, iis, jjs = np.nonzero(peaks)
    vals = scores[ks, iis, jjs]
    order = np.lexsort((jjs, iis, ks, -vals))[:max_dets]
    xs, ys = grid.cell_centers()
    dets = []
    for n in order:
        k, i, j = int(ks[n]), int(iis[n]), int(jjs[n])
        r = reg[:, i, j]
        box = BoxAnnotation(
            class_id=k,
            x=float(xs[j] + r[0]),
            y=float(ys[i] + r[1]),
            w=float(np.exp(np.clip(r[2], -10, 10))),
            l=float(np.exp(np.clip(r[3], -10, 10))),
            yaw=float(math.atan2(r[4], r[5])),
            vx=float(r[6]),
            vy=float(r[7]),
        )
        dets.append(Detection(box, k, float(vals[n])))
    return dets


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one BDT1 blob per parameter
# ---------------------------------------------------------------------------

CHECKPOINT_SCHEMA = "bevdistill-checkpoint/1"


def save_checkpoint(model: DetectorModel, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, t in model.params.items():
        fname = f"{name}.bdt"
        bdt.save(directory / fname, t.data)
        blobs[name] = fname
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": asdict(model.arch),
        "modality": model.modality,
        "seed": model.seed,
        "params": blobs,
        "digest": model.digest(),
    }
    if extra:
        manifest["extra"] = extra
    path = directory / "model.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> DetectorModel:
    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    meta = json.loads(path.read_text())
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: not a detector checkpoint")
    arch = ArchConfig(**meta["arch"])
    params = {k: Tensor(bdt.load(path.parent / f), requires_grad=True, name=k) for k, f in meta["params"].items()}
    return DetectorModel(arch, meta["modality"], params, seed=int(meta["seed"]))
