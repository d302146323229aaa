"""Deterministic synthetic BEV scenes rendered for three sensing modalities.

All grids are ``[C, H, W]`` float64 arrays with row ``i`` along +y and column
``j`` along +x; the ego sensor sits at the world origin.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import bdt

LIDAR_CHANNELS = 4
RADAR_CHANNELS = 4
CAMERA_CHANNELS = 4

# independent random streams per rendering stage
_STREAM_LAYOUT, _STREAM_LIDAR, _STREAM_RADAR, _STREAM_CAMERA = range(4)


@dataclass(frozen=True)
class GridSpec:
    H: int
    W: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_size: float

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for n, lo, hi, axis in ((self.W, self.x_min, self.x_max, "x"), (self.H, self.y_min, self.y_max, "y")):
            if not math.isclose((hi - lo) / self.cell_size, n, rel_tol=0, abs_tol=1e-9):
                raise ValueError(f"{axis} extent {hi - lo} m is not {n} cells of {self.cell_size} m")

    @classmethod
    def centered(cls, size: int = 96, cell_size: float = 0.6) -> "GridSpec":
        half = size * cell_size / 2.0
        return cls(size, size, -half, half, -half, half, cell_size)

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """(xs[W], ys[H]) of cell centres in metres."""
        xs = self.x_min + (np.arange(self.W) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.H) + 0.5) * self.cell_size
        return xs, ys

    def cell_of(self, x: float, y: float) -> Tuple[int, int]:
        """(row, col) of the cell containing a world point."""
        j = int(math.floor((x - self.x_min) / self.cell_size))
        i = int(math.floor((y - self.y_min) / self.cell_size))
        return min(max(i, 0), self.H - 1), min(max(j, 0), self.W - 1)

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def range_map(self) -> np.ndarray:
        xs, ys = self.cell_centers()
        return np.hypot(xs[None, :], ys[:, None])

    def shifted(self, di: int, dj: int) -> "GridSpec":
        dx, dy = dj * self.cell_size, di * self.cell_size
        return replace(self, x_min=self.x_min + dx, x_max=self.x_max + dx,
                       y_min=self.y_min + dy, y_max=self.y_max + dy)


@dataclass(frozen=True)
class ClassSpec:
    names: Tuple[str, ...]
    is_dynamic: Tuple[bool, ...]
    width_mean: Tuple[float, ...]
    width_std: Tuple[float, ...]
    length_mean: Tuple[float, ...]
    length_std: Tuple[float, ...]
    height: Tuple[float, ...]
    rcs: Tuple[float, ...]
    frequency: Tuple[float, ...]

    def __post_init__(self):
        k = len(self.names)
        for fname in ("is_dynamic", "width_mean", "width_std", "length_mean", "length_std",
                      "height", "rcs", "frequency"):
            if len(getattr(self, fname)) != k:
                raise ValueError(f"ClassSpec.{fname} has {len(getattr(self, fname))} entries, expected {k}")
        if k >= 2 and (all(self.is_dynamic) or not any(self.is_dynamic)):
            raise ValueError("need at least one dynamic and one static class")

    @property
    def K(self) -> int:
        return len(self.names)

    @classmethod
    def default(cls) -> "ClassSpec":
        return cls(
            names=("car", "pedestrian", "cyclist", "barrier"),
            is_dynamic=(True, True, True, False),
            width_mean=(1.9, 0.7, 0.7, 0.5),
            width_std=(0.15, 0.1, 0.1, 0.05),
            length_mean=(4.5, 0.7, 1.8, 2.5),
            length_std=(0.4, 0.1, 0.15, 0.3),
            height=(1.6, 1.75, 1.5, 1.0),
            rcs=(1.0, 0.3, 0.5, 0.8),
            frequency=(0.4, 0.25, 0.15, 0.2),
        )


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    x: float
    y: float
    w: float
    l: float  # noqa: E741 - length along the heading
    yaw: float
    vx: float = 0.0
    vy: float = 0.0

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x, self.y)

    @property
    def range(self) -> float:
        return math.hypot(self.x, self.y)

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.w, self.l)

    def to_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "center": [float(self.x), float(self.y)],
            "size": [float(self.w), float(self.l)],
            "yaw": float(self.yaw),
            "velocity": [float(self.vx), float(self.vy)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoxAnnotation":
        try:
            x, y = d["center"]
            w, l = d["size"]  # noqa: E741
            vx, vy = d.get("velocity", (0.0, 0.0))
            return cls(int(d["class_id"]), float(x), float(y), float(w), float(l), float(d["yaw"]),
                       float(vx), float(vy))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed box annotation {d!r}: {exc}") from exc


@dataclass(frozen=True)
class SensorModel:
    """Knobs of the three renderers. Nothing here comes from real sensors."""

    lidar_falloff_m: float = 35.0
    lidar_min_hit_prob: float = 0.2
    lidar_background_max: float = 0.1
    lidar_ground_density: float = 0.3
    radar_radial_std_per_m: float = 0.05
    radar_azimuth_std_deg: float = 0.5
    radar_dropout_per_m: float = 1.0 / 60.0
    radar_dropout_max: float = 0.6
    radar_max_returns: int = 3
    radar_clutter_rate: float = 3.0
    camera_blur_min_m: float = 0.3
    camera_blur_per_m: float = 0.08
    camera_depth_bias_per_m: float = 0.06
    camera_background: float = 0.05


@dataclass
class SceneSample:
    annotations: List[BoxAnnotation]
    lidar_bev: np.ndarray
    camera_bev: np.ndarray
    radar_bev: np.ndarray
    seed: int
    placement_shortfall: bool = False

    def grids(self) -> Dict[str, np.ndarray]:
        return {"lidar": self.lidar_bev, "camera": self.camera_bev, "radar": self.radar_bev}


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def box_local_coords(box: BoxAnnotation, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinates of points (broadcast xs[None,:], ys[:,None]) in the box frame: (along length, along width)."""
    dx = xs[None, :] - box.x
    dy = ys[:, None] - box.y
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    return dx * c + dy * s, -dx * s + dy * c


def inside_box(box: BoxAnnotation, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    u, v = box_local_coords(box, xs, ys)
    return (np.abs(u) <= 0.5 * box.l) & (np.abs(v) <= 0.5 * box.w)


def _window(grid: GridSpec, box: BoxAnnotation, pad_m: float = 0.0):
    """Row/col slices covering the box's circumscribed circle plus padding."""
    r = box.half_diagonal + pad_m + grid.cell_size
    j0 = max(0, int(math.floor((box.x - r - grid.x_min) / grid.cell_size)))
    j1 = min(grid.W, int(math.ceil((box.x + r - grid.x_min) / grid.cell_size)) + 1)
    i0 = max(0, int(math.floor((box.y - r - grid.y_min) / grid.cell_size)))
    i1 = min(grid.H, int(math.ceil((box.y + r - grid.y_min) / grid.cell_size)) + 1)
    return slice(i0, max(i0, i1)), slice(j0, max(j0, j1))


# ---------------------------------------------------------------------------
# scene layout
# ---------------------------------------------------------------------------

def sample_layout(
    seed: int,
    grid: GridSpec,
    classes: ClassSpec,
    n_obj_range: Tuple[int, int],
    max_retries: int = 60,
    margin_m: float = 1.0,
) -> Tuple[List[BoxAnnotation], bool]:
    lo, hi = int(n_obj_range[0]), int(n_obj_range[1])
    if hi < lo or lo < 0:
        raise ValueError(f"n_obj_range must be a non-empty [lo, hi] range, got {n_obj_range}")
    rng = _rng(seed, _STREAM_LAYOUT)
    n = int(rng.integers(lo, hi + 1))
    freq = np.asarray(classes.frequency, dtype=float)
    freq = freq / freq.sum()
    boxes: List[BoxAnnotation] = []
    shortfall = False
    for _ in range(n):
        placed = False
        for _attempt in range(max_retries):
            cid = int(rng.choice(classes.K, p=freq))
            w = max(0.3 * classes.width_mean[cid], classes.width_mean[cid] + classes.width_std[cid] * rng.normal())
            l = max(0.3 * classes.length_mean[cid], classes.length_mean[cid] + classes.length_std[cid] * rng.normal())  # noqa: E741
            x = rng.uniform(grid.x_min + margin_m, grid.x_max - margin_m)
            y = rng.uniform(grid.y_min + margin_m, grid.y_max - margin_m)
            yaw = rng.uniform(-math.pi, math.pi)
            vx = vy = 0.0
            if classes.is_dynamic[cid]:
                speed = rng.uniform(0.0, 3.0)
                vx, vy = speed * math.cos(yaw), speed * math.sin(yaw)
            cand = BoxAnnotation(cid, x, y, w, l, yaw, vx, vy)
            if all(math.hypot(b.x - x, b.y - y) >= 0.8 * (b.half_diagonal + cand.half_diagonal) for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            shortfall = True
    return boxes, shortfall


# ---------------------------------------------------------------------------
# renderers
# ---------------------------------------------------------------------------

def render_lidar_bev(boxes: Sequence[BoxAnnotation], grid: GridSpec, classes: ClassSpec,
                     sensor: SensorModel, seed: int) -> np.ndarray:
    """Channels: occupancy, height proxy, box-edge indicator, normalised range."""
    rng = _rng(seed, _STREAM_LIDAR)
    out = np.zeros((LIDAR_CHANNELS, grid.H, grid.W))
    ground = rng.random((grid.H, grid.W)) < sensor.lidar_ground_density
    out[0] = ground * rng.uniform(0.0, sensor.lidar_background_max, size=(grid.H, grid.W))
    out[1] = ground * rng.normal(0.0, 0.02, size=(grid.H, grid.W))
    out[3] = grid.range_map() / 50.0
    xs, ys = grid.cell_centers()
    for box in boxes:
        si, sj = _window(grid, box)
        u, v = box_local_coords(box, xs[sj], ys[si])
        inside = (np.abs(u) <= 0.5 * box.l) & (np.abs(v) <= 0.5 * box.w)
        if not inside.any():
            continue
        p_hit = max(sensor.lidar_min_hit_prob, math.exp(-box.range / sensor.lidar_falloff_m))
        hit = inside & (rng.random(inside.shape) < p_hit)
        val = 0.8 + 0.2 * rng.random(inside.shape)
        occ = out[0, si, sj]
        out[0, si, sj] = np.where(hit, val, occ)
        height = classes.height[box.class_id] / 2.0 + rng.normal(0.0, 0.03, size=inside.shape)
        out[1, si, sj] = np.where(hit, height, out[1, si, sj])
        edge_gap = np.minimum(0.5 * box.l - np.abs(u), 0.5 * box.w - np.abs(v))
        edge = hit & (edge_gap < grid.cell_size)
        out[2, si, sj] = np.where(edge, 1.0, out[2, si, sj])
    return out


@dataclass(frozen=True)
class RadarReturn:
    box_index: int
    true_xy: Tuple[float, float]
    measured_xy: Tuple[float, float]


def radar_returns(boxes: Sequence[BoxAnnotation], sensor: SensorModel, seed: int) -> List[RadarReturn]:
    """Object-level returns: range-dependent dropout, then polar noise linear in range."""
    rng = _rng(seed, _STREAM_RADAR)
    rets: List[RadarReturn] = []
    az_std = math.radians(sensor.radar_azimuth_std_deg)
    for bi, box in enumerate(boxes):
        p_drop = min(sensor.radar_dropout_max, box.range * sensor.radar_dropout_per_m)
        drop = rng.random() < p_drop
        n = int(rng.integers(1, sensor.radar_max_returns + 1))
        # draws happen whether or not the object drops so streams stay aligned
        local = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.array([box.l, box.w])
        noise = rng.normal(size=(n, 2))
        if drop:
            continue
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        for (a, b), (nr, na) in zip(local, noise):
            tx = box.x + a * c - b * s
            ty = box.y + a * s + b * c
            r = math.hypot(tx, ty)
            th = math.atan2(ty, tx)
            r_m = r + nr * sensor.radar_radial_std_per_m * r
            th_m = th + na * az_std
            rets.append(RadarReturn(bi, (tx, ty), (r_m * math.cos(th_m), r_m * math.sin(th_m))))
    return rets


def render_radar_bev(boxes: Sequence[BoxAnnotation], grid: GridSpec, classes: ClassSpec,
                     sensor: SensorModel, seed: int) -> np.ndarray:
    """Channels: occupancy, rcs proxy, vx, vy."""
    out = np.zeros((RADAR_CHANNELS, grid.H, grid.W))
    for ret in radar_returns(boxes, sensor, seed):
        mx, my = ret.measured_xy
        if not grid.contains(mx, my):
            continue
        box = boxes[ret.box_index]
        i, j = grid.cell_of(mx, my)
        out[0, i, j] = 1.0
        out[1, i, j] = max(out[1, i, j], classes.rcs[box.class_id])
        out[2, i, j] = box.vx
        out[3, i, j] = box.vy
    # clutter uses its own stream so it never perturbs object returns
    crng = np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_RADAR, 1]))
    for _ in range(int(crng.poisson(sensor.radar_clutter_rate))):
        i, j = int(crng.integers(grid.H)), int(crng.integers(grid.W))
        rcs = crng.uniform(0.1, 0.6)
        if out[0, i, j] == 0.0:
            out[0, i, j] = 1.0
            out[1, i, j] = rcs
    return out


def camera_embedding(classes: ClassSpec) -> np.ndarray:
    """[K, C_cam] appearance vectors; one dominant channel per class."""
    k = classes.K
    emb = np.full((k, CAMERA_CHANNELS), 0.15)
    for c in range(k):
        emb[c, c % CAMERA_CHANNELS] = 1.0
    return emb


def camera_splat(box: BoxAnnotation, grid: GridSpec, sensor: SensorModel,
                 depth_bias: float = 0.0, n_taps: int = 11) -> np.ndarray:
    """Footprint smeared along the ray from the sensor; blur width grows with range."""
    out = np.zeros((grid.H, grid.W))
    r = box.range
    ux, uy = (box.x / r, box.y / r) if r > 1e-9 else (1.0, 0.0)
    sigma = sensor.camera_blur_min_m + sensor.camera_blur_per_m * r
    z = np.linspace(-2.5, 2.5, n_taps)
    wts = np.exp(-0.5 * z * z)
    wts = wts / wts.sum()
    si, sj = _window(grid, box, pad_m=abs(depth_bias) + 2.5 * sigma)
    xs, ys = grid.cell_centers()
    for zk, wk in zip(z, wts):
        shift = depth_bias + zk * sigma
        moved = replace(box, x=box.x + shift * ux, y=box.y + shift * uy)
        out[si, sj] += wk * inside_box(moved, xs[sj], ys[si])
    return out


def render_camera_bev(boxes: Sequence[BoxAnnotation], grid: GridSpec, classes: ClassSpec,
                      sensor: SensorModel, seed: int) -> np.ndarray:
    rng = _rng(seed, _STREAM_CAMERA)
    emb = camera_embedding(classes)
    out = np.full((CAMERA_CHANNELS, grid.H, grid.W), sensor.camera_background)
    for box in boxes:
        bias = rng.normal() * sensor.camera_depth_bias_per_m * box.range
        splat = camera_splat(box, grid, sensor, depth_bias=bias)
        out += emb[box.class_id][:, None, None] * splat[None]
    return out


def generate_scene(
    seed: int,
    grid: GridSpec,
    classes: ClassSpec,
    n_obj_range: Tuple[int, int] = (4, 12),
    sensor: Optional[SensorModel] = None,
) -> SceneSample:
    sensor = sensor or SensorModel()
    boxes, shortfall = sample_layout(seed, grid, classes, n_obj_range)
    if shortfall:
        warnings.warn(f"scene {seed}: placed {len(boxes)} objects, fewer than requested", RuntimeWarning)
    return SceneSample(
        annotations=boxes,
        lidar_bev=render_lidar_bev(boxes, grid, classes, sensor, seed),
        camera_bev=render_camera_bev(boxes, grid, classes, sensor, seed),
        radar_bev=render_radar_bev(boxes, grid, classes, sensor, seed),
        seed=int(seed),
        placement_shortfall=shortfall,
    )


def generate_corpus(seeds: Sequence[int], grid: GridSpec, classes: ClassSpec,
                    n_obj_range: Tuple[int, int] = (4, 12),
                    sensor: Optional[SensorModel] = None) -> List[SceneSample]:
    return [generate_scene(s, grid, classes, n_obj_range, sensor) for s in seeds]


# ---------------------------------------------------------------------------
# persistence: <stem>.json + <stem>.<modality>.bdt
# ---------------------------------------------------------------------------

SCENE_SCHEMA = "bevdistill-scene/1"


def save_scene(scene: SceneSample, directory, stem: Optional[str] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"scene_{scene.seed:06d}"
    meta = {
        "schema": SCENE_SCHEMA,
        "seed": scene.seed,
        "placement_shortfall": scene.placement_shortfall,
        "annotations": [b.to_dict() for b in scene.annotations],
        "grids": {m: f"{stem}.{m}.bdt" for m in ("lidar", "camera", "radar")},
    }
    for m, arr in scene.grids().items():
        bdt.save(directory / f"{stem}.{m}.bdt", arr)
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_annotations(path) -> List[BoxAnnotation]:
    meta = json.loads(Path(path).read_text())
    items = meta["annotations"] if isinstance(meta, dict) else meta
    return [BoxAnnotation.from_dict(d) for d in items]


def load_scene(path) -> SceneSample:
    path = Path(path)
    meta = json.loads(path.read_text())
    grids = {m: bdt.load(path.parent / name) for m, name in meta["grids"].items()}
    return SceneSample(
        annotations=[BoxAnnotation.from_dict(d) for d in meta["annotations"]],
        lidar_bev=grids["lidar"],
        camera_bev=grids["camera"],
        radar_bev=grids["radar"],
        seed=int(meta["seed"]),
        placement_shortfall=bool(meta.get("placement_shortfall", False)),
    )


def load_corpus(directory) -> List[SceneSample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    return [load_scene(p) for p in sorted(directory.glob("scene_*.json"))]
