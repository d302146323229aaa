"""Centre-distance average precision, range-bucketed mAP and velocity error."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import Detection, DetectorModel, decode
from .scene import BoxAnnotation

RANGE_BUCKETS: Tuple[Tuple[float, float], ...] = ((0.0, 20.0), (20.0, 30.0), (30.0, 50.0))
VELOCITY_THRESHOLD = 2.0


def bucket_name(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}m"


@dataclass
class EvalReport:
    class_names: Tuple[str, ...]
    ap: Dict[str, float]
    mAP: float
    range_mAP: Dict[str, float]
    mAVE: float
    n_scenes: int
    n_gt: int
    n_det: int
    thresholds: Tuple[float, ...]
    ap_by_threshold: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_nan_to_none(self.to_dict()), indent=1, sort_keys=True) + "\n"

    def flat_row(self) -> Dict[str, float]:
        row: Dict[str, float] = {"mAP": self.mAP, "mAVE": self.mAVE}
        for k, v in self.ap.items():
            row[f"AP_{k}"] = v
        for k, v in self.range_mAP.items():
            row[f"mAP_{k}"] = v
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.flat_row().items():
            w.writerow([k, repr(float(v))])
        return buf.getvalue()

    def write(self, directory) -> Tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(self.to_json())
        (d / "report.csv").write_text(self.to_csv())
        return d / "report.json", d / "report.csv"


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# matching and AP
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    tp: np.ndarray          # per detection, sorted by descending score
    scores: np.ndarray
    n_gt: int
    velocity_errors: List[float]


def match_class(dets: Sequence[Tuple[int, Detection]], gts: Sequence[Tuple[int, BoxAnnotation]],
                threshold: float) -> MatchResult:
    """Greedy matching of (scene, detection) pairs to (scene, gt) pairs of one class.

    Detections are visited in descending score order; each takes the nearest
    still-unmatched GT in its scene if that GT lies strictly within ``threshold``.
    """
    order = sorted(range(len(dets)), key=lambda n: (-dets[n][1].score, n))
    by_scene: Dict[int, List[int]] = {}
    for g, (sid, _) in enumerate(gts):
        by_scene.setdefault(sid, []).append(g)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order))
    scores = np.zeros(len(order))
    verr: List[float] = []
    for rank, n in enumerate(order):
        sid, det = dets[n]
        scores[rank] = det.score
        best, best_d = -1, math.inf
        for g in by_scene.get(sid, ()):
            if taken[g]:
                continue
            gt = gts[g][1]
            d = math.hypot(det.box.x - gt.x, det.box.y - gt.y)
            if d < best_d:
                best, best_d = g, d
        if best >= 0 and best_d < threshold:
            taken[best] = True
            tp[rank] = 1.0
            gt = gts[best][1]
            verr.append(math.hypot(det.box.vx - gt.vx, det.box.vy - gt.vy))
    return MatchResult(tp, scores, len(gts), verr)


def average_precision(tp: np.ndarray, n_gt: int, interpolation: str = "area") -> float:
    """AP of a score-sorted TP/FP sequence. NaN when there is no ground truth."""
    if n_gt == 0:
        return math.nan
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # monotone precision envelope
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "area":
        r_prev = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - r_prev) * env))
    if interpolation == "11point":
        pts = []
        for r in np.linspace(0.0, 1.0, 11):
            ok = recall >= r - 1e-12
            pts.append(env[ok].max() if ok.any() else 0.0)
        return float(np.mean(pts))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def evaluate_detections(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[BoxAnnotation]],
    class_names: Sequence[str],
    thresholds: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
    interpolation: str = "area",
    dynamic: Optional[Sequence[bool]] = None,
    range_buckets: Sequence[Tuple[float, float]] = RANGE_BUCKETS,
) -> EvalReport:
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} scenes")
    if not ground_truth:
        raise ValueError("cannot evaluate an empty corpus")
    K = len(class_names)
    dynamic = tuple(dynamic) if dynamic is not None else (True,) * K
    ap, by_thr, vel = _ap_table(detections, ground_truth, K, thresholds, interpolation, dynamic, None)
    range_map = {}
    for lo, hi in range_buckets:
        bap, _, _ = _ap_table(detections, ground_truth, K, thresholds, interpolation, dynamic, (lo, hi))
        range_map[bucket_name(lo, hi)] = _nanmean(bap)
    names = tuple(class_names)
    return EvalReport(
        class_names=names,
        ap={names[k]: ap[k] for k in range(K)},
        mAP=_nanmean(ap),
        range_mAP=range_map,
        mAVE=float(np.mean(vel)) if vel else math.nan,
        n_scenes=len(ground_truth),
        n_gt=sum(len(g) for g in ground_truth),
        n_det=sum(len(d) for d in detections),
        thresholds=tuple(float(t) for t in thresholds),
        ap_by_threshold={f"{t:g}": {names[k]: by_thr[t][k] for k in range(K)} for t in thresholds},
    )


def _in_bucket(r: float, bucket) -> bool:
    return bucket is None or bucket[0] <= r < bucket[1]


def _ap_table(detections, ground_truth, K, thresholds, interpolation, dynamic, bucket):
    per_class_dets: List[List[Tuple[int, Detection]]] = [[] for _ in range(K)]
    per_class_gts: List[List[Tuple[int, BoxAnnotation]]] = [[] for _ in range(K)]
    for sid, (dets, gts) in enumerate(zip(detections, ground_truth)):
        for d in dets:
            if _in_bucket(d.box.range, bucket):
                per_class_dets[d.class_id].append((sid, d))
        for g in gts:
            if _in_bucket(g.range, bucket):
                per_class_gts[g.class_id].append((sid, g))
    by_thr = {t: [] for t in thresholds}
    vel: List[float] = []
    ap = []
    for k in range(K):
        vals = []
        for t in thresholds:
            m = match_class(per_class_dets[k], per_class_gts[k], t)
            a = average_precision(m.tp, m.n_gt, interpolation)
            by_thr[t].append(a)
            vals.append(a)
            if dynamic[k] and math.isclose(t, VELOCITY_THRESHOLD):
                vel.extend(m.velocity_errors)
        ap.append(math.nan if any(math.isnan(v) for v in vals) else float(np.mean(vals)))
    return ap, by_thr, vel


def _nanmean(vals) -> float:
    v = [x for x in vals if not math.isnan(x)]
    return float(np.mean(v)) if v else math.nan


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

def predict(model: DetectorModel, camera: np.ndarray, points: np.ndarray, grid, score_thresh: float = 0.1,
            max_dets: int = 60, batch_size: int = 8) -> List[List[Detection]]:
    out: List[List[Detection]] = []
    for s in range(0, camera.shape[0], batch_size):
        _, head = model.forward(camera[s:s + batch_size], points[s:s + batch_size])
        for cls, reg in zip(head.cls.data, head.reg.data):
            out.append(decode(cls, reg, grid, score_thresh, max_dets))
    return out


def evaluate(model: DetectorModel, corpus, config) -> EvalReport:
    """Evaluate on a :class:`~bevdistill.train.PreparedCorpus` using the model's own point stream."""
    if len(corpus) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    ev = config.eval
    dets = predict(model, corpus.camera, corpus.points(model.modality), config.grid_spec, ev.score_thresh,
                   ev.max_dets)
    return evaluate_detections(dets, [s.annotations for s in corpus.scenes], config.classes.names,
                               ev.thresholds, ev.interpolation, config.classes.dynamic)
