"""Incremental toggle ablation and supplement variants over shared corpora and seeds.

Every row continues from the same pre-trained student (one per gating choice
and seed) and distils from one shared frozen teacher, so rows differ only in
the loss terms switched on.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import DistillConfig
from .evaluate import EvalReport, evaluate
from .model import DetectorModel
from .train import PreparedCorpus, TrainResult, distill, train_model

log = logging.getLogger(__name__)

KD_TOGGLES = ("respd", "csrd", "msfd", "reld")


@dataclass(frozen=True)
class AblationRow:
    name: str
    group: str
    overrides: Tuple[Tuple[str, Any], ...] = ()

    def apply(self, config: DistillConfig) -> DistillConfig:
        return config.with_(**dict(self.overrides))


def _toggles(gated: bool, *on: str) -> Tuple[Tuple[str, Any], ...]:
    return (("toggles.gated", gated),) + tuple((f"toggles.{k}", k in on) for k in KD_TOGGLES)


MAIN_ROWS: Tuple[AblationRow, ...] = (
    AblationRow("baseline", "main", _toggles(False)),
    AblationRow("+gated", "main", _toggles(True)),
    AblationRow("+respd", "main", _toggles(True, "respd")),
    AblationRow("+csrd", "main", _toggles(True, "respd", "csrd")),
    AblationRow("+msfd", "main", _toggles(True, "respd", "csrd", "msfd")),
    AblationRow("+reld", "main", _toggles(True, "respd", "csrd", "msfd", "reld")),
)

_FULL = _toggles(True, *KD_TOGGLES)

SUPPLEMENT_ROWS: Tuple[AblationRow, ...] = tuple(
    AblationRow(name, group, _FULL + ((key, value),))
    for name, group, key, value in (
        ("mask=dense", "mask", "loss.msfd_mask", "dense"),
        ("mask=gaussian", "mask", "loss.msfd_mask", "gaussian"),
        ("mask=scaling", "mask", "loss.msfd_mask", "scaling"),
        ("pooling=mean", "pooling", "loss.pooling", "mean"),
        ("pooling=max", "pooling", "loss.pooling", "max"),
        ("respd=vanilla", "respd_weights", "loss.respd_weights", "vanilla"),
        ("respd=static", "respd_weights", "loss.respd_weights", "static"),
        ("respd=dynamic", "respd_weights", "loss.respd_weights", "dynamic"),
        ("calibration=off", "calibration", "loss.calibration", False),
        ("calibration=on", "calibration", "loss.calibration", True),
        ("csrd_source=gt", "csrd_source", "loss.csrd_source", "gt"),
        ("csrd_source=teacher", "csrd_source", "loss.csrd_source", "teacher"),
    )
)


def ablation_rows(supplement: bool = True) -> List[AblationRow]:
    return list(MAIN_ROWS) + (list(SUPPLEMENT_ROWS) if supplement else [])


def student_arch(config: DistillConfig):
    return dataclasses.replace(config.model, gated=config.toggles.gated)


class Experiment:
    """Caches the teacher and pre-trained students shared by all rows of one study."""

    def __init__(self, config: DistillConfig, train: PreparedCorpus, evaluation: PreparedCorpus,
                 teacher: Optional[DetectorModel] = None):
        self.config = config
        self.train = train
        self.evaluation = evaluation
        self._teacher = teacher
        self._students: Dict[Tuple[bool, int], DetectorModel] = {}
        self.teacher_curve: List[Dict[str, float]] = []

    @property
    def teacher(self) -> DetectorModel:
        if self._teacher is None:
            c = self.config
            res = train_model(self.train, c, "lidar", c.optim.teacher_steps,
                              model=DetectorModel.init(c.model, "lidar", c.seeds.model), batch_seed=c.seeds.batches)
            self.teacher_curve = res.curve
            self._teacher = res.model.freeze()
        return self._teacher

    def initial_student(self, config: DistillConfig, seed: int) -> DetectorModel:
        """Pre-trained student for ``seed`` (or a fresh one when ``optim.from_scratch``)."""
        arch = student_arch(config)
        if config.optim.from_scratch:
            return DetectorModel.init(arch, "radar", seed)
        key = (arch.gated, seed)
        if key not in self._students:
            res = train_model(self.train, config, "radar", config.optim.student_steps,
                              model=DetectorModel.init(arch, "radar", seed), batch_seed=seed)
            self._students[key] = res.model
        return self._students[key].copy()

    def run(self, row_config: DistillConfig, seed: int) -> Tuple[TrainResult, EvalReport]:
        student = self.initial_student(row_config, seed)
        steps = row_config.optim.distill_steps
        if row_config.optim.from_scratch:
            steps += row_config.optim.student_steps
        teacher = self.teacher
        before = teacher.digest()
        res = distill(teacher, student, self.train, row_config, steps, batch_seed=seed + 1)
        if teacher.digest() != before:
            raise RuntimeError("teacher parameters changed during distillation")
        return res, evaluate(res.model, self.evaluation, row_config)


@dataclass
class AblationResult:
    row: AblationRow
    config_digest: str
    reports: Dict[int, EvalReport]
    train_digest: str
    eval_digest: str

    def mean(self, key: str) -> float:
        vals = [r.flat_row()[key] for r in self.reports.values()]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


@dataclass
class AblationTable:
    results: List[AblationResult]
    seeds: Tuple[int, ...]
    teacher_report: Optional[EvalReport] = None

    def names(self) -> List[str]:
        return [r.row.name for r in self.results]

    def __getitem__(self, name: str) -> AblationResult:
        for r in self.results:
            if r.row.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        if not self.results:
            return ""
        metric_keys = list(next(iter(self.results[0].reports.values())).flat_row())
        head = ["row", "group", "gated", *KD_TOGGLES, "overrides", "seeds", "mAP_per_seed", *metric_keys,
                "config_digest", "train_corpus", "eval_corpus"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        for res in self.results:
            ov = dict(res.row.overrides)
            extra = ";".join(f"{k}={v}" for k, v in res.row.overrides if not k.startswith("toggles."))
            w.writerow([
                res.row.name, res.row.group, ov.get("toggles.gated"), *[ov.get(f"toggles.{k}") for k in KD_TOGGLES],
                extra, ";".join(str(s) for s in self.seeds),
                ";".join(repr(res.reports[s].mAP) for s in self.seeds),
                *[repr(res.mean(k)) for k in metric_keys],
                res.config_digest[:16], res.train_digest[:16], res.eval_digest[:16],
            ])
        return buf.getvalue()

    def write(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_csv())
        return p


def run_ablation(
    config: DistillConfig,
    train: PreparedCorpus,
    evaluation: PreparedCorpus,
    rows: Optional[Sequence[AblationRow]] = None,
    seeds: Optional[Sequence[int]] = None,
    experiment: Optional[Experiment] = None,
    progress: Optional[Callable[[str, int, EvalReport], None]] = None,
) -> AblationTable:
    """One distillation + evaluation per (row, seed); rows with identical configs share results."""
    rows = list(rows) if rows is not None else ablation_rows()
    seeds = tuple(seeds) if seeds is not None else tuple(config.seeds.runs)
    if not seeds:
        raise ValueError("need at least one seed")
    exp = experiment or Experiment(config, train, evaluation)
    t_digest, e_digest = train.digest(), evaluation.digest()
    cache: Dict[Tuple[str, int], EvalReport] = {}
    results = []
    for row in rows:
        cfg = row.apply(config)
        digest = cfg.digest()
        reports = {}
        for s in seeds:
            if (digest, s) not in cache:
                _, cache[(digest, s)] = exp.run(cfg, s)
                log.info("row %s seed %d: mAP %.4f", row.name, s, cache[(digest, s)].mAP)
            reports[s] = cache[(digest, s)]
            if progress:
                progress(row.name, s, reports[s])
        results.append(AblationResult(row, digest, reports, t_digest, e_digest))
    teacher_report = evaluate(exp.teacher, evaluation, config)
    return AblationTable(results, seeds, teacher_report)
