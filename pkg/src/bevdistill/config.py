"""Experiment configuration and its plain-text ``section.key = value`` format.

Lines starting with ``#`` are comments. Floats are written with ``repr`` so a
dump/parse round trip is bit-exact; tuples are comma-separated; booleans are
``true``/``false``. Unknown keys and unparseable values raise
:class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Tuple

from .losses import LossWeights, task_weights_for
from .model import ArchConfig
from .raster import MASK_VARIANTS, MaskScaleParams
from .scene import ClassSpec, GridSpec, SensorModel


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


_D = ClassSpec.default()


@dataclass(frozen=True)
class GridSection:
    size: int = 96
    cell_size: float = 0.6


@dataclass(frozen=True)
class ClassSection:
    names: Tuple[str, ...] = _D.names
    dynamic: Tuple[bool, ...] = _D.is_dynamic
    width_mean: Tuple[float, ...] = _D.width_mean
    width_std: Tuple[float, ...] = _D.width_std
    length_mean: Tuple[float, ...] = _D.length_mean
    length_std: Tuple[float, ...] = _D.length_std
    height: Tuple[float, ...] = _D.height
    rcs: Tuple[float, ...] = _D.rcs
    frequency: Tuple[float, ...] = _D.frequency


@dataclass(frozen=True)
class CorpusSection:
    n_obj_min: int = 4
    n_obj_max: int = 12
    n_train: int = 400
    n_eval: int = 100
    train_seed: int = 0
    eval_seed: int = 1_000_000


@dataclass(frozen=True)
class LossSection:
    lambda_csrd: float = 100.0
    lambda_msfd: float = 10.0
    lambda_reld: float = 0.25
    lambda_respd: float = 1.0
    lambda_det: float = 1.0
    respd_weights: str = "dynamic"
    dynamic_boost: float = 2.0
    pooling: str = "mean"
    csrd_source: str = "teacher"
    calibration: bool = True
    msfd_mask: str = "scaling"
    msfd_locations: Tuple[str, ...] = ("camera", "fused")
    msfd_gated: bool = True
    reld_scales: int = 4
    reld_input_pool: int = 2
    reld_adapt: bool = True
    reld_reduction: str = "mean"
    respd_mode: str = "objects"
    qfl_gamma: float = 2.0
    smooth_l1_delta: float = 1.0
    det_reg_weight: float = 0.25


@dataclass(frozen=True)
class OptimSection:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    teacher_steps: int = 600
    student_steps: int = 150
    distill_steps: int = 150
    from_scratch: bool = False
    schedule: str = "cosine"


@dataclass(frozen=True)
class ToggleSection:
    gated: bool = True
    respd: bool = True
    csrd: bool = True
    msfd: bool = True
    reld: bool = True


@dataclass(frozen=True)
class EvalSection:
    score_thresh: float = 0.1
    max_dets: int = 60
    thresholds: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    interpolation: str = "area"


@dataclass(frozen=True)
class SeedSection:
    model: int = 0
    batches: int = 0
    runs: Tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class DistillConfig:
    grid: GridSection = field(default_factory=GridSection)
    classes: ClassSection = field(default_factory=ClassSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    sensor: SensorModel = field(default_factory=SensorModel)
    model: ArchConfig = field(default_factory=ArchConfig)
    loss: LossSection = field(default_factory=LossSection)
    mask: MaskScaleParams = field(default_factory=MaskScaleParams)
    optim: OptimSection = field(default_factory=OptimSection)
    toggles: ToggleSection = field(default_factory=ToggleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedSection = field(default_factory=SeedSection)

    def __post_init__(self):
        k = len(self.classes.names)
        if self.model.num_classes != k:
            raise ConfigError("model.num_classes", f"{self.model.num_classes} != {k} class names")
        if self.loss.msfd_mask not in MASK_VARIANTS:
            raise ConfigError("loss.msfd_mask", f"expected one of {MASK_VARIANTS}")
        if self.loss.respd_weights not in ("vanilla", "static", "dynamic"):
            raise ConfigError("loss.respd_weights", "expected vanilla, static or dynamic")
        if self.loss.pooling not in ("mean", "max"):
            raise ConfigError("loss.pooling", "expected mean or max")
        if self.loss.csrd_source not in ("teacher", "gt"):
            raise ConfigError("loss.csrd_source", "expected teacher or gt")
        if self.loss.reld_reduction not in ("mean", "sum"):
            raise ConfigError("loss.reld_reduction", "expected mean or sum")
        bad = set(self.loss.msfd_locations) - {"camera", "fused"}
        if bad:
            raise ConfigError("loss.msfd_locations", f"unknown locations {sorted(bad)}")
        if self.loss.respd_mode not in ("objects", "dense"):
            raise ConfigError("loss.respd_mode", "expected objects or dense")
        if self.optim.schedule not in ("cosine", "constant"):
            raise ConfigError("optim.schedule", "expected cosine or constant")
        if self.eval.interpolation not in ("area", "11point"):
            raise ConfigError("eval.interpolation", "expected area or 11point")

    # -- derived objects ----------------------------------------------------
    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec.centered(self.grid.size, self.grid.cell_size)

    @property
    def class_spec(self) -> ClassSpec:
        c = self.classes
        return ClassSpec(c.names, c.dynamic, c.width_mean, c.width_std, c.length_mean, c.length_std,
                         c.height, c.rcs, c.frequency)

    @property
    def loss_weights(self) -> LossWeights:
        lo = self.loss
        return LossWeights(lo.lambda_csrd, lo.lambda_msfd, lo.lambda_reld, lo.lambda_respd, lo.lambda_det,
                           task_weights_for(self.classes.dynamic, lo.respd_weights, lo.dynamic_boost))

    @property
    def n_obj_range(self) -> Tuple[int, int]:
        return (self.corpus.n_obj_min, self.corpus.n_obj_max)

    def with_(self, **overrides: Any) -> "DistillConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.with_(**{"toggles.reld": False})``."""
        return apply_overrides(self, overrides)

    def dumps(self) -> str:
        return dumps(self)

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(key: str, text: str, typ) -> Any:
    text = text.strip()
    origin = typing.get_origin(typ)
    try:
        if origin in (tuple, Tuple):
            (inner, *_rest) = typing.get_args(typ)
            if not text:
                return ()
            return tuple(_parse(key, part, inner) for part in text.split(","))
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from exc
    raise ConfigError(key, f"unsupported field type {typ!r}")


def _section_types(cls) -> Dict[str, Any]:
    return typing.get_type_hints(cls)


def dumps(cfg: DistillConfig) -> str:
    lines = ["# bevdistill experiment configuration"]
    for sec in fields(cfg):
        obj = getattr(cfg, sec.name)
        lines.append("")
        for f in fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def _collect(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def apply_overrides(cfg: DistillConfig, overrides: Dict[str, Any]) -> DistillConfig:
    sections: Dict[str, Dict[str, Any]] = {}
    sec_types = {f.name: f for f in fields(DistillConfig)}
    for key, val in overrides.items():
        if "." not in key:
            raise ConfigError(key, "expected 'section.key'")
        sec, name = key.split(".", 1)
        if sec not in sec_types:
            raise ConfigError(key, f"unknown section {sec!r}")
        obj = getattr(cfg, sec)
        hints = _section_types(type(obj))
        if name not in hints:
            raise ConfigError(key, f"unknown key in section {sec!r}")
        if isinstance(val, str):
            val = _parse(key, val, hints[name])
        elif isinstance(val, list):
            val = tuple(val)
        sections.setdefault(sec, {})[name] = val
    kwargs = {}
    for sec, upd in sections.items():
        try:
            kwargs[sec] = dataclasses.replace(getattr(cfg, sec), **upd)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{sec}.{next(iter(upd))}", str(exc)) from exc
    return dataclasses.replace(cfg, **kwargs)


def loads(text: str) -> DistillConfig:
    return apply_overrides(DistillConfig(), _collect(text))


def load(path) -> DistillConfig:
    return loads(Path(path).read_text())


def save(cfg: DistillConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
