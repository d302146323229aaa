"""``bevd``: offline command-line front end.

Subcommands: gen, train, distill, eval, ablate, gradcheck. Every run writes a
``manifest.json`` into its output directory. Exit codes are 0 on success, 1 on
runtime failure and 2 on configuration or usage errors.

``BEVD_THREADS`` caps BLAS worker threads when set before the first numpy
import.
"""

from __future__ import annotations

import os

_threads = os.environ.get("BEVD_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import fcntl  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from contextlib import contextmanager  # noqa: E402
from dataclasses import asdict, dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Dict, List, Optional, Sequence  # noqa: E402

from . import config as cfgmod  # noqa: E402
from .config import ConfigError, DistillConfig  # noqa: E402

MANIFEST = "manifest.json"
LOCK = ".bevd.lock"


class UsageError(Exception):
    """Bad flags or incompatible inputs (exit 2)."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: List[int]
    corpus_hash: Optional[str]
    outputs: List[str]
    duration_s: float = 0.0
    details: Dict[str, object] = field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        path = Path(directory) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, directory) -> "RunManifest":
        return cls(**json.loads((Path(directory) / MANIFEST).read_text()))


@contextmanager
def locked_output(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK
    with open(lock_path, "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            raise UsageError(f"output directory {directory} is in use by another run") from exc
        try:
            yield directory
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
    lock_path.unlink(missing_ok=True)


def _load_config(path: Optional[str], overrides: Sequence[str] = ()) -> DistillConfig:
    cfg = cfgmod.load(path) if path else DistillConfig()
    if overrides:
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(item, "override must look like section.key=value")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        cfg = cfg.with_(**pairs)
    return cfg


def _write_config(cfg: DistillConfig, out: Path) -> str:
    cfgmod.save(cfg, out / "config.txt")
    return "config.txt"


def _write_curve(curve: List[Dict[str, float]], path: Path) -> None:
    from .train import CURVE_COLUMNS

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in CURVE_COLUMNS[1:]])


def _read_corpus(path: str):
    from .scene import load_corpus

    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"corpus directory {p} does not exist")
    scenes = load_corpus(p)
    if not scenes:
        raise FileNotFoundError(f"corpus directory {p} holds no scenes")
    return scenes


def _grid_of(scenes) -> tuple:
    return tuple(scenes[0].camera_bev.shape[-2:])


def _check_grid(cfg: DistillConfig, scenes, what: str) -> None:
    g = cfg.grid_spec
    if _grid_of(scenes) != (g.H, g.W):
        raise UsageError(f"{what} grid {_grid_of(scenes)} does not match config grid {(g.H, g.W)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> RunManifest:
    from .scene import generate_scene, save_scene
    from .train import corpus_digest

    cfg = _load_config(args.config, args.set)
    if args.n_scenes < 0:
        raise UsageError("--n-scenes must be non-negative")
    out = Path(args.out)
    for old in out.glob("scene_*"):
        old.unlink()
    scenes = []
    for s in range(args.seed, args.seed + args.n_scenes):
        scene = generate_scene(s, cfg.grid_spec, cfg.class_spec, cfg.n_obj_range, cfg.sensor)
        save_scene(scene, out)
        scenes.append(scene)
    outputs = sorted(p.name for p in out.glob("scene_*")) + [_write_config(cfg, out)]
    return RunManifest("gen", cfg.digest(), list(range(args.seed, args.seed + args.n_scenes)),
                       corpus_digest(scenes), outputs, details={"n_scenes": args.n_scenes})


def _save_model(model, out: Path, cfg: DistillConfig, role: str) -> List[str]:
    from .model import save_checkpoint

    g = cfg.grid_spec
    save_checkpoint(model, out / "model", extra={"role": role, "grid": [g.H, g.W, g.cell_size]})
    return ["model/model.json"] + sorted(f"model/{n}.bdt" for n in model.params)


def cmd_train(args) -> RunManifest:
    from .ablation import student_arch
    from .model import DetectorModel
    from .train import PreparedCorpus, train_model

    cfg = _load_config(args.config, args.set)
    scenes = _read_corpus(args.corpus)
    _check_grid(cfg, scenes, "corpus")
    corpus = PreparedCorpus.build(scenes, cfg)
    seed = cfg.seeds.model if args.seed is None else args.seed
    if args.role == "teacher":
        modality, arch, steps = "lidar", cfg.model, cfg.optim.teacher_steps
    else:
        modality, arch, steps = "radar", student_arch(cfg), cfg.optim.student_steps
    steps = steps if args.steps is None else args.steps
    model = DetectorModel.init(arch, modality, seed)
    res = train_model(corpus, cfg, modality, steps, model=model, batch_seed=seed)
    out = Path(args.out)
    outputs = _save_model(res.model, out, cfg, args.role)
    _write_curve(res.curve, out / "loss_curve.csv")
    outputs += ["loss_curve.csv", _write_config(cfg, out)]
    return RunManifest("train", cfg.digest(), [seed], corpus.digest(), outputs,
                       details={"role": args.role, "modality": modality, "steps": steps,
                                "final_loss": res.curve[-1]["total"] if res.curve else None})


def _load_model(path: str, cfg: DistillConfig, what: str):
    from .model import load_checkpoint

    p = Path(path)
    if (p / "model").is_dir():
        p = p / "model"
    if not (p / "model.json").exists() and not p.is_file():
        raise FileNotFoundError(f"{what} checkpoint {path} not found")
    model = load_checkpoint(p)
    meta = json.loads(((p / "model.json") if p.is_dir() else p).read_text())
    grid = tuple(meta.get("extra", {}).get("grid", ())[:2])
    return model, grid


def cmd_distill(args) -> RunManifest:
    from .model import save_checkpoint  # noqa: F401
    from .train import IncompatibleModels, PreparedCorpus, distill

    cfg = _load_config(args.config, args.set)
    teacher, t_grid = _load_model(args.teacher, cfg, "teacher")
    student, s_grid = _load_model(args.student, cfg, "student")
    if t_grid and s_grid and t_grid != s_grid:
        raise UsageError(f"teacher grid {t_grid} and student grid {s_grid} differ")
    if teacher.modality != "lidar" or student.modality != "radar":
        raise UsageError(f"expected a lidar teacher and radar student, got {teacher.modality}/{student.modality}")
    scenes = _read_corpus(args.corpus)
    _check_grid(cfg, scenes, "corpus")
    g = cfg.grid_spec
    for name, grid in (("teacher", t_grid), ("student", s_grid)):
        if grid and grid != (g.H, g.W):
            raise UsageError(f"{name} grid {grid} does not match corpus/config grid {(g.H, g.W)}")
    corpus = PreparedCorpus.build(scenes, cfg)
    teacher.freeze()
    before = {k: v.data.tobytes() for k, v in teacher.params.items()}
    steps = cfg.optim.distill_steps if args.steps is None else args.steps
    seed = cfg.seeds.batches if args.seed is None else args.seed
    try:
        res = distill(teacher, student, corpus, cfg, steps, batch_seed=seed)
    except IncompatibleModels as exc:
        raise UsageError(f"{exc} (teacher grid {t_grid}, student grid {s_grid})") from exc
    if any(v.data.tobytes() != before[k] for k, v in teacher.params.items()):
        raise RuntimeError("teacher parameters changed during distillation")
    out = Path(args.out)
    outputs = _save_model(res.model, out, cfg, "student-distilled")
    _write_curve(res.curve, out / "loss_curve.csv")
    outputs += ["loss_curve.csv", _write_config(cfg, out)]
    return RunManifest("distill", cfg.digest(), [seed], corpus.digest(), outputs,
                       details={"steps": steps, "teacher_digest": teacher.digest(),
                                "toggles": asdict(cfg.toggles)})


def cmd_eval(args) -> RunManifest:
    from .evaluate import evaluate
    from .train import PreparedCorpus

    cfg = _load_config(args.config, args.set)
    model, grid = _load_model(args.model, cfg, "model")
    scenes = _read_corpus(args.corpus)
    _check_grid(cfg, scenes, "corpus")
    g = cfg.grid_spec
    if grid and grid != (g.H, g.W):
        raise UsageError(f"model grid {grid} does not match corpus/config grid {(g.H, g.W)}")
    corpus = PreparedCorpus.build(scenes, cfg)
    report = evaluate(model, corpus, cfg)
    out = Path(args.out)
    report.write(out)
    print(f"mAP {report.mAP:.4f}  " + "  ".join(f"{k} {v:.4f}" for k, v in report.ap.items()))
    return RunManifest("eval", cfg.digest(), [], corpus.digest(), ["report.csv", "report.json"],
                       details={"mAP": report.mAP, "modality": model.modality})


def cmd_ablate(args) -> RunManifest:
    from .ablation import ablation_rows, run_ablation
    from .scene import generate_corpus
    from .train import PreparedCorpus

    cfg = _load_config(args.config, args.set)
    c = cfg.corpus
    if args.train_corpus:
        train_scenes = _read_corpus(args.train_corpus)
        _check_grid(cfg, train_scenes, "train corpus")
    else:
        train_scenes = generate_corpus(range(c.train_seed, c.train_seed + c.n_train), cfg.grid_spec,
                                       cfg.class_spec, cfg.n_obj_range, cfg.sensor)
    if args.eval_corpus:
        eval_scenes = _read_corpus(args.eval_corpus)
        _check_grid(cfg, eval_scenes, "eval corpus")
    else:
        eval_scenes = generate_corpus(range(c.eval_seed, c.eval_seed + c.n_eval), cfg.grid_spec,
                                      cfg.class_spec, cfg.n_obj_range, cfg.sensor)
    train, evaluation = PreparedCorpus.build(train_scenes, cfg), PreparedCorpus.build(eval_scenes, cfg)

    def progress(name, seed, rep):
        print(f"{name:22s} seed {seed}: mAP {rep.mAP:.4f}", flush=True)

    table = run_ablation(cfg, train, evaluation, rows=ablation_rows(not args.main_only), progress=progress)
    out = Path(args.out)
    table.write(out / "ablation.csv")
    table.teacher_report.write(out / "teacher")
    outputs = ["ablation.csv", "teacher/report.csv", "teacher/report.json", _write_config(cfg, out)]
    return RunManifest("ablate", cfg.digest(), list(table.seeds), train.digest(), outputs,
                       details={"eval_corpus_hash": evaluation.digest(), "rows": table.names(),
                                "teacher_mAP": table.teacher_report.mAP})


def cmd_gradcheck(args) -> RunManifest:
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed, fixtures=args.fixtures)
    failed = [r for r in results if not r.ok]
    lines = [f"{'PASS' if r.ok else 'FAIL'} {r.name:28s} fixtures={r.fixtures:3d} max_rel_err={r.max_rel_error:.3e}"
             for r in results]
    print("\n".join(lines))
    outputs = []
    if args.out:
        out = Path(args.out)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
        outputs.append("gradcheck.txt")
    manifest = RunManifest("gradcheck", "", [args.seed], None, outputs,
                           details={"checked": [r.name for r in results], "failed": [r.name for r in failed]})
    if failed:
        manifest.details["exit"] = 1
    return manifest


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevd", description="Cross-modality BEV distillation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True):
        sp.add_argument("--config", help="plain-text section.key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        if corpus:
            sp.add_argument("--corpus", required=True, help="scene corpus directory from 'bevd gen'")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen", help="render a synthetic scene corpus")
    common(g, corpus=False)
    g.add_argument("--n-scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0, help="seed of the first scene")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a teacher or a baseline student")
    common(t)
    t.add_argument("--role", choices=("teacher", "student-baseline"), required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", help="distil a frozen teacher into a student")
    common(d)
    d.add_argument("--teacher", required=True)
    d.add_argument("--student", required=True)
    d.add_argument("--steps", type=int)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--model", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the toggle ablation and supplement variants")
    common(a, corpus=False)
    a.add_argument("--train-corpus")
    a.add_argument("--eval-corpus")
    a.add_argument("--main-only", action="store_true", help="skip the supplement variants")
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--fixtures", type=int, default=20)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    start = time.perf_counter()
    out = Path(args.out) if getattr(args, "out", None) else None
    try:
        if out is not None:
            with locked_output(out):
                manifest = args.func(args)
                manifest.duration_s = round(time.perf_counter() - start, 3)
                manifest.write(out)
        else:
            manifest = args.func(args)
    except ConfigError as exc:
        print(f"bevd {args.command}: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"bevd {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"bevd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return int(manifest.details.get("exit", 0))


if __name__ == "__main__":
    sys.exit(main())
