import csv
import json
import subprocess
import sys

import pytest

from bevdistill import config as cfgmod
from bevdistill.cli import MANIFEST, RunManifest, main
from bevdistill.config import DistillConfig
from bevdistill.model import load_checkpoint
from bevdistill.scene import load_corpus

from conftest import TINY


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = DistillConfig().with_(**TINY, **{"optim.teacher_steps": 4, "optim.student_steps": 3,
                                           "optim.distill_steps": 2, "seeds.runs": (0,)})
    cfgmod.save(cfg, root / "tiny.txt")
    return root


def run(workdir, *argv):
    return main([*argv[:1], "--config", str(workdir / "tiny.txt"), *argv[1:]])


def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def without_duration(files):
    files = dict(files)
    m = json.loads(files.pop(MANIFEST))
    m.pop("duration_s")
    return files, m


@pytest.fixture(scope="module")
def corpus(workdir):
    out = workdir / "corpus"
    assert run(workdir, "gen", "--n-scenes", "6", "--seed", "3", "--out", str(out)) == 0
    return out


@pytest.fixture(scope="module")
def teacher(workdir, corpus):
    out = workdir / "teacher"
    assert run(workdir, "train", "--role", "teacher", "--corpus", str(corpus), "--out", str(out)) == 0
    return out


@pytest.fixture(scope="module")
def student(workdir, corpus):
    out = workdir / "student"
    assert run(workdir, "train", "--role", "student-baseline", "--corpus", str(corpus), "--out", str(out)) == 0
    return out


def test_gen_writes_scenes_and_manifest(corpus):
    m = RunManifest.read(corpus)
    assert m.command == "gen" and m.seeds == [3, 4, 5, 6, 7, 8]
    assert len(load_corpus(corpus)) == 6
    assert len(list(corpus.glob(MANIFEST))) == 1
    assert not (corpus / ".bevd.lock").exists()


def test_gen_zero_scenes(workdir):
    out = workdir / "empty"
    assert run(workdir, "gen", "--n-scenes", "0", "--out", str(out)) == 0
    m = RunManifest.read(out)
    assert m.seeds == [] and load_corpus(out) == []


def test_rerun_overwrites_with_identical_bytes(workdir, corpus):
    again = workdir / "corpus2"
    assert run(workdir, "gen", "--n-scenes", "6", "--seed", "3", "--out", str(again)) == 0
    assert without_duration(tree_bytes(corpus)) == without_duration(tree_bytes(again))
    before = tree_bytes(again)
    assert run(workdir, "gen", "--n-scenes", "6", "--seed", "3", "--out", str(again)) == 0
    assert without_duration(tree_bytes(again)) == without_duration(before)


def test_train_outputs(teacher, student):
    m = RunManifest.read(teacher)
    assert m.details["modality"] == "lidar" and "loss_curve.csv" in m.outputs
    rows = list(csv.reader(open(teacher / "loss_curve.csv")))
    assert rows[0][:2] == ["step", "csrd"] and len(rows) == 5
    assert load_checkpoint(teacher / "model").modality == "lidar"
    assert load_checkpoint(student / "model").modality == "radar"


def test_train_is_reproducible(workdir, corpus, teacher):
    out = workdir / "teacher2"
    assert run(workdir, "train", "--role", "teacher", "--corpus", str(corpus), "--out", str(out)) == 0
    assert without_duration(tree_bytes(out)) == without_duration(tree_bytes(teacher))


def test_distill_and_eval(workdir, corpus, teacher, student):
    out = workdir / "distilled"
    blobs = tree_bytes(teacher / "model")
    code = run(workdir, "distill", "--teacher", str(teacher), "--student", str(student),
               "--corpus", str(corpus), "--out", str(out))
    assert code == 0
    assert tree_bytes(teacher / "model") == blobs
    rows = list(csv.DictReader(open(out / "loss_curve.csv")))
    assert len(rows) == 2 and float(rows[0]["msfd"]) > 0
    ev = workdir / "eval"
    assert run(workdir, "eval", "--model", str(out), "--corpus", str(corpus), "--out", str(ev)) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert 0.0 <= rep["mAP"] <= 1.0
    assert (ev / "report.csv").read_text().startswith("metric,value")


def test_unknown_key_exits_2_naming_it(workdir, corpus, capsys):
    code = run(workdir, "train", "--role", "teacher", "--corpus", str(corpus), "--out", str(workdir / "x"),
               "--set", "loss.lambda_foo=1")
    assert code == 2
    assert "loss.lambda_foo" in capsys.readouterr().err
    bad = workdir / "bad.txt"
    bad.write_text("optim.nonsense = 3\n")
    assert main(["gen", "--config", str(bad), "--n-scenes", "1", "--out", str(workdir / "y")]) == 2
    assert "optim.nonsense" in capsys.readouterr().err


def test_missing_corpus_fails(workdir, capsys):
    code = run(workdir, "train", "--role", "teacher", "--corpus", str(workdir / "nowhere"), "--out", str(workdir / "z"))
    assert code == 1
    assert "nowhere" in capsys.readouterr().err


def test_grid_mismatch_reports_both_grids(workdir, corpus, teacher, capsys):
    other = workdir / "big.txt"
    cfgmod.save(DistillConfig().with_(**{**TINY, "grid.size": 16, "grid.cell_size": 3.0}),
                other)
    small = workdir / "small_corpus"
    assert main(["gen", "--config", str(other), "--n-scenes", "2", "--out", str(small)]) == 0
    assert main(["train", "--config", str(other), "--role", "student-baseline", "--corpus", str(small),
                 "--steps", "1", "--out", str(workdir / "small_student")]) == 0
    capsys.readouterr()
    code = run(workdir, "distill", "--teacher", str(teacher), "--student", str(workdir / "small_student"),
               "--corpus", str(corpus), "--out", str(workdir / "w"))
    assert code == 2
    err = capsys.readouterr().err
    assert "(32, 32)" in err and "(16, 16)" in err


def test_usage_errors_exit_2(workdir):
    assert main(["train", "--role", "nope"]) == 2
    assert main(["gen", "--n-scenes", "-1", "--out", str(workdir / "neg")]) == 2


def test_ablate_main_rows(workdir, corpus):
    out = workdir / "ablate"
    code = run(workdir, "ablate", "--train-corpus", str(corpus), "--eval-corpus", str(corpus), "--main-only",
               "--out", str(out))
    assert code == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert [r["row"] for r in rows] == ["baseline", "+gated", "+respd", "+csrd", "+msfd", "+reld"]
    assert (out / "teacher" / "report.json").exists()


def test_gradcheck_seed_7(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bevdistill.cli", "gradcheck", "--seed", "7", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    m = RunManifest.read(tmp_path)
    assert m.details["failed"] == []
    assert {"op.conv2d", "loss.csrd", "loss.msfd", "loss.reld", "loss.qfl", "loss.smooth_l1", "loss.detection",
            "loss.total"} <= set(m.details["checked"])
    assert all(line.startswith("PASS") for line in (tmp_path / "gradcheck.txt").read_text().splitlines())
