import numpy as np
import pytest

from bevdistill.config import DistillConfig
from bevdistill.scene import generate_corpus
from bevdistill.train import PreparedCorpus

TINY = {
    "grid.size": 32,
    "grid.cell_size": 1.5,
    "corpus.n_obj_min": 2,
    "corpus.n_obj_max": 5,
    "model.camera_channels": 4,
    "model.points_channels": 6,
    "model.fused_channels": 8,
    "model.decoder_channels": 8,
    "model.head_channels": 6,
    "optim.batch_size": 2,
}


@pytest.fixture(scope="session")
def tiny_config():
    return DistillConfig().with_(**TINY)


def _corpus(cfg, seeds):
    scenes = generate_corpus(seeds, cfg.grid_spec, cfg.class_spec, cfg.n_obj_range, cfg.sensor)
    return PreparedCorpus.build(scenes, cfg)


@pytest.fixture(scope="session")
def tiny_train(tiny_config):
    return _corpus(tiny_config, range(12))


@pytest.fixture(scope="session")
def tiny_eval(tiny_config):
    return _corpus(tiny_config, range(500, 506))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    number, title = mark.args
    ok = call.excinfo is None
    prev = _CRITERIA.get(number, (title, True, ""))
    detail = "" if ok else f" ({item.name}: {call.excinfo.typename})"
    if call.when == "call" or not ok:
        _CRITERIA[number] = (title, prev[1] and ok, prev[2] + detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}{detail}")
