import dataclasses

import numpy as np
import pytest

from bevdistill.model import DetectorModel
from bevdistill.train import (
    Adam,
    IncompatibleModels,
    PreparedCorpus,
    TrainingDiverged,
    batch_indices,
    distill,
    train_model,
)
from bevdistill.numerics import Tensor

KD_OFF = {f"toggles.{k}": False for k in ("respd", "csrd", "msfd", "reld")}


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5, -4.0, 1e-3])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_batches_are_seeded_and_cover_each_epoch():
    a = batch_indices(10, 3, seed=5)
    b = batch_indices(10, 3, seed=5)
    first = [next(a) for _ in range(3)]
    assert all(np.array_equal(x, next(b)) for x in first)
    assert len(np.unique(np.concatenate(first))) == 9


def test_zero_steps_returns_init(tiny_train, tiny_config):
    m = DetectorModel.init(tiny_config.model, "lidar", 0)
    before = m.digest()
    res = train_model(tiny_train, tiny_config, "lidar", 0, model=m)
    assert res.model.digest() == before and res.curve == []


def test_training_is_deterministic(tiny_train, tiny_config):
    a = train_model(tiny_train, tiny_config, "radar", 4, seed=3)
    b = train_model(tiny_train, tiny_config, "radar", 4, seed=3)
    assert a.model.digest() == b.model.digest()
    assert a.curve == b.curve


def test_training_reduces_loss(tiny_train, tiny_config):
    res = train_model(tiny_train, tiny_config, "lidar", 150)
    first = np.mean([r["total"] for r in res.curve[:10]])
    last = np.mean([r["total"] for r in res.curve[-10:]])
    assert last < 0.85 * first


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(tiny_train, tiny_config):
    poisoned = dataclasses.replace(tiny_train, lidar=tiny_train.lidar.copy(), _masks={})
    poisoned.lidar[:, 0, 3, 3] = np.inf
    with pytest.raises((TrainingDiverged, FloatingPointError), match="step 0"):
        train_model(poisoned, tiny_config, "lidar", 5)


def test_kd_off_reproduces_baseline_curve(tiny_train, tiny_config):
    cfg = tiny_config.with_(**KD_OFF)
    teacher = DetectorModel.init(cfg.model, "lidar", 9).freeze()
    base = train_model(tiny_train, cfg, "radar", 5, model=DetectorModel.init(cfg.model, "radar", 1), batch_seed=4)
    kd = distill(teacher, DetectorModel.init(cfg.model, "radar", 1), tiny_train, cfg, 5, batch_seed=4)
    assert base.curve == kd.curve
    assert base.model.digest() == kd.model.digest()


def test_distill_leaves_teacher_untouched(tiny_train, tiny_config):
    teacher = DetectorModel.init(tiny_config.model, "lidar", 2).freeze()
    blobs = {k: v.data.tobytes() for k, v in teacher.params.items()}
    res = distill(teacher, DetectorModel.init(tiny_config.model, "radar", 0), tiny_train, tiny_config, 3)
    assert all(teacher.params[k].data.tobytes() == b for k, b in blobs.items())
    row = res.curve[-1]
    assert all(row[k] > 0 for k in ("csrd", "msfd", "reld", "cls", "reg", "det"))
    assert res.calib is not None


def test_distill_requires_frozen_teacher(tiny_train, tiny_config):
    with pytest.raises(ValueError, match="frozen"):
        distill(DetectorModel.init(tiny_config.model, "lidar", 0), DetectorModel.init(tiny_config.model, "radar", 0),
                tiny_train, tiny_config, 1)


def test_distill_rejects_incompatible_student(tiny_train, tiny_config):
    teacher = DetectorModel.init(tiny_config.model, "lidar", 0).freeze()
    wide = DetectorModel.init(dataclasses.replace(tiny_config.model, fused_channels=12), "radar", 0)
    with pytest.raises(IncompatibleModels, match="fused channels"):
        distill(teacher, wide, tiny_train, tiny_config, 1)


def test_calibration_parameters_only_with_csrd(tiny_train, tiny_config):
    teacher = DetectorModel.init(tiny_config.model, "lidar", 0).freeze()
    cfg = tiny_config.with_(**{"toggles.csrd": False})
    res = distill(teacher, DetectorModel.init(cfg.model, "radar", 0), tiny_train, cfg, 1)
    assert res.calib is None and res.curve[0]["csrd"] == 0.0


def test_prepared_corpus_rejects_wrong_grid(tiny_config):
    from bevdistill.scene import generate_scene, GridSpec
    s = generate_scene(0, GridSpec.centered(16, 3.0), tiny_config.class_spec)
    with pytest.raises(ValueError, match="does not match"):
        PreparedCorpus.build([s], tiny_config)
    with pytest.raises(ValueError, match="empty"):
        PreparedCorpus.build([], tiny_config)
