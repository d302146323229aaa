import math

import numpy as np
import pytest

from bevdistill.model import (
    ArchConfig,
    DetectorModel,
    HeadOutput,
    decode,
    detection_loss,
    focal_loss,
    gated_fuse,
    load_checkpoint,
    regression_targets,
    save_checkpoint,
)
from bevdistill.numerics import Tensor
from bevdistill.raster import gaussian_heatmap
from bevdistill.scene import BoxAnnotation, ClassSpec, GridSpec

GRID = GridSpec.centered(32, 1.5)
ARCH = ArchConfig(camera_channels=4, points_channels=6, fused_channels=8, decoder_channels=8, head_channels=6)


def test_forward_shapes(rng):
    m = DetectorModel.init(ARCH, "radar", seed=0)
    feats, out = m.forward(rng.normal(size=(2, 4, 32, 32)), rng.normal(size=(2, 4, 32, 32)))
    assert feats.camera.shape == (2, 4, 32, 32)
    assert feats.points.shape == (2, 6, 32, 32)
    assert feats.fused.shape == (2, 8, 32, 32)
    assert out.cls.shape == (2, 4, 32, 32) and out.reg.shape == (2, 8, 32, 32)
    # prior bias: initial class probability around 0.1
    assert abs(1 / (1 + math.exp(-m.params["head.cls.bias"].data[0])) - 0.1) < 1e-12


def test_gate_with_zero_parameters_halves_features(rng):
    f1, f2 = rng.normal(size=(3, 5, 5)), rng.normal(size=(2, 5, 5))
    params = {
        "gate.camera.weight": Tensor(np.zeros((3, 5, 1, 1))), "gate.camera.bias": Tensor(np.zeros(3)),
        "gate.points.weight": Tensor(np.zeros((2, 5, 1, 1))), "gate.points.bias": Tensor(np.zeros(2)),
    }
    g1, g2 = gated_fuse(f1, f2, params)
    np.testing.assert_allclose(g1.data, 0.5 * f1, atol=1e-15)
    np.testing.assert_allclose(g2.data, 0.5 * f2, atol=1e-15)


def test_ungated_model_has_no_gate_parameters():
    from dataclasses import replace
    m = DetectorModel.init(replace(ARCH, gated=False), "lidar", 0)
    assert not any(k.startswith("gate.") for k in m.params)


def test_init_is_seeded():
    a, b, c = (DetectorModel.init(ARCH, "lidar", s) for s in (3, 3, 4))
    assert a.digest() == b.digest() != c.digest()


def test_unknown_modality():
    with pytest.raises(ValueError, match="modality"):
        DetectorModel.init(ARCH, "sonar", 0)


def test_decode_recovers_targets_from_ideal_outputs():
    boxes = [BoxAnnotation(0, 3.1, -7.4, 1.9, 4.4, 0.7, 1.2, 0.8),
             BoxAnnotation(3, -12.0, 9.3, 0.5, 2.4, -2.0, 0.0, 0.0)]
    hm = gaussian_heatmap(boxes, GRID, ClassSpec.default())
    reg, _ = regression_targets(boxes, GRID)
    logits = np.log(np.clip(hm, 1e-6, 1 - 1e-6) / (1 - np.clip(hm, 1e-6, 1 - 1e-6)))
    dets = decode(logits, reg, GRID, score_thresh=0.5)
    assert len(dets) == 2
    for d in dets:
        gt = boxes[0] if d.class_id == 0 else boxes[1]
        for f in ("x", "y", "w", "l", "yaw", "vx", "vy"):
            assert getattr(d.box, f) == pytest.approx(getattr(gt, f), abs=1e-9)


def test_decode_suppresses_non_peaks_and_caps_count(rng):
    logits = rng.normal(size=(4, 32, 32))
    dets = decode(logits, np.zeros((8, 32, 32)), GRID, score_thresh=0.3, max_dets=7)
    assert len(dets) <= 7
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    with pytest.raises(ValueError):
        decode(logits, np.zeros((8, 32, 32)), GRID, score_thresh=1.5)


def test_focal_loss_prefers_correct_logits():
    hm = np.zeros((1, 4, 4))
    hm[0, 1, 2] = 1.0
    good = np.full((1, 4, 4), -6.0)
    good[0, 1, 2] = 6.0
    bad = -good
    assert focal_loss(Tensor(good), hm).item() < 0.01 < focal_loss(Tensor(bad), hm).item()


def test_detection_loss_zero_regression_error_at_targets():
    boxes = [BoxAnnotation(1, 2.0, 2.0, 0.7, 0.7, 0.3)]
    reg, mask = regression_targets(boxes, GRID)
    hm = gaussian_heatmap(boxes, GRID, ClassSpec.default())
    cls = Tensor(np.zeros((4, 32, 32)))
    full = detection_loss(HeadOutput(cls, Tensor(reg)), hm, reg, mask).item()
    assert full == pytest.approx(focal_loss(cls, hm).item(), abs=1e-15)


def test_checkpoint_round_trip(tmp_path):
    m = DetectorModel.init(ARCH, "radar", 5)
    save_checkpoint(m, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.digest() == m.digest() and back.arch == m.arch and back.modality == "radar"
