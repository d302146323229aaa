import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevdistill.evaluate import RANGE_BUCKETS, average_precision, evaluate, evaluate_detections, match_class
from bevdistill.model import Detection
from bevdistill.scene import BoxAnnotation

from oracles import ap_oracle

NAMES = ("car", "pedestrian", "cyclist", "barrier")
DYN = (True, True, True, False)


def gt_box(cid, x, y, vx=0.0):
    return BoxAnnotation(cid, x, y, 1.0, 2.0, 0.0, vx, 0.0)


def det(box, score=0.9, dx=0.0):
    from dataclasses import replace
    return Detection(replace(box, x=box.x + dx), box.class_id, score)


SCENES = [
    [gt_box(0, 5, 5), gt_box(1, -10, 3), gt_box(2, 25, 1), gt_box(3, -3, -40)],
    [gt_box(0, 22, -8), gt_box(0, -6, -6), gt_box(1, 1, 2), gt_box(2, 2, 35), gt_box(3, 15, 15)],
]


def test_perfect_predictions_score_one():
    dets = [[det(b) for b in s] for s in SCENES]
    rep = evaluate_detections(dets, SCENES, NAMES, dynamic=DYN)
    assert all(v == 1.0 for v in rep.ap.values()) and rep.mAP == 1.0
    assert rep.mAVE == 0.0


def test_no_predictions_score_zero():
    rep = evaluate_detections([[] for _ in SCENES], SCENES, NAMES)
    assert all(v == 0.0 for v in rep.ap.values())


def test_half_matched_no_false_positives():
    gts = [[gt_box(0, 0, 0), gt_box(0, 10, 0)], [gt_box(0, -10, 5), gt_box(0, 5, -12)]]
    dets = [[det(gts[0][0])], [det(gts[1][1], 0.5)]]
    rep = evaluate_detections(dets, gts, ("car",))
    assert rep.ap["car"] == pytest.approx(0.5, abs=1e-12)
    assert rep.ap_by_threshold["0.5"]["car"] == pytest.approx(0.5)


def test_thresholds_are_strict_and_averaged():
    g = gt_box(0, 0, 0)
    # 1.5 m away: matched only at the 2 m and 4 m thresholds
    rep = evaluate_detections([[det(g, dx=1.5)]], [[g]], ("car",))
    assert rep.ap["car"] == pytest.approx(0.5)
    rep = evaluate_detections([[det(g, dx=2.0)]], [[g]], ("car",))
    assert rep.ap["car"] == pytest.approx(0.25)


def test_detection_matches_only_same_scene_and_class():
    g = gt_box(0, 0, 0)
    wrong_class = Detection(BoxAnnotation(1, 0, 0, 1, 2, 0), 1, 0.9)
    rep = evaluate_detections([[wrong_class], []], [[g], [gt_box(0, 0, 0)]], ("car", "pedestrian"))
    assert rep.ap["car"] == 0.0 and math.isnan(rep.ap["pedestrian"])


def test_ap_against_longhand_oracle(rng):
    for _ in range(30):
        flags = list(rng.random(12) < 0.6)
        n_gt = int(sum(flags) + rng.integers(0, 4)) or 1
        assert average_precision(np.array(flags, float), n_gt) == pytest.approx(ap_oracle(flags, n_gt), abs=1e-12)


def test_eleven_point_variant():
    assert average_precision(np.array([1.0]), 2, "11point") == pytest.approx(6 / 11)
    assert average_precision(np.array([1.0, 1.0]), 2, "11point") == 1.0


def test_velocity_error_on_matches():
    g = gt_box(0, 3, 3, vx=2.0)
    from dataclasses import replace
    d = Detection(replace(g, vx=1.0), 0, 0.8)
    rep = evaluate_detections([[d]], [[g]], ("car",))
    assert rep.mAVE == pytest.approx(1.0)


def test_range_buckets_partition_ground_truth():
    dets = [[det(b) for b in s] for s in SCENES]
    rep = evaluate_detections(dets, SCENES, NAMES)
    assert set(rep.range_mAP) == {"0-20m", "20-30m", "30-50m"}
    counts = [sum(lo <= b.range < hi for s in SCENES for b in s) for lo, hi in RANGE_BUCKETS]
    assert sum(counts) == sum(b.range < 50 for s in SCENES for b in s)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError, match="empty"):
        evaluate_detections([], [], NAMES)


@st.composite
def det_sets(draw):
    n_scenes = draw(st.integers(1, 3))
    scenes, dets = [], []
    for _ in range(n_scenes):
        gts = [gt_box(draw(st.integers(0, 1)), draw(st.floats(-20, 20)), draw(st.floats(-20, 20)))
               for _ in range(draw(st.integers(0, 4)))]
        ds = []
        for _ in range(draw(st.integers(0, 4))):
            b = gt_box(draw(st.integers(0, 1)), draw(st.floats(-20, 20)), draw(st.floats(-20, 20)))
            ds.append(Detection(b, b.class_id, draw(st.floats(0.05, 0.99))))
        scenes.append(gts)
        dets.append(ds)
    return scenes, dets


@settings(max_examples=80, deadline=None)
@given(det_sets(), st.floats(0.05, 0.99), st.integers(0, 10))
def test_adding_a_true_positive_never_lowers_ap(data, score, pick):
    scenes, dets = data
    base = evaluate_detections(dets, scenes, ("car", "pedestrian"))
    # a GT that no existing detection claims at any threshold
    for sid, gts in enumerate(scenes):
        for g in gts:
            claimed = any(d.class_id == g.class_id and math.hypot(d.box.x - g.x, d.box.y - g.y) < 4.0
                          for d in dets[sid])
            if claimed:
                continue
            more = [list(d) for d in dets]
            more[sid].append(Detection(g, g.class_id, score))
            after = evaluate_detections(more, scenes, ("car", "pedestrian"))
            for k, v in base.ap.items():
                if not math.isnan(v):
                    assert after.ap[k] >= v - 1e-12
            for t in base.ap_by_threshold:
                for k, v in base.ap_by_threshold[t].items():
                    if not math.isnan(v):
                        assert after.ap_by_threshold[t][k] >= v - 1e-12
            return


def test_match_is_greedy_by_score():
    g1, g2 = gt_box(0, 0, 0), gt_box(0, 1.0, 0)
    hi = Detection(BoxAnnotation(0, 0.9, 0, 1, 2, 0), 0, 0.9)
    lo = Detection(BoxAnnotation(0, 0.1, 0, 1, 2, 0), 0, 0.1)
    m = match_class([(0, lo), (0, hi)], [(0, g1), (0, g2)], 0.5)
    assert list(m.tp) == [1.0, 1.0]


def test_model_evaluation_runs(tiny_train, tiny_eval, tiny_config):
    from bevdistill.model import DetectorModel
    rep = evaluate(DetectorModel.init(tiny_config.model, "lidar", 0), tiny_eval, tiny_config)
    assert 0.0 <= rep.mAP <= 1.0 and rep.n_scenes == len(tiny_eval)
    js = rep.to_json()
    assert '"mAP"' in js
    assert rep.to_csv().startswith("metric,value\nmAP,")
