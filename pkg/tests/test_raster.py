import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevdistill.raster import (
    MaskScaleParams,
    expansion_factors,
    feature_mask,
    gaussian_heatmap,
    rasterize_foreground,
    scale_box,
    scaled_mask,
)
from bevdistill.scene import BoxAnnotation, ClassSpec, GridSpec, sample_layout

from oracles import brute_force_mask, grown_size

GRID = GridSpec.centered(48, 1.2)
CLASSES = ClassSpec.default()
P = MaskScaleParams()


def box(x=0.0, y=0.0, w=2.0, l=4.0, yaw=0.0, vx=0.0, vy=0.0, cid=0):  # noqa: E741
    return BoxAnnotation(cid, x, y, w, l, yaw, vx, vy)


@pytest.mark.parametrize("rng_m,expect", [(5.0, 0.0), (19.99, 0.0), (20.0, 0.25), (29.9, 0.25), (30.0, 0.5), (45.0, 0.5)])
def test_range_thresholds(rng_m, expect):
    fw, fl = expansion_factors(box(x=rng_m), P)
    assert fw == fl == expect


def test_velocity_is_projected_on_box_axes():
    # moving 1 m/s along its heading: only the length grows
    b = box(x=5.0, yaw=math.pi / 2, vx=0.0, vy=1.0)
    fw, fl = expansion_factors(b, P)
    assert (fw, fl) == (0.0, 0.5)
    g = scale_box(b, P)
    assert g.w == b.w and g.l == pytest.approx(b.l + 2.0)


def test_growth_is_clipped():
    small = scale_box(box(x=25.0, w=0.4, l=0.4), P)        # 0.25*0.4 = 0.1 -> 0.5
    assert small.w == pytest.approx(0.9)
    huge = scale_box(box(x=35.0, w=10.0, l=10.0, vx=0.0, vy=2.0), P)
    assert huge.w == pytest.approx(14.0)                   # 1.0*10 clipped at 4


def test_combine_max_variant():
    b = box(x=35.0, vx=2.0)
    assert expansion_factors(b, MaskScaleParams(combine="max")) == (0.5, 0.5)
    assert expansion_factors(b, P) == (0.5, 1.0)


def test_matches_brute_force_oracle():
    for seed in range(8):
        boxes, _ = sample_layout(seed, GRID, CLASSES, (4, 12))
        assert np.array_equal(scaled_mask(boxes, GRID, P), brute_force_mask(boxes, GRID))
        assert np.array_equal(rasterize_foreground(boxes, GRID), brute_force_mask(boxes, GRID, scaled=False))


@settings(max_examples=60, deadline=None)
@given(st.floats(-25, 25), st.floats(-25, 25), st.floats(0.3, 5), st.floats(0.3, 6), st.floats(-3.2, 3.2),
       st.floats(-3, 3), st.floats(-3, 3))
def test_expansion_agrees_with_oracle_and_never_shrinks(x, y, w, l, yaw, vx, vy):  # noqa: E741
    b = box(x, y, w, l, yaw, vx, vy)
    g = scale_box(b, P)
    ow, ol = grown_size(b)
    assert g.w == pytest.approx(ow, abs=1e-12) and g.l == pytest.approx(ol, abs=1e-12)
    assert g.w >= b.w and g.l >= b.l
    assert np.all(scaled_mask([b], GRID, P) >= rasterize_foreground([b], GRID))


def test_heatmap_peaks_at_centres():
    boxes = [box(x=3.0, y=-4.0, cid=0), box(x=-10.0, y=7.0, w=0.7, l=0.7, cid=1)]
    hm = gaussian_heatmap(boxes, GRID, CLASSES)
    assert hm.shape == (4, 48, 48)
    for b in boxes:
        i, j = GRID.cell_of(b.x, b.y)
        assert hm[b.class_id, i, j] == 1.0
    assert hm[2:].max() == 0.0
    assert np.all((hm >= 0) & (hm <= 1))


def test_feature_mask_variants():
    boxes, _ = sample_layout(1, GRID, CLASSES, (4, 8))
    dense = feature_mask("dense", boxes, GRID, CLASSES, P)
    gt = feature_mask("gt", boxes, GRID, CLASSES, P)
    scaled = feature_mask("scaling", boxes, GRID, CLASSES, P)
    gauss = feature_mask("gaussian", boxes, GRID, CLASSES, P)
    assert dense.min() == 1.0
    assert np.all(scaled >= gt)
    assert gauss.max() == 1.0
    with pytest.raises(ValueError, match="unknown mask variant"):
        feature_mask("blob", boxes, GRID, CLASSES, P)
