"""Slow, independent reference implementations used by the tests."""

import math

import numpy as np

# mask-scaling parameters written out again here on purpose
R1, R2 = 20.0, 30.0
ALPHA, BETA = 0.25, 0.5
V1, V2 = 0.3, 0.8
CLIP_LO, CLIP_HI = 0.5, 4.0


def _step(value, lo, hi):
    if value >= hi:
        return BETA
    if value >= lo:
        return ALPHA
    return 0.0


def grown_size(box):
    """(w, l) after range/velocity expansion, from first principles."""
    rng = math.sqrt(box.x ** 2 + box.y ** 2)
    heading = np.array([math.cos(box.yaw), math.sin(box.yaw)])
    lateral = np.array([-math.sin(box.yaw), math.cos(box.yaw)])
    v = np.array([box.vx, box.vy])
    f_range = _step(rng, R1, R2)
    f_l = f_range + _step(abs(float(v @ heading)), V1, V2)
    f_w = f_range + _step(abs(float(v @ lateral)), V1, V2)

    def grow(extent, f):
        if f == 0.0:
            return extent
        return extent + min(CLIP_HI, max(CLIP_LO, f * extent))

    return grow(box.w, f_w), grow(box.l, f_l)


def point_in_box(px, py, cx, cy, w, l, yaw, eps=1e-9):
    dx, dy = px - cx, py - cy
    along = dx * math.cos(yaw) + dy * math.sin(yaw)
    across = -dx * math.sin(yaw) + dy * math.cos(yaw)
    return abs(along) <= l / 2 + eps and abs(across) <= w / 2 + eps


def brute_force_mask(boxes, grid, scaled=True):
    out = np.zeros((grid.H, grid.W))
    sizes = [grown_size(b) if scaled else (b.w, b.l) for b in boxes]
    for i in range(grid.H):
        py = grid.y_min + (i + 0.5) * grid.cell_size
        for j in range(grid.W):
            px = grid.x_min + (j + 0.5) * grid.cell_size
            for b, (w, l) in zip(boxes, sizes):
                if point_in_box(px, py, b.x, b.y, w, l, b.yaw):
                    out[i, j] = 1.0
                    break
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def csrd_double_loop(objectness, calibrated):
    h, w = objectness.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            acc += abs(objectness[i, j] - calibrated[i, j])
    return acc / (h * w)


def pairwise_cosine(f):
    c, h, w = f.shape
    vecs = [f[:, i, j] for i in range(h) for j in range(w)]
    n = len(vecs)
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            na, nb = np.linalg.norm(vecs[a]), np.linalg.norm(vecs[b])
            out[a, b] = float(vecs[a] @ vecs[b]) / (na * nb)
    return out


def qfl_closed_form(x, y, gamma=2.0):
    s = sigmoid(x)
    return -(abs(y - s) ** gamma) * ((1 - y) * math.log(1 - s) + y * math.log(s))


def ap_oracle(matched_flags, n_gt):
    """Area-under-envelope AP from a score-sorted TP/FP list, computed longhand."""
    tp = fp = 0
    pts = []
    for flag in matched_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        pts.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for idx, (r, _) in enumerate(pts):
        best_p = max(p for _, p in pts[idx:])
        ap += (r - prev_r) * best_p
        prev_r = r
    return ap
