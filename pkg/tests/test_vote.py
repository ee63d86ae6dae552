import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drspaam.detector import PointPredictions
from drspaam.nn import sigmoid
from drspaam.scan_data import LidarConfig, Scan
from drspaam.sim import SceneDistribution, random_scene, render_sequence
from drspaam.vote import (Detection, VoteParams, Votes, aggregate, cast_votes, detect,
                          detections_from_jsonl, detections_to_jsonl, local_to_sensor,
                          sensor_to_local)

CFG = LidarConfig(181, math.radians(180), 20.0)


def votes(points, weights=None):
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    w = np.full(len(points), 0.8) if weights is None else np.asarray(weights, dtype=float)
    return Votes(points, w, np.arange(len(points)))


def test_params_validation():
    with pytest.raises(ValueError):
        VoteParams(grid_bin=0)
    with pytest.raises(ValueError):
        VoteParams(grid_bin=0.07, grid_extent=1.0)
    with pytest.raises(ValueError):
        VoteParams(nms_radius=-1)
    assert VoteParams().bins_per_axis == 240


def test_no_confident_points_no_votes():
    preds = PointPredictions(np.full(CFG.num_points, -1e9), np.zeros((CFG.num_points, 2)))
    scan = Scan(np.full(CFG.num_points, 3.0), 0.0, 0)
    assert len(cast_votes(preds, scan, CFG, VoteParams())) == 0
    assert detect(preds, scan, CFG) == []


def test_radial_offset_straight_ahead():
    logits = np.full(CFG.num_points, -50.0)
    logits[90] = 5.0
    offsets = np.zeros((CFG.num_points, 2))
    offsets[90] = (0.5, 0.0)
    scan = Scan(np.full(CFG.num_points, 2.0), 0.0, 0)
    v = cast_votes(PointPredictions(logits, offsets), scan, CFG, VoteParams())
    assert len(v) == 1
    np.testing.assert_allclose(v.positions[0], [2.5, 0.0], atol=1e-12)
    assert v.weights[0] == pytest.approx(sigmoid(np.array(5.0)))


def test_local_frame_round_trip():
    rng = np.random.default_rng(0)
    off = rng.normal(size=(20, 2))
    ang = rng.uniform(-3, 3, 20)
    np.testing.assert_allclose(sensor_to_local(local_to_sensor(off, ang), ang), off)
    # tangential axis is 90 degrees counterclockwise from the beam
    np.testing.assert_allclose(local_to_sensor(np.array([[0.0, 1.0]]), np.array([0.0])),
                               [[0.0, 1.0]], atol=1e-15)


def test_rotation_by_one_beam_rotates_votes():
    spec = random_scene(SceneDistribution(duration=0.1), 4)
    scan = render_sequence(spec, CFG).scans[0]
    rng = np.random.default_rng(1)
    logits = rng.normal(size=CFG.num_points)
    offsets = rng.normal(0, 0.3, size=(CFG.num_points, 2))
    params = VoteParams(min_confidence=0.0)
    base = cast_votes(PointPredictions(logits, offsets), scan, CFG, params)
    r2 = np.roll(scan.ranges, 1)
    l2, o2 = np.roll(logits, 1), np.roll(offsets, 1, axis=0)
    turned = cast_votes(PointPredictions(l2, o2), Scan(r2, 0.0, 0), CFG, params)
    inc = CFG.angle_increment
    rot = np.array([[math.cos(inc), -math.sin(inc)], [math.sin(inc), math.cos(inc)]])
    # beam n of the original lands on beam n+1; the last beam wraps and is skipped
    np.testing.assert_allclose(turned.positions[1:], base.positions[:-1] @ rot.T, atol=1e-6)


def test_one_vote_one_detection():
    dets = aggregate(votes([[1.23, -0.47]], [0.6]), VoteParams())
    assert len(dets) == 1
    assert dets[0].position == pytest.approx((1.23, -0.47))
    assert dets[0].confidence == pytest.approx(0.6)


def test_two_clusters_two_detections():
    rng = np.random.default_rng(2)
    pts = np.vstack([rng.normal([1, 1], 0.02, (10, 2)), rng.normal([6, 1], 0.02, (10, 2))])
    dets = aggregate(votes(pts), VoteParams())
    assert len(dets) == 2
    xs = sorted(d.position[0] for d in dets)
    assert xs == pytest.approx([1, 6], abs=0.05)


def test_votes_outside_extent_dropped():
    assert aggregate(votes([[20.0, 0.0]]), VoteParams()) == []


def test_equal_bins_do_not_duplicate():
    # two equal-mass neighbouring bins yield a single detection
    dets = aggregate(votes([[0.05, 0.05], [0.15, 0.05]]), VoteParams())
    assert len(dets) == 1


clusters = st.lists(st.tuples(st.floats(-8, 8), st.floats(-8, 8)), min_size=1, max_size=4)


def _cluster_votes(centers, seed):
    rng = np.random.default_rng(seed)
    pts, w = [], []
    for c in centers:
        k = int(rng.integers(1, 8))
        pts.append(rng.normal(c, 0.01, (k, 2)))
        w.append(rng.uniform(0.3, 1.0, k))
    return np.vstack(pts), np.concatenate(w)


def _separated(centers, gap=1.5):
    return all(math.dist(a, b) > gap for i, a in enumerate(centers) for b in centers[:i])


@settings(max_examples=60, deadline=None)
@given(clusters, st.integers(0, 1000))
def test_translation_equivariance(centers, seed):
    if not _separated(centers):
        return
    pts, w = _cluster_votes(centers, seed)
    p = VoteParams()
    a = aggregate(votes(pts, w), p)
    b = aggregate(votes(pts + [0.35, -0.2], w), p)
    assert len(a) == len(b) == len(centers)
    pa = sorted(d.position for d in a)
    pb = sorted((d.position[0] - 0.35, d.position[1] + 0.2) for d in b)
    for u, v in zip(pa, pb):
        assert math.dist(u, v) <= p.grid_bin


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 60))
def test_aggregate_invariants(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, (n, 2))
    w = rng.uniform(0.01, 1.0, n)
    v = Votes(pts, w, np.arange(n))
    dets = aggregate(v, VoteParams())
    assert len(dets) <= n
    assert (n == 0) == (len(dets) == 0)
    for d in dets:
        assert 0 < d.confidence <= 1
        assert d.confidence == np.mean(w[list(d.supporting_points)]) or \
            d.confidence == pytest.approx(np.mean(w[list(d.supporting_points)]), abs=1e-15)
    confs = [d.confidence for d in dets]
    assert confs == sorted(confs, reverse=True)
    perm = rng.permutation(n)
    assert aggregate(Votes(pts[perm], w[perm], perm), VoteParams()) == dets


def test_jsonl_round_trip():
    frames = [[Detection((1.0, 2.0), 0.9)], [], [Detection((-1.5, 0.25), 0.4),
                                                 Detection((3.0, 3.0), 0.35)]]
    text = detections_to_jsonl(frames)
    assert text.splitlines()[0] == '{"frame": 0, "x": 1.0, "y": 2.0, "conf": 0.9}'
    assert detections_from_jsonl(text, 3) == frames
