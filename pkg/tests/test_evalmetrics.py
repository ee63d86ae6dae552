import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from drspaam.evalmetrics import EvaluationError, evaluate, match_frame, pr_curve_csv
from drspaam.scan_data import Annotation
from drspaam.vote import Detection


def det(x, y, c):
    return Detection((x, y), c)


def gt(x, y):
    return Annotation((x, y))


# -- brute-force oracle ---------------------------------------------------------

def oracle(frames, d):
    """Enumerate every distinct threshold, match naively per frame."""
    frames = [(ds, gs) for ds, gs in frames if gs is not None]
    num_gt = sum(len(g) for _, g in frames)
    confs = sorted({x.confidence for ds, _ in frames for x in ds}, reverse=True)
    points = []
    for tau in confs:
        tp = fp = 0
        for ds, gs in frames:
            kept = sorted([(x, i) for i, x in enumerate(ds) if x.confidence >= tau],
                          key=lambda p: (-p[0].confidence, p[1]))
            used = [False] * len(gs)
            for x, _ in kept:
                best, best_j = None, None
                for j, g in enumerate(gs):
                    dist = np.hypot(x.position[0] - g.center[0], x.position[1] - g.center[1])
                    if not used[j] and dist <= d and (best is None or dist < best):
                        best, best_j = dist, j
                if best_j is None:
                    fp += 1
                else:
                    used[best_j] = True
                    tp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    ap, prev_r, f1 = 0.0, 0.0, 0.0
    for r, p in points:
        ap += (r - prev_r) * p
        prev_r = r
        if p + r > 0:
            f1 = max(f1, 2 * p * r / (p + r))
    pts = [(r, p) for r, p in points if r > 0]
    eer = 0.0
    if pts:
        eer = None
        for i, (r, p) in enumerate(pts):
            if p <= r:
                if i > 0:
                    r0, p0 = pts[i - 1]
                    lam = (p0 - r0) / ((p0 - r0) - (p - r))
                    eer = r0 + lam * (r - r0)
                break
        if eer is None:
            r, p = min(pts, key=lambda rp: abs(rp[1] - rp[0]))
            eer = (p + r) / 2
    return ap, f1, eer


def random_instance(rng):
    frames = []
    for _ in range(rng.integers(1, 5)):
        ng = int(rng.integers(0, 6))
        gts = [gt(*rng.uniform(-3, 3, 2)) for _ in range(ng)]
        dets = []
        for _ in range(rng.integers(0, 9)):
            if gts and rng.random() < 0.6:
                base = gts[rng.integers(len(gts))].center
                pos = np.array(base) + rng.normal(0, 0.3, 2)
            else:
                pos = rng.uniform(-3, 3, 2)
            c = float(rng.choice(np.linspace(0.1, 1.0, 7))) if rng.random() < 0.5 \
                else float(rng.uniform(0.01, 1))
            dets.append(det(pos[0], pos[1], c))
        frames.append((dets, None if rng.random() < 0.1 else gts))
    if sum(len(g) for _, g in frames if g is not None) == 0:
        frames.append(([], [gt(0.0, 0.0)]))
    return frames


def test_oracle_equivalence_200_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        frames = random_instance(rng)
        d = float(rng.choice([0.3, 0.5]))
        res = evaluate(frames, d)
        ap, f1, eer = oracle(frames, d)
        assert abs(res.ap - ap) < 1e-9
        assert abs(res.peak_f1 - f1) < 1e-9
        assert abs(res.eer - eer) < 1e-9


def test_oracle_30_dets_20_gts():
    rng = np.random.default_rng(7)
    gts = [gt(*rng.uniform(-5, 5, 2)) for _ in range(20)]
    dets = [det(*(np.array(gts[i % 20].center) + rng.normal(0, 0.3, 2)), float(rng.random()))
            for i in range(30)]
    res = evaluate([(dets, gts)], 0.5)
    ap, f1, eer = oracle([(dets, gts)], 0.5)
    assert res.ap == pytest.approx(ap, abs=1e-9)
    assert res.peak_f1 == pytest.approx(f1, abs=1e-9)
    assert res.eer == pytest.approx(eer, abs=1e-9)


# -- examples -------------------------------------------------------------------

def test_match_frame_examples():
    tp, unmatched = match_frame([det(0.3, 0, 0.9)], [gt(0, 0)], 0.5)
    assert tp.tolist() == [True] and unmatched == 0
    # distance exactly d counts as a match
    tp, _ = match_frame([det(0.25, 0, 0.9)], [gt(0, 0)], 0.25)
    assert tp.tolist() == [True]
    tp, _ = match_frame([det(0.3, 0, 0.9)], [gt(0, 0)], 0.2)
    assert tp.tolist() == [False]
    tp, unmatched = match_frame([det(0.1, 0, 0.9), det(-0.1, 0, 0.5)], [gt(0, 0)], 0.5)
    assert tp.tolist() == [True, False] and unmatched == 0


def test_match_frame_distance_tie_goes_to_lower_gt_index():
    tp, _ = match_frame([det(0, 0, 0.9), det(0, -0.9, 0.8)], [gt(0, 0.4), gt(0, -0.4)], 0.5)
    assert tp.tolist() == [True, True]


def test_match_frame_bad_distance():
    with pytest.raises(ValueError):
        match_frame([], [gt(0, 0)], 0.0)


def test_perfect_detections():
    frames = [([det(1, 1, 0.9), det(2, 2, 0.8)], [gt(1, 1), gt(2, 2)]),
              ([det(0, 3, 0.7)], [gt(0, 3)])]
    res = evaluate(frames, 0.5)
    assert (res.ap, res.peak_f1, res.eer) == (1.0, 1.0, 1.0)


def test_zero_detections():
    res = evaluate([([], [gt(1, 1)])], 0.5)
    assert res.ap == 0 and res.peak_f1 == 0


def test_no_ground_truth_is_an_error():
    with pytest.raises(EvaluationError):
        evaluate([([det(0, 0, 0.5)], [])], 0.5)
    with pytest.raises(EvaluationError):
        evaluate([([det(0, 0, 0.5)], None)], 0.5)


def test_unannotated_frames_are_skipped():
    frames = [([det(1, 1, 0.9)], [gt(1, 1)]), ([det(5, 5, 0.99)], None)]
    assert evaluate(frames, 0.5).ap == 1.0


def test_curve_csv():
    res = evaluate([([det(1, 1, 0.9), det(3, 3, 0.4)], [gt(1, 1)])], 0.5)
    lines = pr_curve_csv(res).splitlines()
    assert lines[0] == "recall,precision,threshold"
    assert len(lines) == 3


# -- properties -----------------------------------------------------------------

def _frames_from_seed(seed):
    return random_instance(np.random.default_rng(seed))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_only_dependence(seed):
    frames = _frames_from_seed(seed)
    base = evaluate(frames, 0.5)
    warped = [([Detection(x.position, x.confidence ** 3 * 0.5) for x in ds], gs)
              for ds, gs in frames]
    assert evaluate(warped, 0.5).ap == pytest.approx(base.ap, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_duplicate_at_matched_gt_cannot_raise_ap(seed, conf):
    frames = _frames_from_seed(seed)
    base = evaluate(frames, 0.5)
    k = next((i for i, (_, g) in enumerate(frames) if g), None)
    g = frames[k][1][0]
    # the duplicate must not be able to claim a different ground truth
    assume(all(np.hypot(o.center[0] - g.center[0], o.center[1] - g.center[1]) > 0.5
               for o in frames[k][1][1:]))
    extra = [det(g.center[0], g.center[1], 1.0)]
    frames_a = list(frames)
    frames_a[k] = (list(frames[k][0]) + extra, frames[k][1])
    with_one = evaluate(frames_a, 0.5)
    frames_b = list(frames_a)
    frames_b[k] = (list(frames_a[k][0]) + [det(g.center[0], g.center[1], conf)], frames[k][1])
    assert evaluate(frames_b, 0.5).ap <= with_one.ap + 1e-12
    assert base.ap >= 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_curve_well_formed(seed):
    res = evaluate(_frames_from_seed(seed), 0.5)
    for v in (res.ap, res.peak_f1, res.eer):
        assert 0 <= v <= 1
    if len(res.pr_curve):
        r, p, t = res.pr_curve.T
        assert np.all(np.diff(r) >= 0)
        assert np.all(np.diff(t) < 0)
        f1 = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0)
        assert np.isclose(f1, res.peak_f1).any()
        lo = min(r[r > 0].min(initial=1), p[r > 0].min(initial=1))
        hi = max(r.max(), p.max())
        assert res.eer == 0 or lo - 1e-12 <= res.eer <= hi + 1e-12
