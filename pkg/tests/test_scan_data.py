import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from drspaam.scan_data import (Annotation, LidarConfig, ParseError, Scan, ScanSequence,
                               ValidationError, endpoints, load_sequence, sanitize_scan,
                               save_sequence, subsample_temporal)

CFG = LidarConfig(450, math.radians(225), 30.0)


def make_seq(n_scans=5, cfg=CFG, seed=0, annotate=True):
    rng = np.random.default_rng(seed)
    scans = [Scan(rng.uniform(0.1, cfg.max_range, cfg.num_points), 0.1 * k, k)
             for k in range(n_scans)]
    anns = [(Annotation(tuple(rng.uniform(-3, 3, 2))),) if annotate and k % 2 == 0 else None
            for k in range(n_scans)]
    return ScanSequence(cfg, scans, anns)


def test_config_angles():
    cfg = LidarConfig(5, math.pi, 10.0)
    np.testing.assert_allclose(cfg.beam_angles(), [-math.pi / 2, -math.pi / 4, 0, math.pi / 4,
                                                   math.pi / 2])


@pytest.mark.parametrize("args", [(1, 1.0, 1.0), (10, 0.0, 1.0), (10, 7.0, 1.0), (10, 1.0, 0.0)])
def test_config_invariants(args):
    with pytest.raises(ValueError):
        LidarConfig(*args)


def test_sanitize_examples():
    cfg10 = LidarConfig(3, 1.0, 10.0)
    np.testing.assert_array_equal(sanitize_scan([1.0, math.inf, 2.0], cfg10), [1.0, 10.0, 2.0])
    np.testing.assert_array_equal(sanitize_scan([0.0], LidarConfig(2, 1.0, 5.0))[:1], [5.0])
    np.testing.assert_array_equal(sanitize_scan([3.2, 4.4], LidarConfig(2, 1.0, 10.0)), [3.2, 4.4])
    out = sanitize_scan([math.nan, -1.0, 11.0, 10.0], LidarConfig(4, 1.0, 10.0))
    np.testing.assert_array_equal(out, [10.0, 10.0, 10.0, 10.0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(allow_nan=True, allow_infinity=True,
                                                 width=64)))
def test_sanitize_idempotent_and_in_range(raw):
    cfg = LidarConfig(16, 1.0, 8.0)
    once = sanitize_scan(raw, cfg)
    np.testing.assert_array_equal(sanitize_scan(once, cfg), once)
    assert np.all((once > 0) & (once <= cfg.max_range))


def test_subsample_examples():
    seq = make_seq(10)
    assert subsample_temporal(seq, 1) == seq
    assert [s.sequence_index for s in subsample_temporal(seq, 5).scans] == [0, 5]
    seven = make_seq(7)
    sub = subsample_temporal(seven, 3)
    assert [s.sequence_index for s in sub.scans] == [0, 3, 6]
    assert list(sub.annotations) == [seven.annotations[i] for i in (0, 3, 6)]


@given(st.integers(1, 30), st.integers(1, 8))
def test_subsample_length(n, stride):
    seq = make_seq(n, LidarConfig(4, 1.0, 5.0))
    assert len(subsample_temporal(seq, stride)) == math.ceil(n / stride)


def test_subsample_bad_stride():
    with pytest.raises(ValueError):
        subsample_temporal(make_seq(3), 0)


def test_validation_errors():
    cfg = LidarConfig(3, 1.0, 5.0)
    ok = np.ones(3)
    with pytest.raises(ValidationError):
        ScanSequence(cfg, [Scan(ok, 1.0, 0), Scan(ok, 1.0, 1)], [None, None])
    with pytest.raises(ValidationError):
        ScanSequence(cfg, [Scan(np.ones(4), 0.0, 0)], [None])
    with pytest.raises(ValidationError):
        ScanSequence(cfg, [Scan(np.array([1.0, 6.0, 1.0]), 0.0, 0)], [None])
    with pytest.raises(ValidationError):
        ScanSequence(cfg, [Scan(ok, 0.0, 0)], [(Annotation((7.0, 0.0)),)])


def test_round_trip(tmp_path):
    seq = make_seq(3)
    path = tmp_path / "s.jsonl"
    save_sequence(seq, path)
    back = load_sequence(path)
    assert back.config.num_points == 450 and len(back) == 3
    assert back == seq
    for a, b in zip(seq.scans, back.scans):
        np.testing.assert_array_equal(a.ranges, b.ranges)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(2, 40), st.integers(0, 10_000))
def test_round_trip_property(n, beams, seed):
    import tempfile, pathlib
    seq = make_seq(n, LidarConfig(beams, 2.0, 12.0), seed)
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "s.jsonl"
        save_sequence(seq, path)
        back = load_sequence(path)
    assert back.config == seq.config
    assert list(back.annotations) == list(seq.annotations)
    for a, b in zip(seq.scans, back.scans):
        assert np.max(np.abs(a.ranges - b.ranges)) <= 1e-7
        assert (a.timestamp, a.sequence_index) == (b.timestamp, b.sequence_index)


def test_native_errors(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    with pytest.raises(ValidationError):
        load_sequence(empty)
    bad = tmp_path / "b.jsonl"
    bad.write_text('{"num_points": 2, "fov": 1.0, "max_range": 5}\n{"t": 0, "seq": 0, "ranges": [1, 2]}\nnot json\n')
    with pytest.raises(ParseError, match="line 3"):
        load_sequence(bad)
    short = tmp_path / "s.jsonl"
    short.write_text('{"num_points": 3, "fov": 1.0, "max_range": 5}\n{"t": 0, "seq": 0, "ranges": [1, 2]}\n')
    with pytest.raises(ValidationError):
        load_sequence(short)
    back = tmp_path / "t.jsonl"
    back.write_text('{"num_points": 2, "fov": 1.0, "max_range": 5}\n'
                    '{"t": 1, "seq": 0, "ranges": [1, 2]}\n{"t": 0.5, "seq": 1, "ranges": [1, 2]}\n')
    with pytest.raises(ValidationError):
        load_sequence(back)


def test_drow_reader(tmp_path):
    csv = tmp_path / "run.csv"
    csv.write_text("10,0.0,1.0,2.0,inf,3.0\n11,0.1,1.0,2.0,2.5,3.0\n")
    (tmp_path / "run.wp").write_text("10,[[2.0,0.0]]\n")
    seq = load_sequence(csv, "drow", fov=math.radians(90), max_range=29.0)
    assert seq.config.num_points == 4 and len(seq) == 2
    assert seq.scans[0].ranges[2] == 29.0
    assert seq.annotations[0] == (Annotation((2.0, 0.0)),)
    assert seq.annotations[1] is None


def test_drow_reader_errors(tmp_path):
    csv = tmp_path / "run.csv"
    csv.write_text("10,0.0,1.0,2.0\n11,x,1.0,2.0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_sequence(csv, "drow", fov=1.0)
    with pytest.raises(ValueError):
        load_sequence(csv, "drow")


def test_endpoints():
    cfg = LidarConfig(3, math.pi, 10.0)
    pts = endpoints(np.array([1.0, 2.0, 3.0]), cfg)
    np.testing.assert_allclose(pts, [[0, -1], [2, 0], [0, 3]], atol=1e-12)
