import pytest

from drspaam.bench import bench
from drspaam.detector import Variant
from drspaam.sim import SceneSpec, render_sequence

from conftest import SMALL_CFG, SMALL_DIST, small_model


@pytest.fixture(scope="module")
def seq():
    from drspaam.sim import random_scene
    return render_sequence(random_scene(SMALL_DIST, 7), SMALL_CFG)


def test_report_keys_and_consistency(seq):
    rep = bench(small_model("drspaam"), seq, repetitions=3, warmup=2)
    assert set(rep) == {"variant", "frames", "cutout_ms", "net_ms", "vote_ms", "total_ms",
                        "fps", "threads"}
    assert rep["frames"] == 3 * (len(seq) - 2)
    assert rep["fps"] == pytest.approx(1000.0 / rep["total_ms"])
    parts = rep["cutout_ms"] + rep["net_ms"] + rep["vote_ms"]
    assert parts == pytest.approx(rep["total_ms"], rel=0.1)


def test_variant_override_and_threads(seq):
    rep = bench(small_model("drspaam"), seq, Variant("backT", 3), parallel=2)
    assert rep["variant"] == "backT3" and rep["threads"] == 2


def test_too_few_repetitions(seq):
    with pytest.raises(ValueError):
        bench(small_model(), seq, repetitions=2)


def test_sequence_shorter_than_warmup(seq):
    with pytest.raises(ValueError):
        bench(small_model(), seq, warmup=len(seq))
