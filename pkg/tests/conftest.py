import math

import pytest

from drspaam.cutout import CutoutParams
from drspaam.detector import BackboneSpec, Detector, SpaamParams, Variant
from drspaam.scan_data import LidarConfig
from drspaam.sim import SceneDistribution, random_scene, render_sequence

SMALL_CFG = LidarConfig(48, math.pi, 10.0)
SMALL_DIST = SceneDistribution(num_persons=1, room=(2.8, 3.0), room_center=(2.6, 0.0),
                               duration=1.0, leg_dropout_prob=0.0)


def small_model(variant="single", seed=0, **kw):
    return Detector(SMALL_CFG, Variant.parse(variant), CutoutParams(1.0, 0.5, 16),
                    BackboneSpec((4, 8), 3, 2, 8), SpaamParams(embed_dim=4, window_half=2),
                    seed=seed, **kw)


@pytest.fixture(scope="session")
def small_seqs():
    return [render_sequence(random_scene(SMALL_DIST, i), SMALL_CFG) for i in range(3)]


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance")
        for name in sorted(results):
            terminalreporter.write_line(results[name])
