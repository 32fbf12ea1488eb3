import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rsvo import synth
from rsvo.epipolar import NominalState
from rsvo.geometry import CameraIntrinsics, InstantaneousMotion, UnitQuaternion

settings.register_profile("rsvo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rsvo")


@pytest.fixture(scope="session")
def K():
    return synth.SceneConfig().intrinsics


@pytest.fixture(scope="session")
def scene():
    return synth.build_scene(synth.SceneConfig(), 0)


def random_state(rng, w_scale=1.0, v_scale=20.0, unit=True) -> NominalState:
    q = UnitQuaternion.from_rotvec(rng.normal(0, 0.2, 3))
    t = rng.normal(size=3)
    if unit:
        t /= np.linalg.norm(t)
    return NominalState(q, t, InstantaneousMotion(rng.normal(0, w_scale, 3), rng.normal(0, v_scale, 3)),
                        InstantaneousMotion(rng.normal(0, w_scale, 3), rng.normal(0, v_scale, 3)))


def gs_pair(rng, K: CameraIntrinsics, n=200, R=None, t=None):
    """Noise-free global-shutter correspondences of random points in front of both cameras."""
    if R is None:
        R = UnitQuaternion.from_rotvec(rng.normal(0, 0.05, 3)).to_matrix()
    if t is None:
        t = rng.normal(size=3) * [1.0, 0.3, 0.3]
        t /= np.linalg.norm(t)
    X = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.uniform(4, 12, n)])
    Xc = X @ R.T + t
    keep = Xc[:, 2] > 0.5
    X, Xc = X[keep], Xc[keep]
    m1 = X @ K.K.T
    m2 = Xc @ K.K.T
    pts = np.column_stack([m1[:, :2] / m1[:, 2:], m2[:, :2] / m2[:, 2:]])
    return pts, R, t


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    def report(criterion: str, ok: bool, detail: str):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
