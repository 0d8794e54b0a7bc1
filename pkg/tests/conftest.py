import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rayvote.geometry import CameraIntrinsics, CameraPose, CameraView, FeatureMap  # noqa: E402
from rayvote.tsdf import TsdfGrid  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_grid(rng, max_dim=8):
    dims = tuple(int(x) for x in rng.integers(1, max_dim + 1, 3))
    vs = float(rng.uniform(0.1, 0.3))
    tau = 3 * vs
    values = rng.uniform(-tau, tau, dims).astype(np.float32)
    # some saturated voxels so runs of equal values occur
    values[rng.random(dims) < 0.3] = np.float32(tau)
    origin = tuple(rng.uniform(-1, 1, 3))
    return TsdfGrid(values, origin, vs, tau)


def random_view(rng, grid, max_px=16, channels=3):
    w, h = (int(x) for x in rng.integers(1, max_px + 1, 2))
    f = float(rng.uniform(0.5, 1.5)) * max(w, h)
    k = CameraIntrinsics(f, f * rng.uniform(0.8, 1.2), rng.uniform(0, w), rng.uniform(0, h), w, h)
    lo, hi = grid.bounds
    center = (lo + hi) / 2
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    eye = center + direction * rng.uniform(0.5, 1.5) * np.linalg.norm(hi - lo)
    target = center + rng.normal(scale=0.1, size=3)
    up = rng.normal(size=3)
    pose = CameraPose.look_at(eye, target, up)
    fmap = FeatureMap(rng.normal(size=(h, w, channels)).astype(np.float32))
    return CameraView(k, pose, fmap)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
