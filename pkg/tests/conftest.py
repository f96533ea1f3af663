import numpy as np
import pytest
import torch

from flowsplat.geometry import DTYPE, Camera, Intrinsics, Pose, look_at, se3_exp
from flowsplat.splat import Gaussians


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, rot_scale=0.6, trans_scale=1.0) -> Pose:
    v = np.concatenate([rng.normal(size=3) * trans_scale, rng.normal(size=3) * rot_scale])
    return se3_exp(torch.tensor(v, dtype=DTYPE))


def random_camera(rng, width=32, height=32, t=0.0) -> Camera:
    f = rng.uniform(25, 60)
    k = Intrinsics(f, f * rng.uniform(0.9, 1.1), rng.uniform(10, width - 10), rng.uniform(10, height - 10), width, height)
    return Camera(k, random_pose(rng), t)


def front_camera(width=32, height=32, f=40.0, eye=(0.0, 0.0, -3.0), t=0.0) -> Camera:
    k = Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)
    return Camera(k, look_at(eye, (0.0, 0.0, 0.0)), t)


def random_gaussians(rng, n, spread=1.0, depth=3.0, scale=(0.05, 0.3)):
    means = rng.normal(size=(n, 3)) * spread
    means[:, 2] = rng.uniform(-0.5, 0.5, size=n)
    q = rng.normal(size=(n, 4))
    return Gaussians(
        torch.tensor(means, dtype=DTYPE),
        torch.tensor(np.log(rng.uniform(*scale, size=(n, 3))), dtype=DTYPE),
        torch.tensor(q / np.linalg.norm(q, axis=1, keepdims=True), dtype=DTYPE),
        torch.tensor(rng.normal(size=n), dtype=DTYPE),
        torch.tensor(rng.normal(size=(n, 3)), dtype=DTYPE),
    )


# --------------------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
