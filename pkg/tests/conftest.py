import sys
from pathlib import Path

import numpy as np
import pytest

from conceptsplat.camera import orbit_camera
from conceptsplat.gaussians import GaussianCloud, logit

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent
SCENES = ROOT / "scenes"

# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def random_cloud(rng, n, k=2, spread=0.3, min_dz=1e-3, cam=None, max_opacity=0.9):
    """Random Gaussians around the origin.

    With ``cam`` given, camera depths are kept at least ``min_dz`` apart so the
    depth order cannot flip under a finite-difference step.
    """
    for _ in range(1000):
        mu = rng.uniform(-spread, spread, (n, 3))
        if cam is None or n < 2:
            break
        z = np.sort(cam.world_to_camera(mu)[:, 2])
        if np.diff(z).min() > min_dz:
            break
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        mu=mu,
        log_scale=rng.uniform(np.log(0.03), np.log(0.12), (n, 3)),
        rotation=q,
        opacity_logit=rng.uniform(logit(0.1), logit(max_opacity), n),
        sh=rng.uniform(-1.2, 1.2, (n, 3)),  # colors stay inside (0, 1)
        labels=rng.integers(0, k, n),
        k=k,
    )


def fd_camera(res=32):
    return orbit_camera(30.0, 20.0, 2.0, resolution=(res, res))


def fd_gradient_errors(cloud, cam, grad_color, analytic, h=1e-4, floor=1e-6):
    """Central differences of sum(grad_color * color) for every parameter entry.

    Returns a list of (group, index, analytic, numeric, rel_err) for entries whose
    analytic magnitude exceeds ``floor``.
    """
    from conceptsplat.render import render

    def loss():
        return float(np.sum(grad_color * render(cloud, cam).color))

    rows = []
    for name, arr in cloud.params().items():
        flat = arr.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            if abs(an[i]) <= floor:
                continue
            old = flat[i]
            flat[i] = old + h
            fp = loss()
            flat[i] = old - h
            fm = loss()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            rel = abs(fd - an[i]) / max(abs(an[i]), abs(fd))
            rows.append((name, i, an[i], fd, rel))
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
