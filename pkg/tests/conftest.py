import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.ndimage import gaussian_filter

from serireg.geometry import lattice_size, upsample_lattice

settings.register_profile("serireg", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("serireg")


def smooth_field(seed, dims=(64, 64), amplitude=3.0, spacing=32.0):
    """Random smooth backward field with max magnitude <= ``amplitude``."""
    nx, ny = dims
    g = np.random.default_rng(seed)
    nodes = g.uniform(-1, 1, (lattice_size(ny, spacing), lattice_size(nx, spacing), 2))
    u = upsample_lattice(nodes, dims, spacing).astype(np.float64)
    peak = np.hypot(u[..., 0], u[..., 1]).max()
    return (u * (amplitude / peak)).astype(np.float32)


def textured(seed, shape=(64, 64), sigma=2.0):
    g = np.random.default_rng(seed)
    img = gaussian_filter(g.standard_normal(shape), sigma)
    img = (img - img.min()) / (img.max() - img.min())
    return (0.1 + 0.8 * img).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed in the terminal summary so they land in saved logs
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, verdict, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{verdict} criterion {n}: {title}  {detail}".rstrip())
