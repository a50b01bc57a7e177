import math

import numpy as np
import pytest
from hypothesis import settings

from upscale.fields import generate_channelized, identify_continua, threshold_rule
from upscale.fine import quarter_five_spot, solve_darcy
from upscale.grid import build_grids

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def grids20():
    return build_grids(20, 4)


@pytest.fixture
def channel20(grids20):
    """20x20 channel field with two continua and its Darcy flux."""
    fg, cg = grids20
    kappa = generate_channelized(fg, seed=4, n_channels=2, background=1.0, channel=1e4, width=2)
    q = quarter_five_spot(fg, 0.3)
    _, flux = solve_darcy(fg, kappa, 1.0, q)
    part = identify_continua(kappa, cg, threshold_rule(1e3))
    return fg, cg, kappa, q, flux, part


def random_fine_field(rng, fg, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, (fg.ny, fg.nx))


INF = math.inf


def circulating_flux(fg, seed=0, amplitude=1.0):
    """Divergence-free face fluxes with a closed boundary, from a random nodal stream function."""
    from upscale.fine import FluxField

    rng = np.random.default_rng(seed)
    psi = np.zeros((fg.ny + 1, fg.nx + 1))
    psi[1:-1, 1:-1] = rng.uniform(-amplitude, amplitude, (fg.ny - 1, fg.nx - 1)) * fg.h
    fx = psi[1:, :] - psi[:-1, :]
    fy = -(psi[:, 1:] - psi[:, :-1])
    return FluxField(fg, fx, fy)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
