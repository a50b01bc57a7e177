import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from upscale.fine import PowerFlux, laplacian, upwind_operator
from upscale.grid import oversample
from upscale.linear import artificial_diffusion
from upscale.local import (
    LocalProblem,
    NewtonError,
    SaddleFactor,
    solve_linear_constrained,
    solve_nonlinear_batch,
    solve_nonlinear_constrained,
)


def operators(flux, q):
    conv = (upwind_operator(flux, q) - sp.diags(np.maximum(q.ravel(), 0))).tocsr()
    diff = laplacian(flux.grid, artificial_diffusion(flux))
    return conv, diff


def dense_oracle(lp, coeff=None):
    """Dense solve of the local saddle system built from scratch."""
    cells = lp.cells
    fg = lp.partition.coarse.fine
    A = lp.convection.toarray()[np.ix_(cells, cells)]
    if coeff is not None:
        A = A * coeff
    A = A + lp.diffusion.toarray()[np.ix_(cells, cells)]
    dofs = lp.partition.dof_of_fine.ravel()[cells]
    cons = np.unique(dofs)
    P = (dofs[:, None] == cons[None, :]).astype(float)
    B = P.T * fg.cell_area / lp.partition.volumes[cons][:, None]
    k = len(cons)
    M = np.block([[A, P], [B, np.zeros((k, k))]])
    sol = np.linalg.solve(M, np.concatenate([np.zeros(len(cells)), lp.targets]))
    return sol[: len(cells)], sol[len(cells):]


@pytest.mark.parametrize("layers", [1, 2, math.inf])
def test_linear_solve_matches_dense_oracle(channel20, layers):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    region = oversample(cg, 5, layers)
    targets = np.random.default_rng(1).uniform(size=len(part.dofs_in_region(region)))
    lp = LocalProblem(region, part, targets, conv, diff)
    sol = solve_linear_constrained(lp)
    ref, mu = dense_oracle(lp)
    assert np.abs(sol.values - ref).max() <= 1e-10 * np.abs(ref).max()
    assert np.abs(sol.multipliers - mu).max() <= 1e-8 * max(np.abs(mu).max(), 1.0)
    assert sol.residual <= 1e-12


def test_constants_reproduced_on_global_region(channel20):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    region = oversample(cg, 0, math.inf)
    lp = LocalProblem(region, part, np.full(part.n_dofs, 0.7), conv, diff)
    sol = solve_linear_constrained(lp)
    assert np.abs(sol.values - 0.7).max() <= 1e-10
    assert np.abs(sol.multipliers).max() <= 1e-8


def test_multipliers_balance_the_residual(channel20):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    region = oversample(cg, 6, 1)
    dofs = part.dofs_in_region(region)
    lp = LocalProblem(region, part, np.linspace(0, 1, len(dofs)), conv, diff)
    sol = solve_linear_constrained(lp)
    Apsi = (lp.conv + lp.diff) @ sol.values
    for j, d in enumerate(dofs):
        inside = lp.constraint_of_cell == j
        assert math.isclose(
            sol.multipliers[j], -fg.cell_area * Apsi[inside].sum() / part.volumes[d], rel_tol=1e-8, abs_tol=1e-10
        )


@given(st.integers(0, 10**6), st.floats(-3, 3))
def test_local_solution_is_linear_in_targets(seed, alpha):
    from upscale.fields import generate_channelized, identify_continua, threshold_rule
    from upscale.fine import quarter_five_spot, solve_darcy
    from upscale.grid import build_grids

    fg, cg = build_grids(8, 2)
    kappa = generate_channelized(fg, 2, 2, 1.0, 1e4, 1)
    q = quarter_five_spot(fg, 0.3)
    _, flux = solve_darcy(fg, kappa, 1.0, q)
    part = identify_continua(kappa, cg, threshold_rule(1e3))
    conv, diff = operators(flux, q)
    region = oversample(cg, seed % cg.n_cells, 1)
    m = len(part.dofs_in_region(region))
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=m), rng.uniform(size=m)
    f = SaddleFactor(LocalProblem(region, part, a, conv, diff))
    lhs = f.solve(a + alpha * b).values
    rhs = f.solve(a).values + alpha * f.solve(b).values
    assert np.abs(lhs - rhs).max() <= 1e-9 * (1 + np.abs(lhs).max())


def picard_oracle(lp, beta, tol=1e-12, max_iter=500):
    """Fixed-point iteration on the frozen coefficient ``|N|^(β-1)``."""
    x = lp.targets[lp.constraint_of_cell]
    for _ in range(max_iter):
        new, _ = dense_oracle(lp, np.abs(x)[None, :] ** (beta - 1))
        if np.abs(new - x).max() < tol:
            return new
        x = new
    raise AssertionError("fixed-point oracle did not converge")


@pytest.mark.parametrize("layers", [1, math.inf])
def test_newton_matches_fixed_point_oracle(channel20, layers):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    region = oversample(cg, 9, layers)
    targets = np.random.default_rng(2).uniform(0.1, 0.9, len(part.dofs_in_region(region)))
    lp = LocalProblem(region, part, targets, conv, diff, PowerFlux(2.0))
    sol = solve_nonlinear_constrained(lp)
    ref = picard_oracle(lp, 2.0)
    assert np.abs(sol.values - ref).max() <= 1e-8
    assert sol.residual <= 1e-10
    assert sol.iterations >= 1


def test_beta_one_nonlinear_is_linear(channel20):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    region = oversample(cg, 3, 1)
    targets = np.linspace(0.2, 0.8, len(part.dofs_in_region(region)))
    lin = solve_linear_constrained(LocalProblem(region, part, targets, conv, diff))
    nl = solve_nonlinear_batch([LocalProblem(region, part, targets, conv, diff, PowerFlux(1.0))])[0]
    assert np.abs(lin.values - nl.values).max() <= 1e-12


def test_batch_equals_separate_solves(channel20):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    rng = np.random.default_rng(3)
    problems = []
    for i in (0, 7, 15):
        region = oversample(cg, i, 1)
        t = rng.uniform(0.1, 0.9, len(part.dofs_in_region(region)))
        problems.append(LocalProblem(region, part, t, conv, diff, PowerFlux(3.0)))
    batch = solve_nonlinear_batch(problems)
    for lp, sol in zip(problems, batch):
        alone = solve_nonlinear_constrained(lp)
        assert np.abs(alone.values - sol.values).max() <= 1e-9


def test_newton_failure_reports_history(channel20):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    region = oversample(cg, 0, math.inf)
    targets = np.random.default_rng(4).uniform(0.1, 0.9, part.n_dofs)
    lp = LocalProblem(region, part, targets, conv, diff, PowerFlux(3.0), newton_max_iter=1)
    with pytest.raises(NewtonError) as info:
        solve_nonlinear_constrained(lp)
    assert len(info.value.history) == 2


def test_with_targets_shares_operators(channel20):
    fg, cg, kappa, q, flux, part = channel20
    conv, diff = operators(flux, q)
    lp = LocalProblem(oversample(cg, 0, 1), part, np.zeros(0), conv, diff)
    _ = lp.conv, lp.means
    other = lp.with_targets(np.ones(lp.n_constraints))
    assert other.conv is lp.conv and other.means is lp.means
    assert np.allclose(other.initial_guess(), 1.0)
