import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import circulating_flux
from upscale.fields import generate_channelized
from upscale.fine import (
    CFLError,
    Corey,
    FluxField,
    PowerFlux,
    SolverError,
    max_stable_dt,
    quarter_five_spot,
    run_transport_fine,
    run_two_phase_fine,
    solve_darcy,
    step_schedule,
    step_transport_fine,
    upwind_operator,
)
from upscale.grid import build_grids


def dense_darcy(fg, coef, q):
    """Loop-built TPFA system solved densely with the zero-mean gauge."""
    n = fg.n_cells
    A = np.zeros((n, n))
    for iy in range(fg.ny):
        for ix in range(fg.nx):
            c = iy * fg.nx + ix
            for jy, jx in ((iy, ix + 1), (iy + 1, ix)):
                if jy < fg.ny and jx < fg.nx:
                    d = jy * fg.nx + jx
                    t = 2.0 / (1.0 / coef[iy, ix] + 1.0 / coef[jy, jx])
                    A[c, c] += t
                    A[d, d] += t
                    A[c, d] -= t
                    A[d, c] -= t
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = M[n, :n] = 1.0
    rhs = np.append(q.ravel() * fg.cell_area, 0.0)
    return np.linalg.solve(M, rhs)[:n].reshape(fg.ny, fg.nx)


def test_darcy_matches_dense_oracle():
    fg, _ = build_grids(12, 3)
    kappa = generate_channelized(fg, 2, 2, 1.0, 1e3, 2)
    q = quarter_five_spot(fg, 1.0)
    p, flux = solve_darcy(fg, kappa, 1.0, q)
    ref = dense_darcy(fg, kappa, q)
    assert np.abs(p - ref).max() <= 1e-10 * np.abs(ref).max()
    assert abs(p.mean()) < 1e-12 * np.abs(p).max()
    # cell balance: net outflow equals the source
    assert np.allclose(flux.divergence(), q * fg.cell_area, atol=1e-12)


@pytest.mark.parametrize("layered", [False, True])
def test_tpfa_reproduces_linear_pressure(layered):
    fg, _ = build_grids(16, 4)
    kappa = np.ones((16, 16))
    if layered:
        kappa *= 10.0 ** np.arange(16)[:, None] / 4.0
    p, flux = solve_darcy(fg, kappa, dirichlet={"left": 1.0, "right": 0.0})
    xc, _ = fg.cell_centers()
    assert np.abs(p - (1.0 - xc)).max() <= 1e-12
    assert np.abs(flux.fx - kappa[:, :1] * fg.h).max() <= 1e-12 * kappa.max()
    assert np.abs(flux.fy).max() <= 1e-12 * kappa.max()


def test_darcy_errors():
    fg, _ = build_grids(4, 2)
    q = np.zeros((4, 4))
    q[0, 0] = 1.0
    with pytest.raises(SolverError, match="incompatible"):
        solve_darcy(fg, np.ones((4, 4)), 1.0, q)
    with pytest.raises(SolverError):
        solve_darcy(fg, np.zeros((4, 4)))


def loop_upwind_rate(flux, S, lam, q):
    """``div(u λ(S))`` per area by explicit loops over faces."""
    fg = flux.grid
    out = np.zeros((fg.ny, fg.nx))
    for iy in range(fg.ny):
        for ix in range(fg.nx + 1):
            F = flux.fx[iy, ix]
            left, right = (iy, ix - 1), (iy, ix)
            donor = left if F > 0 else right
            val = 0.0 if not (0 <= donor[1] < fg.nx) else lam(S[donor])
            if ix > 0:
                out[left] += F * val
            if ix < fg.nx:
                out[right] -= F * val
    for iy in range(fg.ny + 1):
        for ix in range(fg.nx):
            F = flux.fy[iy, ix]
            lo, hi = (iy - 1, ix), (iy, ix)
            donor = lo if F > 0 else hi
            val = 0.0 if not (0 <= donor[0] < fg.ny) else lam(S[donor])
            if iy > 0:
                out[lo] += F * val
            if iy < fg.ny:
                out[hi] -= F * val
    out += np.maximum(-q, 0) * fg.cell_area * lam(S)
    return out / fg.cell_area


def test_upwind_matches_loop_oracle():
    fg, _ = build_grids(10, 2)
    kappa = generate_channelized(fg, 5, 2, 1.0, 50.0, 2)
    q = quarter_five_spot(fg, 1.0)
    _, flux = solve_darcy(fg, kappa, 1.0, q, dirichlet={"top": 0.3})
    S = np.random.default_rng(0).uniform(size=(10, 10))
    lam = PowerFlux(2.0)
    L = upwind_operator(flux, q)
    got = (L @ lam(S.ravel())).reshape(S.shape)
    ref = loop_upwind_rate(flux, S, lambda s: s**2, q)
    assert np.abs(got - ref).max() <= 1e-12 * np.abs(ref).max()


def test_upwind_row_sums_equal_injection():
    fg, _ = build_grids(20, 4)
    kappa = generate_channelized(fg, 1, 3, 1.0, 1e4, 2)
    q = quarter_five_spot(fg, 0.3)
    _, flux = solve_darcy(fg, kappa, 1.0, q)
    L = upwind_operator(flux, q)
    assert np.allclose(L @ np.ones(fg.n_cells), np.maximum(q.ravel(), 0), atol=1e-9 * np.abs(q).max())
    # column sums are the domain outflow: zero away from the producer
    cols = np.asarray(L.sum(axis=0)).ravel() * fg.cell_area
    assert np.allclose(np.delete(cols, fg.n_cells - 1), 0.0, atol=1e-12)
    assert np.isclose(cols[-1], 0.3)


@given(st.integers(0, 1000), st.sampled_from([1.0, 2.0, 3.0]))
def test_closed_flow_conserves_mass_and_bounds(seed, beta):
    fg, _ = build_grids(8, 2)
    flux = circulating_flux(fg, seed)
    lam = PowerFlux(beta)
    S = np.random.default_rng(seed).uniform(size=(8, 8))
    L = upwind_operator(flux)
    dt = max_stable_dt(L, lam.lipschitz())
    S1 = S
    for _ in range(5):
        S1 = step_transport_fine(flux, S1, lam, dt, L=L)
    assert abs(S1.sum() - S.sum()) <= 1e-12 * S.sum()
    assert S1.min() >= -1e-14 and S1.max() <= 1 + 1e-14


def test_cfl_violation_raises():
    fg, _ = build_grids(8, 2)
    flux = FluxField.uniform(fg, 1.0)
    with pytest.raises(CFLError):
        step_transport_fine(flux, np.zeros((8, 8)), PowerFlux(1.0), 1.0)


def test_step_schedule():
    assert step_schedule(0.0, 1.0, 0.25) == (4, 0.25)
    n, dt = step_schedule(0.0, 1.0, 0.3)
    assert n == 4 and math.isclose(dt, 0.25)
    assert step_schedule(0.0, 1.0, math.inf) == (1, 1.0)


def _translation_error(nx, T=0.3):
    fg, _ = build_grids(nx, 1)
    flux = FluxField.uniform(fg, 1.0)
    xc, _ = fg.cell_centers()
    bump = lambda x: np.exp(-(((x - 0.3) / 0.08) ** 2))
    S = run_transport_fine(flux, bump(xc), PowerFlux(1.0), [T])[T]
    return np.abs(S - bump(xc - T)).sum() * fg.cell_area


def test_upwind_first_order_convergence():
    e = [_translation_error(n) for n in (200, 400)]
    assert 1.8 <= e[0] / e[1] <= 2.2


def test_corey_endpoints_and_monotonicity():
    c = Corey(0.2, 0.15, 1.0, 3.0)
    fw = c.fractional_flow()
    assert fw(c.s_min) == 0.0 and fw(c.s_max) == 1.0
    s = np.linspace(c.s_min, c.s_max, 101)
    assert np.all(np.diff(fw(s)) >= 0)
    # outside the mobile range each phase is frozen at its end value
    assert c.water(0.1) == 0.0 and c.oil(0.9) == 0.0
    assert fw.lipschitz() > 1.0


def test_power_flux():
    lam = PowerFlux(3.0)
    assert lam(-0.5) == -0.125 and lam(0.5) == 0.125
    s = np.linspace(0.1, 0.9, 9)
    assert np.allclose(lam.derivative(s), (lam(s + 1e-6) - lam(s - 1e-6)) / 2e-6, rtol=1e-6)
    with pytest.raises(ValueError):
        PowerFlux(0.5)


def test_linear_impes_equals_transport():
    fg, _ = build_grids(16, 4)
    kappa = generate_channelized(fg, 0, 2, 1.0, 100.0, 2)
    q = quarter_five_spot(fg, 0.5)
    corey = Corey(0.0, 0.0, 1.0, 1.0, exponent=1.0)
    _, flux = solve_darcy(fg, kappa, 1.0, q)
    dt = max_stable_dt(upwind_operator(flux, q)) / 1.5
    k = math.ceil(0.5 / dt)
    states = run_two_phase_fine(fg, kappa, corey, q, [0.5, 1.0], 0.5, 0.5 / k)
    ref = run_transport_fine(flux, np.zeros((16, 16)), PowerFlux(1.0), [0.5, 1.0], q, 1.0, 0.5 / k)
    for st_ in states:
        assert np.abs(st_.S - ref[st_.t]).max() <= 1e-12
        assert st_.clamp == 0.0


def test_impes_water_balance():
    fg, _ = build_grids(16, 4)
    kappa = generate_channelized(fg, 0, 2, 1.0, 100.0, 2)
    q = quarter_five_spot(fg, 0.5)
    corey = Corey()
    T = 0.2
    (st_,) = run_two_phase_fine(fg, kappa, corey, q, [T], 0.05)
    stored = (st_.S - corey.s_min).sum() * fg.cell_area
    # before breakthrough all injected water stays in the domain
    assert st_.S[-1, -1] < corey.s_min + 1e-9
    assert math.isclose(stored, 0.5 * T, rel_tol=1e-9)
    assert corey.s_min <= st_.S.min() and st_.S.max() <= corey.s_max


def test_impes_matches_transliteration_oracle():
    fg, _ = build_grids(20, 4)
    kappa = generate_channelized(fg, 6, 2, 1.0, 1e3, 2)
    q = quarter_five_spot(fg, 0.3)
    corey = Corey(0.2, 0.2, 1.0, 2.0)
    dt = 1e-3
    (got,) = run_two_phase_fine(fg, kappa, corey, q, [2 * dt], dt, dt)

    def krw(s):
        se = min(max((s - 0.2) / 0.6, 0.0), 1.0)
        return se * se / 1.0

    def kro(s):
        se = min(max((0.8 - s) / 0.6, 0.0), 1.0)
        return se * se / 2.0

    S = np.full((20, 20), 0.2)
    for _ in range(2):
        lam = np.vectorize(lambda s: krw(s) + kro(s))(S)
        p = dense_darcy(fg, kappa * lam, q)
        fx = np.zeros((20, 21))
        fy = np.zeros((21, 20))
        c = kappa * lam
        for iy in range(20):
            for ix in range(19):
                t = 2.0 / (1.0 / c[iy, ix] + 1.0 / c[iy, ix + 1])
                fx[iy, ix + 1] = t * (p[iy, ix] - p[iy, ix + 1])
        for iy in range(19):
            for ix in range(20):
                t = 2.0 / (1.0 / c[iy, ix] + 1.0 / c[iy + 1, ix])
                fy[iy + 1, ix] = t * (p[iy, ix] - p[iy + 1, ix])
        fw = lambda s: krw(s) / (krw(s) + kro(s))
        rate = loop_upwind_rate(FluxField(fg, fx, fy), S, np.vectorize(fw), q)
        S = np.clip(S + dt * (np.maximum(q, 0) * fw(0.8) - rate), 0.2, 0.8)
    assert np.abs(got.S - S).max() <= 1e-13
