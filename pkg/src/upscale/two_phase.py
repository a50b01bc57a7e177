"""Coarse two-phase IMPES with a saturation basis frozen at the initial mobility.

Every outer step solves the fine pressure equation with a total mobility
that is constant on each continuum region (the mobility of the coarse
average), then advances the coarse saturations with explicit sub-steps

    |K| dU/dt = h² Pᵀ (b - L(u_t) f_w(R U)),

where ``R`` reconstructs a fine field from the coarse averages: the NLMC
basis matrix, or the continuum indicators for the finite-volume baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from upscale.fields import ContinuumPartition
from upscale.fine import (
    CFL_MAX,
    Corey,
    FluxField,
    injection_source,
    solve_darcy,
    step_schedule,
    upwind_operator,
)
from upscale.grid import FineGrid
from upscale.linear import BasisSet, build_transport_basis

log = logging.getLogger(__name__)


@dataclass
class CoarseTwoPhaseResult:
    """Coarse averages at the observation times plus run diagnostics."""

    states: dict[float, np.ndarray]
    fluxes: dict[float, FluxField]
    max_clamp: float = 0.0
    n_pressure: int = 0
    n_transport: int = 0
    n_rebuilds: int = 0
    clamps: list[float] = field(default_factory=list)


def continuum_mobility(partition: ContinuumPartition, corey: Corey, U: np.ndarray) -> np.ndarray:
    """Fine total-mobility field, constant on each continuum region."""
    lam = corey.total(np.asarray(U, dtype=float))
    return partition.prolong(lam).reshape(partition.coarse.fine.ny, partition.coarse.fine.nx)


def _reconstruction(partition: ContinuumPartition, basis: BasisSet | None) -> sp.csr_matrix:
    return (partition.indicator if basis is None else basis.psi).tocsr()


def run_two_phase_coarse(
    grid: FineGrid,
    kappa: np.ndarray,
    corey: Corey,
    q: np.ndarray,
    partition: ContinuumPartition,
    times,
    basis: BasisSet | None = None,
    pressure_dt: float = 0.5,
    dt_max: float = math.inf,
    U0: np.ndarray | None = None,
    clamp: bool = True,
    rebuild_every: int = 0,
    eps_scale: float = 1.0,
) -> CoarseTwoPhaseResult:
    """Coarse IMPES loop.

    Parameters
    ----------
    basis : BasisSet, optional
        Frozen saturation basis. ``None`` runs the dual-continuum
        finite-volume baseline (piecewise-constant reconstruction).
    pressure_dt : float
        Outer step; the pressure is solved once per outer step.
    clamp : bool
        Clip the averages to ``[swc, 1 - sor]`` after every transport sub-step.
    rebuild_every : int
        With a basis, rebuild it from the current total velocity every that
        many outer steps (0 keeps the initial basis for the whole run).
    """
    fw = corey.fractional_flow()
    lip = fw.lipschitz()
    R = _reconstruction(partition, basis)
    P = partition.indicator.tocsr()
    h2 = grid.cell_area
    vol = partition.volumes
    U = np.full(partition.n_dofs, corey.s_min) if U0 is None else np.array(U0, dtype=float)
    G = h2 * (P.T @ injection_source(q, float(fw(corey.s_max)), (grid.n_cells,))) / vol
    res = CoarseTwoPhaseResult({}, {})
    t = 0.0
    for t_obs in sorted(times):
        n_outer, dt_outer = step_schedule(t, t_obs, pressure_dt)
        for _ in range(n_outer):
            _, flux = solve_darcy(grid, kappa, continuum_mobility(partition, corey, U), q)
            res.n_pressure += 1
            if basis is not None and rebuild_every and res.n_pressure % rebuild_every == 0:
                # the basis is unchanged by a constant velocity scaling, so u_t serves directly
                basis = build_transport_basis(flux, partition.coarse, partition, basis.layers, q=q, eps_scale=eps_scale)
                R = basis.psi.tocsr()
                res.n_rebuilds += 1
            LR = (upwind_operator(flux, q) @ R).tocsr()
            A = (h2 * (P.T @ upwind_operator(flux, q))).tocsr()
            # coarse CFL of the linearized update
            rows = np.abs((P.T @ LR).toarray()).sum(axis=1) * h2 / vol * lip
            top = rows.max() if rows.size else 0.0
            limit = math.inf if top <= 0 else CFL_MAX / top
            n_sub, dt = step_schedule(0.0, dt_outer, min(limit, dt_max))
            worst = 0.0
            for _ in range(n_sub):
                U = U + dt * (G - (A @ fw(R @ U)) / vol)
                if not clamp:
                    continue
                clipped = np.clip(U, corey.s_min, corey.s_max)
                if U.size:
                    worst = max(worst, float(np.abs(clipped - U).max()))
                U = clipped
            res.n_transport += n_sub
            res.clamps.append(worst)
            res.max_clamp = max(res.max_clamp, worst)
        t = t_obs
        res.states[t_obs] = U.copy()
        res.fluxes[t_obs] = flux if n_outer else solve_darcy(
            grid, kappa, continuum_mobility(partition, corey, U), q
        )[1]
    if res.max_clamp > 0:
        log.debug("coarse IMPES largest clamp %.3e", res.max_clamp)
    return res


def frozen_basis(
    grid: FineGrid,
    kappa: np.ndarray,
    corey: Corey,
    q: np.ndarray,
    partition: ContinuumPartition,
    layers: float,
    eps_scale: float = 1.0,
    S0: float | None = None,
) -> BasisSet:
    """Transport basis for the velocity ``u_t / λ_t`` at the initial saturation."""
    s0 = corey.s_min if S0 is None else S0
    lam0 = float(corey.total(s0))
    _, flux = solve_darcy(grid, kappa, lam0, q)
    ref = flux.scaled(1.0 / lam0)
    return build_transport_basis(
        ref, partition.coarse, partition, layers, q=np.asarray(q) / lam0, eps_scale=eps_scale
    )
