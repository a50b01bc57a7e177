"""Linear NLMC: multiscale bases, nonlocal coarse operators, coarse time stepping.

Every coarse scheme here advances continuum averages ``U`` by

    |K| (U^{n+1} - U^n) = dt (G - A U^n),

where row ``r`` of ``A`` integrates the fine operator applied to the
reconstruction ``R @ U`` over the continuum region ``K_r``. The multiscale
reconstruction uses the basis functions. The dual-continuum finite-volume
baseline uses piecewise-constant indicators.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from upscale.fields import ContinuumPartition
from upscale.fine import CFL_MAX, CFLError, FluxField, laplacian, step_schedule, upwind_operator
from upscale.grid import CoarseGrid, oversample
from upscale.local import LocalProblem, SaddleFactor

log = logging.getLogger(__name__)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("UPSCALE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class BasisSet:
    """Basis functions ``ψ_d`` as columns of a sparse ``(n_fine, n_dofs)`` matrix."""

    partition: ContinuumPartition
    layers: float
    psi: sp.csc_matrix
    residuals: np.ndarray
    label: str = ""

    @property
    def n_dofs(self) -> int:
        return self.psi.shape[1]

    def reconstruct(self, U: np.ndarray) -> np.ndarray:
        """Fine field ``Σ_d U_d ψ_d`` as a flat array."""
        return self.psi @ np.asarray(U)

    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0


def artificial_diffusion(flux: FluxField, eps_scale: float = 1.0) -> float:
    """Upwind-scale viscosity ``eps_scale * h * max |u . n|``."""
    return eps_scale * flux.grid.h * flux.max_velocity()


def build_basis(
    partition: ContinuumPartition,
    layers: float,
    convection: sp.spmatrix | None = None,
    diffusion: sp.spmatrix | None = None,
    label: str = "",
) -> BasisSet:
    """Kronecker-constrained local solves, one per active (coarse cell, continuum).

    Coarse cells whose oversampled regions coincide (always the case for the
    global region) share one factorisation.
    """
    cg = partition.coarse
    n_fine = cg.fine.n_cells
    cols, rows, vals = [], [], []
    factors: dict[tuple, SaddleFactor] = {}

    def solve_cell(i: int):
        region = oversample(cg, i, layers)
        key = (region.I0, region.I1, region.J0, region.J1)
        own = partition.dofs_in_coarse(i)
        fac = factors.get(key)
        if fac is None:
            fac = SaddleFactor(LocalProblem(region, partition, np.zeros(0), convection, diffusion))
            if region.is_global:
                factors[key] = fac
        lp = fac.lp
        targets = np.zeros((lp.n_constraints, len(own)))
        pos = np.searchsorted(lp.constraint_dofs, own)
        targets[pos, np.arange(len(own))] = 1.0
        return own, fac.solve(targets)

    cells = range(cg.n_cells)
    if worker_count() > 1 and not math.isinf(layers):
        with ThreadPoolExecutor(worker_count()) as pool:
            results = list(pool.map(solve_cell, cells))
    else:
        results = [solve_cell(i) for i in cells]
    for own, sol in results:
        for k, d in enumerate(own):
            v = sol.values[:, k]
            keep = v != 0.0
            rows.append(sol.cells[keep])
            cols.append(np.full(keep.sum(), d))
            vals.append(v[keep])
    psi = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_fine, partition.n_dofs),
    )
    residuals = basis_constraint_residuals(psi, partition, layers)
    return BasisSet(partition, layers, psi, residuals, label)


def basis_constraint_residuals(psi: sp.spmatrix, partition: ContinuumPartition, layers: float) -> np.ndarray:
    """Max deviation of every basis from its Kronecker means inside its region."""
    means = (partition.indicator.T @ psi).toarray() * partition.coarse.fine.cell_area
    means /= partition.volumes[:, None]
    target = np.eye(partition.n_dofs)
    cg = partition.coarse
    out = np.zeros(partition.n_dofs)
    for d, (i, _) in enumerate(partition.dofs):
        inside = partition.dofs_in_region(oversample(cg, i, layers))
        out[d] = np.abs(means[inside, d] - target[inside, d]).max()
    return out


def build_diffusion_basis(kappa: np.ndarray, cg: CoarseGrid, partition: ContinuumPartition, layers: float) -> BasisSet:
    """Bases of ``-div(κ grad ψ) + μ = 0`` with Kronecker mean constraints."""
    return build_basis(partition, layers, diffusion=laplacian(cg.fine, kappa), label="diffusion")


def build_transport_basis(
    flux: FluxField,
    cg: CoarseGrid,
    partition: ContinuumPartition,
    layers: float,
    eps: float | None = None,
    q: np.ndarray | None = None,
    eps_scale: float = 1.0,
) -> BasisSet:
    """Bases of ``div(u ψ) - ε Δψ + μ = 0`` (upwind convection plus artificial diffusion).

    With wells the convection is taken in advective form: the injector
    inflow ``q+`` is removed from the diagonal so that constants stay in the
    kernel of the local operator, as they are for a divergence-free ``u``.
    Producer cells keep their outflow, which is a genuine sink.
    """
    if eps is None:
        eps = artificial_diffusion(flux, eps_scale)
    conv = upwind_operator(flux, q)
    if q is not None:
        conv = (conv - sp.diags(np.maximum(np.asarray(q, dtype=float).ravel(), 0.0))).tocsr()
    diff = laplacian(cg.fine, eps) if eps > 0 else None
    return build_basis(partition, layers, convection=conv, diffusion=diff, label="transport")


# ---------------------------------------------------------------------------
# upscaled systems


@dataclass
class UpscaledSystem:
    """Coarse operator ``A``, mass ``M`` and source ``G`` over the active dofs."""

    A: np.ndarray
    M: np.ndarray
    G: np.ndarray
    partition: ContinuumPartition
    galerkin: bool = False

    @property
    def n_dofs(self) -> int:
        return self.A.shape[0]

    def mass_diagonal(self) -> np.ndarray:
        return np.diag(self.M) if self.M.ndim == 2 else self.M

    def max_stable_dt(self, cfl: float = CFL_MAX) -> float:
        rate = np.abs(self.A).sum(axis=1) / self.mass_diagonal()
        top = rate.max() if rate.size else 0.0
        return math.inf if top <= 0 else cfl / top


def _dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def assemble_upscaled(
    recon: BasisSet | sp.spmatrix,
    operator: sp.spmatrix,
    partition: ContinuumPartition,
    source: np.ndarray | None = None,
    test: str = "indicator",
) -> UpscaledSystem:
    """Project a per-area fine operator onto the coarse dofs.

    ``test="indicator"`` (default) tests against continuum indicators, so the
    mass matrix is the diagonal of region volumes. ``test="galerkin"`` tests
    against the bases themselves and returns the full overlap mass matrix.
    """
    R = recon.psi if isinstance(recon, BasisSet) else sp.csc_matrix(recon)
    if R.shape != (partition.coarse.fine.n_cells, partition.n_dofs):
        raise ValueError(f"reconstruction shape {R.shape} does not match the partition")
    h2 = partition.coarse.fine.cell_area
    g = np.zeros(R.shape[0]) if source is None else np.ravel(source)
    if test == "indicator":
        Tst = partition.indicator
        M = partition.volumes.copy()
    elif test == "galerkin":
        Tst = R
        M = _dense(R.T @ R) * h2
    else:
        raise ValueError(f"unknown test space {test!r}")
    A = _dense(Tst.T @ (operator @ R)) * h2
    G = np.asarray(Tst.T @ g).ravel() * h2
    return UpscaledSystem(A, M, G, partition, galerkin=test == "galerkin")


def step_coarse(sys: UpscaledSystem, U: np.ndarray, dt: float, implicit: bool = False) -> np.ndarray:
    """One Euler step of ``M (U^{n+1} - U^n) + dt A U^L = dt G``."""
    U = np.asarray(U, dtype=float)
    if implicit:
        M = sys.M if sys.M.ndim == 2 else np.diag(sys.M)
        return np.linalg.solve(M + dt * sys.A, M @ U + dt * sys.G)
    limit = sys.max_stable_dt()
    if dt > limit * (1 + 1e-12):
        raise CFLError(f"coarse dt={dt:.4g} exceeds the CFL bound {limit:.4g}")
    rhs = dt * (sys.G - sys.A @ U)
    if sys.M.ndim == 2:
        return U + np.linalg.solve(sys.M, rhs)
    return U + rhs / sys.M


def run_coarse(
    sys: UpscaledSystem,
    U0: np.ndarray,
    times,
    dt_max: float = math.inf,
    implicit: bool = False,
) -> dict[float, np.ndarray]:
    """March a coarse system through the observation ``times``."""
    dt_lim = dt_max if implicit else min(sys.max_stable_dt(), dt_max)
    if math.isinf(dt_lim):
        dt_lim = max(times) if len(times) else 1.0
    U = np.asarray(U0, dtype=float).copy()
    out, t = {}, 0.0
    if not implicit and sys.M.ndim == 1:
        Aop = sys.A / sys.M[:, None]
        Gop = sys.G / sys.M
    for t_obs in sorted(times):
        n, dt = step_schedule(t, t_obs, dt_lim)
        for _ in range(n):
            if implicit or sys.M.ndim == 2:
                U = step_coarse(sys, U, dt, implicit)
            else:
                U = U + dt * (Gop - Aop @ U)
        t = t_obs
        out[t_obs] = U.copy()
    return out


def fv_baseline_system(
    flux: FluxField, partition: ContinuumPartition, q: np.ndarray | None = None, s_inj: float = 1.0
) -> UpscaledSystem:
    """Dual-continuum upwind finite volumes on the coarse grid.

    Fine face fluxes are summed per pair of continuum regions and carry the
    donor region's average; this equals the upscaled system of the
    piecewise-constant reconstruction.
    """
    L = upwind_operator(flux, q)
    src = None if q is None else np.maximum(np.ravel(q), 0.0) * s_inj
    return assemble_upscaled(partition.indicator, L, partition, src)


def coarse_fv_baseline(
    flux: FluxField,
    partition: ContinuumPartition,
    U0: np.ndarray,
    times,
    q: np.ndarray | None = None,
    s_inj: float = 1.0,
) -> dict[float, np.ndarray]:
    return run_coarse(fv_baseline_system(flux, partition, q, s_inj), U0, times)


def transport_system(
    basis: BasisSet, flux: FluxField, q: np.ndarray | None = None, s_inj: float = 1.0
) -> UpscaledSystem:
    """NLMC system for linear transport with the given bases."""
    L = upwind_operator(flux, q)
    src = None if q is None else np.maximum(np.ravel(q), 0.0) * s_inj
    return assemble_upscaled(basis, L, basis.partition, src)


def diffusion_system(basis: BasisSet, kappa: np.ndarray, g: np.ndarray | None = None, test: str = "indicator") -> UpscaledSystem:
    """NLMC system for ``u_t - div(κ grad u) = g``."""
    grid = basis.partition.coarse.fine
    return assemble_upscaled(basis, laplacian(grid, kappa), basis.partition, g, test=test)
