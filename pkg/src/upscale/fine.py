"""Fine-grid reference solvers: TPFA Darcy, explicit upwind transport, IMPES.

Transport operators act on cell values and are scaled per unit cell area, so
that ``dS/dt = b - L @ f(S)`` is the semi-discrete upwind scheme. Wells are
cell sources: ``q > 0`` injects fluid of saturation ``s_inj`` and ``q < 0``
produces the resident fluid, which enters ``L`` as an outflow term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from upscale.grid import FineGrid

log = logging.getLogger(__name__)

CFL_MAX = 0.5


class SolverError(RuntimeError):
    """A discrete system could not be solved."""


class CFLError(ValueError):
    """Explicit time step exceeds the stability bound."""


@dataclass(frozen=True)
class FluxField:
    """Face-integrated normal fluxes, positive in +x / +y.

    ``fx`` has shape ``(ny, nx + 1)`` and ``fy`` shape ``(ny + 1, nx)``.
    """

    grid: FineGrid
    fx: np.ndarray
    fy: np.ndarray

    def divergence(self) -> np.ndarray:
        """Net outflow of every cell, shape ``(ny, nx)``."""
        return (self.fx[:, 1:] - self.fx[:, :-1]) + (self.fy[1:, :] - self.fy[:-1, :])

    def interior(self) -> np.ndarray:
        return self.grid.interior_face_fluxes(self.fx, self.fy)

    def max_velocity(self) -> float:
        """Largest face normal velocity ``|u . n|``."""
        return max(np.abs(self.fx).max(), np.abs(self.fy).max()) / self.grid.h

    def scaled(self, factor) -> "FluxField":
        return FluxField(self.grid, self.fx * factor, self.fy * factor)

    @classmethod
    def uniform(cls, grid: FineGrid, ux: float, uy: float = 0.0, closed: bool = False):
        """Constant velocity field; with ``closed`` the domain boundary carries no flux."""
        fx = np.full((grid.ny, grid.nx + 1), ux * grid.h)
        fy = np.full((grid.ny + 1, grid.nx), uy * grid.h)
        if closed:
            fx[:, [0, -1]] = 0.0
            fy[[0, -1], :] = 0.0
        return cls(grid, fx, fy)


# ---------------------------------------------------------------------------
# sources


def quarter_five_spot(grid: FineGrid, rate: float) -> np.ndarray:
    """Injector in the lower-left cell, producer in the upper-right, total ``rate``."""
    q = np.zeros((grid.ny, grid.nx))
    q[0, 0] = rate / grid.cell_area
    q[-1, -1] = -rate / grid.cell_area
    return q


# ---------------------------------------------------------------------------
# Darcy


def tpfa_transmissibilities(coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Harmonic-mean face transmissibilities for a uniform square grid.

    On a square grid the face length and the centre distance are both ``h``,
    so the transmissibility is just the harmonic mean of the cell values.
    """
    coef = np.asarray(coef, dtype=float)
    tx = 2.0 / (1.0 / coef[:, :-1] + 1.0 / coef[:, 1:])
    ty = 2.0 / (1.0 / coef[:-1, :] + 1.0 / coef[1:, :])
    return tx, ty


def tpfa_matrix(grid: FineGrid, coef: np.ndarray) -> sp.csr_matrix:
    """Symmetric TPFA matrix of ``-div(coef grad p)`` with no-flow boundaries.

    Rows give the net face flux out of each cell (not divided by the area).
    """
    tx, ty = tpfa_transmissibilities(coef)
    a, b = grid.interior_faces
    t = np.concatenate([tx.ravel(), ty.ravel()])
    n = grid.n_cells
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([t, t, -t, -t])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def laplacian(grid: FineGrid, coef: np.ndarray | float = 1.0) -> sp.csr_matrix:
    """Per-area diffusion operator ``-div(coef grad .)``, no-flow boundaries."""
    coef = np.broadcast_to(np.asarray(coef, dtype=float), (grid.ny, grid.nx))
    return (tpfa_matrix(grid, coef) / grid.cell_area).tocsr()


_SIDES = {"left": (0, 0), "right": (0, -1), "bottom": (1, 0), "top": (1, -1)}


def solve_darcy(
    grid: FineGrid,
    kappa: np.ndarray,
    mobility: np.ndarray | float = 1.0,
    q: np.ndarray | None = None,
    dirichlet: dict[str, float] | None = None,
) -> tuple[np.ndarray, FluxField]:
    """TPFA solve of ``-div(kappa * mobility grad p) = q``.

    Boundaries are no-flow except the sides named in ``dirichlet``
    (``left``, ``right``, ``bottom``, ``top``). Without Dirichlet sides the
    source must integrate to zero and the pressure is normalised to zero mean.
    Returns the pressure, shape ``(ny, nx)``, and the face fluxes.
    """
    coef = np.asarray(kappa, dtype=float) * mobility
    if np.any(~(coef > 0)):
        raise SolverError("kappa * mobility must be strictly positive")
    n = grid.n_cells
    h2 = grid.cell_area
    rhs = np.zeros(n) if q is None else np.asarray(q, dtype=float).ravel() * h2
    A = tpfa_matrix(grid, coef)
    c = np.broadcast_to(coef, (grid.ny, grid.nx))
    extra = np.zeros(n)
    bface = {}
    for side, value in (dirichlet or {}).items():
        axis, pos = _SIDES[side]
        cells = grid.cell_index[:, pos] if axis == 0 else grid.cell_index[pos, :]
        # half-cell distance to the boundary face
        t = 2.0 * (c[:, pos] if axis == 0 else c[pos, :])
        extra[cells] += t
        rhs[cells] += t * value
        bface[side] = (cells, t, value)
    A = (A + sp.diags(extra)).tocsc()
    if not bface:
        total = rhs.sum()
        if abs(total) > 1e-10 * max(np.abs(rhs).sum(), 1e-300):
            raise SolverError(f"incompatible source: integral {total:.3e} with no-flow boundaries")
        ones = np.ones((n, 1))
        A = sp.bmat([[A, sp.csc_matrix(ones)], [sp.csc_matrix(ones.T), None]], format="csc")
        rhs = np.append(rhs - total / n, 0.0)
    try:
        with np.errstate(all="raise"):
            sol = spla.splu(A).solve(rhs)
    except (RuntimeError, FloatingPointError) as exc:
        raise SolverError(f"singular pressure system: {exc}") from None
    p = sol[:n].reshape(grid.ny, grid.nx)
    tx, ty = tpfa_transmissibilities(coef)
    fx = np.zeros((grid.ny, grid.nx + 1))
    fy = np.zeros((grid.ny + 1, grid.nx))
    fx[:, 1:-1] = tx * (p[:, :-1] - p[:, 1:])
    fy[1:-1, :] = ty * (p[:-1, :] - p[1:, :])
    for side, (cells, t, value) in bface.items():
        axis, pos = _SIDES[side]
        pc = p.ravel()[cells]
        outward = t * (pc - value)
        sign = -1.0 if pos == 0 else 1.0
        if axis == 0:
            fx[:, 0 if pos == 0 else -1] = sign * outward
        else:
            fy[0 if pos == 0 else -1, :] = sign * outward
    return p, FluxField(grid, fx, fy)


# ---------------------------------------------------------------------------
# flux functions


class PowerFlux:
    """``λ(S) = S^β``, extended oddly (``sign(S)|S|^β``) to negative values."""

    def __init__(self, beta: float = 1.0):
        if beta < 1:
            raise ValueError("beta must be >= 1")
        self.beta = float(beta)

    @property
    def linear(self) -> bool:
        return self.beta == 1.0

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.linear:
            return s.copy()
        return np.sign(s) * np.abs(s) ** self.beta

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.linear:
            return np.ones_like(s)
        return self.beta * np.abs(s) ** (self.beta - 1.0)

    def lipschitz(self) -> float:
        """Bound on ``|λ'|`` over [0, 1]."""
        return self.beta

    def __repr__(self):
        return f"PowerFlux(beta={self.beta:g})"


@dataclass(frozen=True)
class Corey:
    """Corey relative mobilities ``λ_α = s_e^n / μ_α`` on normalised saturation.

    Outside ``[swc, 1 - sor]`` the normalised saturation is clipped to
    ``[0, 1]``, so a phase below its residual saturation does not move. The
    linear case ``exponent=1`` is left unclipped: with ``swc=sor=0`` and unit
    viscosities the total mobility is then identically one and the
    fractional flow is exactly the identity.
    """

    swc: float = 0.2
    sor: float = 0.2
    muw: float = 1.0
    muo: float = 1.0
    exponent: float = 2.0

    def normalized(self, s):
        return (np.asarray(s, dtype=float) - self.swc) / (1.0 - self.swc - self.sor)

    def _pow(self, x):
        if self.exponent == 1.0:
            return x
        return np.clip(x, 0.0, 1.0) ** self.exponent

    def water(self, s):
        return self._pow(self.normalized(s)) / self.muw

    def oil(self, s):
        se = (1.0 - np.asarray(s, dtype=float) - self.sor) / (1.0 - self.swc - self.sor)
        return self._pow(se) / self.muo

    def total(self, s):
        return self.water(s) + self.oil(s)

    @property
    def s_min(self) -> float:
        return self.swc

    @property
    def s_max(self) -> float:
        return 1.0 - self.sor

    def fractional_flow(self) -> "FractionalFlow":
        return FractionalFlow(self)


class FractionalFlow:
    """Water fractional flow ``f_w = λ_w / λ_t`` as a flux function."""

    def __init__(self, corey: Corey):
        self.corey = corey

    def __call__(self, s):
        return self.corey.water(s) / self.corey.total(s)

    def derivative(self, s, ds: float = 1e-7):
        s = np.asarray(s, dtype=float)
        return (self(s + ds) - self(s - ds)) / (2 * ds)

    def lipschitz(self) -> float:
        s = np.linspace(self.corey.s_min, self.corey.s_max, 2001)
        return float(np.abs(self.derivative(s)).max())


# ---------------------------------------------------------------------------
# transport


def upwind_operator(flux: FluxField, q: np.ndarray | None = None) -> sp.csr_matrix:
    """Per-area first-order upwind divergence operator including producer outflow.

    ``(L @ v)[c]`` is the net outflow from cell ``c`` of the transported
    quantity ``v`` divided by the cell area, where each face carries the value
    of its donor cell and inflow from outside the domain carries zero.
    """
    grid = flux.grid
    a, b = grid.interior_faces
    F = flux.interior()
    pos = np.maximum(F, 0.0)
    neg = np.maximum(-F, 0.0)
    n = grid.n_cells
    rows = [a, b, b, a]
    cols = [a, a, b, b]
    vals = [pos, -pos, neg, -neg]
    # outflow through the domain boundary (zero when the boundary is closed)
    out_x = np.concatenate([np.maximum(-flux.fx[:, 0], 0), np.maximum(flux.fx[:, -1], 0)])
    out_y = np.concatenate([np.maximum(-flux.fy[0, :], 0), np.maximum(flux.fy[-1, :], 0)])
    bcells = np.concatenate(
        [grid.cell_index[:, 0], grid.cell_index[:, -1], grid.cell_index[0, :], grid.cell_index[-1, :]]
    )
    rows.append(bcells)
    cols.append(bcells)
    vals.append(np.concatenate([out_x, out_y]))
    if q is not None:
        sink = np.maximum(-np.ravel(q), 0.0) * grid.cell_area
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(sink)
    L = sp.csr_matrix(
        (np.concatenate(vals) / grid.cell_area, (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return L


def injection_source(q: np.ndarray | None, value: float, shape) -> np.ndarray:
    """Per-area inflow ``q+ * value`` of the injected flux-function value."""
    if q is None:
        return np.zeros(int(np.prod(shape)))
    return np.maximum(np.ravel(q), 0.0) * value


def max_stable_dt(L: sp.spmatrix, lipschitz: float = 1.0, cfl: float = CFL_MAX) -> float:
    """Largest explicit upwind step: ``cfl`` over the largest outflow rate."""
    rate = L.diagonal().max() * lipschitz
    return math.inf if rate <= 0 else cfl / rate


def check_cfl(L: sp.spmatrix, dt: float, lipschitz: float = 1.0, cfl: float = CFL_MAX) -> None:
    limit = max_stable_dt(L, lipschitz, cfl)
    if dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={dt:.4g} exceeds the CFL bound {limit:.4g}")


def step_transport_fine(
    flux: FluxField,
    S: np.ndarray,
    flux_fn,
    dt: float,
    q: np.ndarray | None = None,
    s_inj: float = 1.0,
    L: sp.spmatrix | None = None,
) -> np.ndarray:
    """One explicit upwind step of ``dS/dt + div(u f(S)) = q_w``."""
    if L is None:
        L = upwind_operator(flux, q)
    check_cfl(L, dt, flux_fn.lipschitz())
    S = np.asarray(S, dtype=float)
    b = injection_source(q, float(flux_fn(s_inj)), S.shape)
    return S + dt * (b - L @ flux_fn(S.ravel())).reshape(S.shape)


def step_schedule(t0: float, t1: float, dt_max: float) -> tuple[int, float]:
    """Number of equal steps covering ``[t0, t1]`` not exceeding ``dt_max``."""
    n = max(1, math.ceil((t1 - t0) / dt_max * (1 - 1e-12)))
    return n, (t1 - t0) / n


def run_transport_fine(
    flux: FluxField,
    S0: np.ndarray,
    flux_fn,
    times,
    q: np.ndarray | None = None,
    s_inj: float = 1.0,
    dt_max: float = math.inf,
) -> dict[float, np.ndarray]:
    """March fine transport through the observation ``times``; returns snapshots."""
    L = upwind_operator(flux, q)
    dt_cfl = min(max_stable_dt(L, flux_fn.lipschitz()), dt_max)
    b = injection_source(q, float(flux_fn(s_inj)), S0.shape)
    S = np.asarray(S0, dtype=float).ravel().copy()
    out, t = {}, 0.0
    for t_obs in sorted(times):
        n, dt = step_schedule(t, t_obs, dt_cfl)
        for _ in range(n):
            S += dt * (b - L @ flux_fn(S))
        t = t_obs
        out[t_obs] = S.reshape(S0.shape).copy()
    return out


# ---------------------------------------------------------------------------
# two-phase IMPES


@dataclass
class TwoPhaseState:
    S: np.ndarray
    p: np.ndarray
    flux: FluxField
    t: float
    clamp: float = 0.0


def clamp_saturation(S: np.ndarray, corey: Corey) -> tuple[np.ndarray, float]:
    """Clip to ``[swc, 1 - sor]``; returns the clipped field and the largest correction."""
    clipped = np.clip(S, corey.s_min, corey.s_max)
    return clipped, float(np.abs(clipped - S).max()) if S.size else 0.0


def run_two_phase_fine(
    grid: FineGrid,
    kappa: np.ndarray,
    corey: Corey,
    q: np.ndarray,
    times,
    pressure_dt: float = 0.5,
    dt_max: float = math.inf,
    S0: np.ndarray | None = None,
) -> list[TwoPhaseState]:
    """Fine IMPES: pressure with total mobility, then upwind fractional-flow transport.

    Each outer step of length at most ``pressure_dt`` solves one pressure
    equation with the mobility of the current saturation; the saturation is
    then advanced with CFL-limited sub-steps. Returns the state at each time.
    """
    fw = corey.fractional_flow()
    lip = fw.lipschitz()
    S = np.full((grid.ny, grid.nx), corey.s_min) if S0 is None else np.array(S0, dtype=float)
    f_inj = float(fw(corey.s_max))
    b = injection_source(q, f_inj, S.shape)
    states = []
    t = 0.0
    p, flux = solve_darcy(grid, kappa, corey.total(S), q)
    for t_obs in sorted(times):
        n_outer, dt_outer = step_schedule(t, t_obs, pressure_dt)
        clamp = 0.0
        for _ in range(n_outer):
            p, flux = solve_darcy(grid, kappa, corey.total(S), q)
            L = upwind_operator(flux, q)
            n_sub, dt = step_schedule(0.0, dt_outer, min(max_stable_dt(L, lip), dt_max))
            s = S.ravel().copy()
            for _ in range(n_sub):
                s += dt * (b - L @ fw(s))
            S, c = clamp_saturation(s.reshape(S.shape), corey)
            clamp = max(clamp, c)
        if clamp > 0:
            log.debug("fine IMPES clamp %.3e before t=%g", clamp, t_obs)
        t = t_obs
        states.append(TwoPhaseState(S.copy(), p, flux, t, clamp))
    return states
