"""Constrained local solves on oversampled regions.

A local problem is the global fine operator restricted to the cells of an
oversampled region, with zero values in the cells outside it. Where the
region touches the domain boundary the global no-flow condition applies.
Every continuum region ``K_m^(l)`` inside the oversampled region carries a
mean-value constraint enforced by a piecewise-constant Lagrange multiplier:

    conv @ λ(N) + diff @ N + Σ μ_k 1_{K_k} = 0,    mean_{K_k}(N) = c_k.

With ``λ`` the identity this is the linear saddle-point problem used for
basis functions. Otherwise it is solved by damped Newton iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from upscale.fields import ContinuumPartition
from upscale.grid import OversampleRegion


class LocalSolveError(RuntimeError):
    """Singular local saddle-point system."""

    def __init__(self, region: OversampleRegion, detail: str = ""):
        self.region_id = region.center
        super().__init__(
            f"singular constrained system on region of coarse cell {region.center} "
            f"(layers={region.layers:g}) {detail}".rstrip()
        )


class NewtonError(RuntimeError):
    """Newton iteration did not reach the tolerance."""

    def __init__(self, message: str, history: list[float], region_ids=()):
        self.history = history
        self.region_ids = tuple(region_ids)
        super().__init__(message)


@dataclass
class LocalProblem:
    """Operator, region and mean-value targets of one constrained local solve.

    ``convection`` and ``diffusion`` are global per-area fine operators (either
    may be ``None``). ``targets`` holds one mean value per constraint region,
    ordered as ``constraint_dofs``; a 2D array solves several right-hand sides.
    """

    region: OversampleRegion
    partition: ContinuumPartition
    targets: np.ndarray
    convection: sp.spmatrix | None = None
    diffusion: sp.spmatrix | None = None
    flux_fn: object = None
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    initial: np.ndarray | None = None

    @cached_property
    def cells(self) -> np.ndarray:
        return self.region.fine_cells

    @cached_property
    def constraint_dofs(self) -> np.ndarray:
        return self.partition.dofs_in_region(self.region)

    @property
    def n_constraints(self) -> int:
        return len(self.constraint_dofs)

    @cached_property
    def constraint_of_cell(self) -> np.ndarray:
        """Position in ``constraint_dofs`` of every local cell."""
        pos = np.full(self.partition.n_dofs, -1)
        pos[self.constraint_dofs] = np.arange(self.n_constraints)
        out = pos[self.partition.dof_of_fine.ravel()[self.cells]]
        assert np.all(out >= 0)
        return out

    def _restrict(self, op):
        if op is None:
            n = len(self.cells)
            return sp.csr_matrix((n, n))
        return op[self.cells][:, self.cells].tocsr()

    @cached_property
    def conv(self) -> sp.csr_matrix:
        return self._restrict(self.convection)

    @cached_property
    def diff(self) -> sp.csr_matrix:
        return self._restrict(self.diffusion)

    @cached_property
    def indicator(self) -> sp.csr_matrix:
        """Local cells by constraint, entries 1."""
        n = len(self.cells)
        return sp.csr_matrix(
            (np.ones(n), (np.arange(n), self.constraint_of_cell)), shape=(n, self.n_constraints)
        )

    @cached_property
    def means(self) -> sp.csr_matrix:
        """Rows averaging a local field over each constraint region."""
        h2 = self.partition.coarse.fine.cell_area
        vol = self.partition.volumes[self.constraint_dofs]
        return (sp.diags(h2 / vol) @ self.indicator.T).tocsr()

    @cached_property
    def scale(self) -> float:
        lip = 1.0 if self.flux_fn is None else self.flux_fn.lipschitz()
        rows = abs(self.conv).sum(axis=1).A1 * lip + abs(self.diff).sum(axis=1).A1
        return float(rows.max()) if rows.size and rows.max() > 0 else 1.0

    def with_targets(self, targets: np.ndarray, initial: np.ndarray | None = None) -> "LocalProblem":
        """Same region and operator with new targets; restricted operators are shared."""
        out = replace(self, targets=targets, initial=initial)
        for name in ("cells", "constraint_dofs", "constraint_of_cell", "conv", "diff", "indicator", "means", "scale"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    def initial_guess(self) -> np.ndarray:
        if self.initial is not None:
            return np.array(self.initial, dtype=float)
        return np.asarray(self.targets, dtype=float)[self.constraint_of_cell]


@dataclass
class LocalSolution:
    region: OversampleRegion
    cells: np.ndarray
    values: np.ndarray
    multipliers: np.ndarray
    residual: float
    iterations: int = 0
    history: list[float] = field(default_factory=list)


def saddle_matrix(lp: LocalProblem, jac_diag: np.ndarray | None = None) -> sp.csc_matrix:
    """``[[A, P], [B, 0]]`` with the operator rows scaled by ``1 / lp.scale``."""
    conv = lp.conv if jac_diag is None else lp.conv @ sp.diags(jac_diag)
    A = (conv + lp.diff) / lp.scale
    return sp.bmat([[A, lp.indicator / lp.scale], [lp.means, None]], format="csc")


class SaddleFactor:
    """Sparse LU of a linear local saddle system, reusable for many targets."""

    def __init__(self, lp: LocalProblem):
        self.lp = lp
        try:
            self._lu = spla.splu(saddle_matrix(lp))
        except RuntimeError as exc:
            raise LocalSolveError(lp.region, f"({exc})") from None

    def solve(self, targets: np.ndarray) -> LocalSolution:
        lp = self.lp
        targets = np.asarray(targets, dtype=float)
        n = len(lp.cells)
        rhs = np.zeros((n + lp.n_constraints,) + targets.shape[1:])
        rhs[n:] = targets
        sol = self._lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise LocalSolveError(lp.region, "(non-finite solution)")
        values, mult = sol[:n], sol[n:]
        residual = float(np.abs(lp.means @ values - targets).max()) if targets.size else 0.0
        return LocalSolution(lp.region, lp.cells, values, mult, residual)


def solve_linear_constrained(lp: LocalProblem) -> LocalSolution:
    """Solve the linear saddle-point problem ``[A P; B 0][ψ; μ] = [0; c]``."""
    return SaddleFactor(lp).solve(lp.targets)


def _block_max(values: np.ndarray, blocks: np.ndarray, n_blocks: int) -> np.ndarray:
    out = np.zeros(n_blocks)
    np.maximum.at(out, blocks, np.abs(values))
    return out


def solve_nonlinear_batch(problems: list[LocalProblem]) -> list[LocalSolution]:
    """Damped Newton iteration for independent nonlinear local problems.

    The problems are stacked into one block-diagonal system so that every
    iteration needs a single sparse factorisation. Damping and convergence
    are decided per problem: a step is halved (at most 30 times) until that
    problem's residual decreases, and converged problems are frozen.
    """
    if not problems:
        return []
    nb = len(problems)
    flux_fn = problems[0].flux_fn
    tol = problems[0].newton_tol
    max_iter = problems[0].newton_max_iter
    sizes_n = np.array([len(p.cells) for p in problems])
    sizes_m = np.array([p.n_constraints for p in problems])
    blk_n = np.repeat(np.arange(nb), sizes_n)
    blk_m = np.repeat(np.arange(nb), sizes_m)
    inv_s = np.repeat([1.0 / p.scale for p in problems], sizes_n)
    conv = sp.block_diag([p.conv for p in problems], format="csr")
    diff = sp.block_diag([p.diff for p in problems], format="csr")
    P = sp.diags(inv_s) @ sp.block_diag([p.indicator for p in problems], format="csr")
    B = sp.block_diag([p.means for p in problems], format="csr")
    c = np.concatenate([np.asarray(p.targets, dtype=float) for p in problems])
    n_tot = sizes_n.sum()

    def residual(N, mu):
        r1 = (conv @ flux_fn(N) + diff @ N) * inv_s + P @ mu
        r2 = B @ N - c
        return r1, r2, np.maximum(_block_max(r1, blk_n, nb), _block_max(r2, blk_m, nb))

    N = np.concatenate([p.initial_guess() for p in problems])
    mu = np.zeros(sizes_m.sum())
    r1, r2, rb = residual(N, mu)
    history = [float(rb.max())]
    iters = np.zeros(nb, dtype=int)
    for _ in range(max_iter):
        active = rb > tol
        if not active.any():
            break
        iters[active] += 1
        J = sp.bmat(
            [[sp.diags(inv_s) @ (conv @ sp.diags(flux_fn.derivative(N)) + diff), P], [B, None]],
            format="csc",
        )
        try:
            dx = spla.splu(J).solve(-np.concatenate([r1, r2]))
        except RuntimeError as exc:
            bad = [p.region.center for p, a in zip(problems, active) if a]
            raise NewtonError(f"singular Newton system: {exc}", history, bad) from None
        dN, dmu = dx[:n_tot], dx[n_tot:]
        alpha = np.where(active, 1.0, 0.0)
        for _halving in range(31):
            Nt = N + alpha[blk_n] * dN
            mut = mu + alpha[blk_m] * dmu
            t1, t2, tb = residual(Nt, mut)
            worse = active & (tb >= rb) & (alpha > 2.0**-30)
            if not worse.any():
                break
            alpha[worse] *= 0.5
        N, mu, r1, r2, rb = Nt, mut, t1, t2, tb
        history.append(float(rb.max()))
    if (rb > tol).any():
        bad = [p.region.center for p, r in zip(problems, rb) if r > tol]
        raise NewtonError(
            f"Newton did not converge in {max_iter} iterations for coarse cells {bad[:8]}; "
            f"residual {rb.max():.3e} > {tol:.1e}",
            history,
            bad,
        )
    out = []
    n_off = np.concatenate([[0], np.cumsum(sizes_n)])
    m_off = np.concatenate([[0], np.cumsum(sizes_m)])
    for b, p in enumerate(problems):
        vals = N[n_off[b]:n_off[b + 1]]
        mult = mu[m_off[b]:m_off[b + 1]]
        res = float(np.abs(p.means @ vals - p.targets).max()) if p.n_constraints else 0.0
        out.append(LocalSolution(p.region, p.cells, vals, mult, res, int(iters[b]), history))
    return out


def solve_nonlinear_constrained(lp: LocalProblem) -> LocalSolution:
    """Newton solve of ``conv λ(N) + diff N + Σ μ 1_K = 0`` with mean constraints."""
    if lp.flux_fn is None:
        return solve_linear_constrained(lp)
    return solve_nonlinear_batch([lp])[0]
