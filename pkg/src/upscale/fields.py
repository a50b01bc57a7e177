"""Permeability fields, continuum partitions, snapshots and experiment configuration.

File format for permeability and snapshot files: ASCII, first line ``nx ny``,
then ``nx * ny`` whitespace-separated values in row-major order with y outer
and x inner (one row of the grid per text line).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from upscale.grid import INF, CoarseGrid, ConfigurationError, FineGrid, OversampleRegion


class FieldFormatError(ValueError):
    """Malformed or physically invalid field file."""


# ---------------------------------------------------------------------------
# file I/O


def _write_field(values: np.ndarray, path) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("field must be a 2D (ny, nx) array")
    ny, nx = values.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{nx} {ny}\n")
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def _read_field(path) -> np.ndarray:
    text = Path(path).read_text(encoding="ascii").split()
    if len(text) < 2:
        raise FieldFormatError(f"{path}: missing 'nx ny' header")
    try:
        nx, ny = int(text[0]), int(text[1])
        values = np.array([float(t) for t in text[2:]])
    except ValueError as exc:
        raise FieldFormatError(f"{path}: {exc}") from None
    if nx <= 0 or ny <= 0:
        raise FieldFormatError(f"{path}: bad dimensions {nx} x {ny}")
    if values.size != nx * ny:
        raise FieldFormatError(f"{path}: expected {nx * ny} values, found {values.size}")
    return values.reshape(ny, nx)


def write_snapshot(values: np.ndarray, path) -> None:
    """Write a cell field; ``repr`` floats round-trip exactly."""
    _write_field(values, path)


def read_snapshot(path) -> np.ndarray:
    return _read_field(path)


def save_permeability(kappa: np.ndarray, path) -> None:
    _write_field(kappa, path)


def load_permeability(path, grid: FineGrid | None = None) -> np.ndarray:
    """Read a permeability file, checking dimensions and strict positivity."""
    kappa = _read_field(path)
    if grid is not None and kappa.shape != (grid.ny, grid.nx):
        ny, nx = kappa.shape
        raise FieldFormatError(
            f"{path}: field is {nx} x {ny} but grid is {grid.nx} x {grid.ny}"
        )
    bad = np.argwhere(~(kappa > 0))
    if bad.size:
        iy, ix = bad[0]
        raise FieldFormatError(
            f"{path}: non-positive permeability {kappa[iy, ix]!r} at cell (ix={ix}, iy={iy})"
        )
    return kappa


# ---------------------------------------------------------------------------
# synthetic media


def generate_channelized(
    grid: FineGrid,
    seed: int,
    n_channels: int,
    background: float = 1.0,
    channel: float = 1e4,
    width: int = 2,
) -> np.ndarray:
    """Background medium crossed by meandering high-permeability channels.

    Channels alternate between horizontal (left to right) and vertical
    (bottom to top) orientation. Each is a random walk whose lateral position
    changes by at most one cell per step, so it is a connected path of fine
    cells from one side of the domain to the other.
    """
    if not channel > background > 0:
        raise ConfigurationError("need channel > background > 0")
    rng = np.random.default_rng(seed)
    kappa = np.full((grid.ny, grid.nx), float(background))
    for k in range(n_channels):
        horizontal = k % 2 == 0
        length, span = (grid.nx, grid.ny) if horizontal else (grid.ny, grid.nx)
        pos = int(rng.integers(0, span - width + 1))
        drift = 0
        for s in range(length):
            lo = max(pos - 1, 0) if drift else pos
            hi = min(pos + width, span)
            if horizontal:
                kappa[lo:hi, s] = channel
            else:
                kappa[s, lo:hi] = channel
            # persistent meander: keep direction for a while, clip at the walls
            if rng.random() < 0.3:
                drift = int(rng.integers(-1, 2))
            pos = min(max(pos + drift, 0), span - width)
    return kappa


# ---------------------------------------------------------------------------
# continua


def threshold_rule(threshold: float, log10: bool = False) -> Callable[[np.ndarray], np.ndarray]:
    """Predicate selecting the high-permeability continuum, ``κ > t`` or ``log10 κ > t``."""
    if log10:
        return lambda kappa: np.log10(kappa) > threshold
    return lambda kappa: kappa > threshold


@dataclass(frozen=True)
class ContinuumPartition:
    """Labels of fine cells by (coarse cell, continuum) and the active unknowns.

    Continuum 1 is the set selected by the rule (high permeability), continuum 2
    the rest. Empty regions are not unknowns; ``dofs`` lists the active
    ``(coarse cell, continuum)`` pairs ordered by coarse cell then continuum.
    """

    coarse: CoarseGrid
    labels: np.ndarray
    n_continua: int
    dofs: tuple[tuple[int, int], ...]
    dof_of_fine: np.ndarray = field(repr=False)
    volumes: np.ndarray = field(repr=False)

    @property
    def n_dofs(self) -> int:
        return len(self.dofs)

    @cached_property
    def dof_index(self) -> dict[tuple[int, int], int]:
        return {d: k for k, d in enumerate(self.dofs)}

    @cached_property
    def dof_coarse(self) -> np.ndarray:
        return np.array([i for i, _ in self.dofs])

    @cached_property
    def indicator(self) -> sp.csr_matrix:
        """Fine-to-dof membership matrix, shape ``(n_fine, n_dofs)``, entries 1."""
        n = self.coarse.fine.n_cells
        return sp.csr_matrix(
            (np.ones(n), (np.arange(n), self.dof_of_fine.ravel())), shape=(n, self.n_dofs)
        )

    def dofs_in_coarse(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.dof_coarse == i)

    def dofs_in_region(self, region: OversampleRegion) -> np.ndarray:
        return np.flatnonzero(np.isin(self.dof_coarse, region.coarse_cells))

    def average(self, fine: np.ndarray) -> np.ndarray:
        """Volume average of a fine cell field over every dof region."""
        h2 = self.coarse.fine.cell_area
        return (self.indicator.T @ (np.ravel(fine) * h2)) / self.volumes

    def prolong(self, U: np.ndarray) -> np.ndarray:
        """Piecewise-constant fine field from dof values, shape ``(ny, nx)``."""
        return np.asarray(U)[self.dof_of_fine]


def identify_continua(
    kappa: np.ndarray, cg: CoarseGrid, rule: Callable[[np.ndarray], np.ndarray] | None = None
) -> ContinuumPartition:
    """Split every coarse cell into continua by a per-cell predicate on κ.

    With ``rule=None`` there is a single continuum per coarse cell.
    """
    kappa = np.asarray(kappa)
    if np.any(kappa <= 0):
        raise ValueError("permeability must be strictly positive")
    if rule is None:
        labels = np.ones(kappa.shape, dtype=int)
        n_cont = 1
    else:
        labels = np.where(rule(kappa), 1, 2)
        n_cont = 2
    coarse = cg.coarse_of_fine
    key = coarse * n_cont + (labels - 1)
    present = np.unique(key)
    dofs = tuple((int(k // n_cont), int(k % n_cont) + 1) for k in present)
    remap = np.full(cg.n_cells * n_cont, -1)
    remap[present] = np.arange(present.size)
    dof_of_fine = remap[key]
    volumes = np.bincount(dof_of_fine.ravel(), minlength=present.size) * cg.fine.cell_area
    return ContinuumPartition(cg, labels, n_cont, dofs, dof_of_fine, volumes)


# ---------------------------------------------------------------------------
# configuration


def parse_layers(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "infinity", "∞", "global"):
        return INF
    value = float(t)
    if value != int(value):
        raise ValueError(f"layers must be an integer, got {text!r}")
    if value < 0:
        raise ConfigurationError("layers must be >= 0")
    return float(value)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment settings; see ``CONFIG_KEYS`` for the file keys."""

    nx: int = 100
    N1: int = 20
    layers: float = 4.0
    dt: float = 0.0  # upper bound on the time step; 0 lets the CFL bound decide
    T: float = 1.0
    observe: tuple[float, ...] = ()
    scheme: str = "nlmc"
    problem: str = "transport"
    beta: float = 1.0
    swc: float = 0.2
    sor: float = 0.2
    muw: float = 1.0
    muo: float = 1.0
    corey_exponent: float = 2.0
    eps_scale: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    threshold: float | None = None
    log10: bool = False
    kappa_file: str | None = None
    kappa_seed: int = 1
    kappa_channels: int = 4
    kappa_background: float = 1.0
    kappa_channel: float = 1e4
    kappa_width: int = 2
    rate: float = 0.05
    pressure_dt: float = 0.5
    rebuild_every: int = 0
    sweep_layers: tuple[float, ...] = ()
    sweep_beta: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dt < 0:
            raise ConfigurationError("time.dt must be positive (or 0 for automatic)")
        if self.T <= 0 or (self.dt > 0 and self.T < self.dt):
            raise ConfigurationError("need time.T >= time.dt > 0")
        if self.beta < 1:
            raise ConfigurationError("beta must be >= 1")
        if not (self.swc >= 0 and self.sor >= 0 and self.swc + self.sor < 1):
            raise ConfigurationError("need 0 <= corey.swc + corey.sor < 1")
        if self.muw <= 0 or self.muo <= 0:
            raise ConfigurationError("viscosities must be positive")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.problem not in PROBLEMS:
            raise ConfigurationError(f"unknown problem {self.problem!r}; choose from {PROBLEMS}")
        if self.rebuild_every < 0:
            raise ConfigurationError("two_phase.rebuild_every must be >= 0")
        if self.nx <= 0 or self.N1 <= 0 or self.rate < 0 or self.pressure_dt <= 0:
            raise ConfigurationError("grid sizes and pressure_dt must be positive, source.rate >= 0")

    @property
    def observation_times(self) -> tuple[float, ...]:
        return self.observe if self.observe else (self.T,)

    def continuum_rule(self):
        if self.threshold is None:
            return None
        return threshold_rule(self.threshold, self.log10)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def as_items(self) -> list[tuple[str, str]]:
        """(file key, value) pairs for every setting, for run manifests."""
        out = []
        for key, (attr, _) in CONFIG_KEYS.items():
            value = getattr(self, attr)
            if isinstance(value, tuple):
                value = ",".join(_fmt(v) for v in value)
            out.append((key, _fmt(value)))
        return out


SCHEMES = ("fine", "baseline", "nlmc", "nlmc-nonlinear", "two-phase")
PROBLEMS = ("transport", "two-phase")


def _fmt(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if v is None:
        return "none"
    return str(v)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str) -> str | None:
    return None if text.strip().lower() in ("", "none") else text.strip()


CONFIG_KEYS: dict[str, tuple[str, Callable[[str], object]]] = {
    "grid.nx": ("nx", int),
    "grid.N1": ("N1", int),
    "oversample.layers": ("layers", parse_layers),
    "time.dt": ("dt", float),
    "time.T": ("T", float),
    "time.observe": ("observe", _floats),
    "time.pressure_dt": ("pressure_dt", float),
    "two_phase.rebuild_every": ("rebuild_every", int),
    "scheme": ("scheme", str.strip),
    "problem": ("problem", str.strip),
    "beta": ("beta", float),
    "corey.swc": ("swc", float),
    "corey.sor": ("sor", float),
    "corey.muw": ("muw", float),
    "corey.muo": ("muo", float),
    "corey.exponent": ("corey_exponent", float),
    "diffusion.eps_scale": ("eps_scale", float),
    "solver.newton_tol": ("newton_tol", float),
    "solver.newton_max_iter": ("newton_max_iter", int),
    "continuum.threshold": ("threshold", _opt_float),
    "continuum.log10": ("log10", _parse_bool),
    "kappa.file": ("kappa_file", _opt_str),
    "kappa.seed": ("kappa_seed", int),
    "kappa.channels": ("kappa_channels", int),
    "kappa.background": ("kappa_background", float),
    "kappa.channel": ("kappa_channel", float),
    "kappa.width": ("kappa_width", int),
    "source.rate": ("rate", float),
    "sweep.layers": ("sweep_layers", lambda t: tuple(parse_layers(x) for x in t.replace(",", " ").split())),
    "sweep.beta": ("sweep_beta", _floats),
}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        attr, conv = CONFIG_KEYS[key]
        try:
            values[attr] = conv(value)
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {exc}") from None
    base = base or ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    assert set(values) <= known
    return replace(base, **values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
