"""Experiment drivers: build the setup of a config and run each scheme against the fine reference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from upscale.fields import (
    ConfigurationError,
    ContinuumPartition,
    ExperimentConfig,
    generate_channelized,
    identify_continua,
    load_permeability,
)
from upscale.fine import Corey, FluxField, PowerFlux, quarter_five_spot, run_transport_fine, run_two_phase_fine, solve_darcy
from upscale.grid import CoarseGrid, FineGrid, build_grids
from upscale.linear import build_transport_basis, fv_baseline_system, run_coarse, transport_system
from upscale.nonlinear import NonlinearTransport, run_fv_nonlinear
from upscale.report import ErrorReport
from upscale.two_phase import frozen_basis, run_two_phase_coarse

log = logging.getLogger(__name__)

COARSE_SCHEMES = ("baseline", "nlmc", "nlmc-nonlinear", "two-phase")


@dataclass
class Setup:
    """Grids, permeability, sources, initial velocity and continua of a config."""

    config: ExperimentConfig
    fine: FineGrid
    coarse: CoarseGrid
    kappa: np.ndarray
    q: np.ndarray
    partition: ContinuumPartition

    @cached_property
    def flux(self) -> FluxField:
        """Velocity of the initial pressure solve."""
        mob = self.corey.total(self.corey.s_min) if self.two_phase else 1.0
        return solve_darcy(self.fine, self.kappa, float(mob), self.q)[1]

    @property
    def two_phase(self) -> bool:
        return self.config.problem == "two-phase"

    @cached_property
    def corey(self) -> Corey:
        c = self.config
        return Corey(c.swc, c.sor, c.muw, c.muo, c.corey_exponent)

    @property
    def dt_max(self) -> float:
        return self.config.dt if self.config.dt > 0 else math.inf


def build_setup(cfg: ExperimentConfig) -> Setup:
    fg, cg = build_grids(cfg.nx, cfg.N1)
    if cfg.kappa_file:
        kappa = load_permeability(cfg.kappa_file, fg)
    else:
        kappa = generate_channelized(
            fg, cfg.kappa_seed, cfg.kappa_channels, cfg.kappa_background, cfg.kappa_channel, cfg.kappa_width
        )
    q = quarter_five_spot(fg, cfg.rate)
    part = identify_continua(kappa, cg, cfg.continuum_rule())
    return Setup(cfg, fg, cg, kappa, q, part)


def fine_reference(setup: Setup) -> dict[float, np.ndarray]:
    """Fine saturation snapshots at the observation times."""
    cfg = setup.config
    times = cfg.observation_times
    if setup.two_phase:
        states = run_two_phase_fine(
            setup.fine, setup.kappa, setup.corey, setup.q, times, cfg.pressure_dt, setup.dt_max
        )
        return {s.t: s.S for s in states}
    S0 = np.zeros((setup.fine.ny, setup.fine.nx))
    return run_transport_fine(setup.flux, S0, PowerFlux(cfg.beta), times, setup.q, 1.0, setup.dt_max)


def _coarse_states(setup: Setup, scheme: str, layers: float, beta: float) -> tuple[dict, dict]:
    cfg = setup.config
    part = setup.partition
    times = cfg.observation_times
    info: dict = {}
    if setup.two_phase:
        if scheme not in ("baseline", "two-phase", "nlmc"):
            raise ConfigurationError(f"scheme {scheme!r} is not available for the two-phase problem")
        basis = None
        if scheme != "baseline":
            basis = frozen_basis(
                setup.fine, setup.kappa, setup.corey, setup.q, part, layers, cfg.eps_scale
            )
            info["max_constraint_residual"] = basis.max_residual()
        res = run_two_phase_coarse(
            setup.fine, setup.kappa, setup.corey, setup.q, part, times, basis, cfg.pressure_dt, setup.dt_max,
            rebuild_every=cfg.rebuild_every, eps_scale=cfg.eps_scale,
        )
        info["max_clamp"] = res.max_clamp
        return res.states, info
    U0 = np.zeros(part.n_dofs)
    flux_fn = PowerFlux(beta)
    if scheme == "baseline":
        if beta == 1.0:
            return run_coarse(fv_baseline_system(setup.flux, part, setup.q), U0, times, setup.dt_max), info
        return run_fv_nonlinear(setup.flux, part, flux_fn, U0, times, setup.q, dt_max=setup.dt_max), info
    if scheme == "nlmc":
        if beta != 1.0:
            raise ConfigurationError("linear NLMC needs beta = 1; use nlmc-nonlinear")
        basis = build_transport_basis(
            setup.flux, setup.coarse, part, layers, q=setup.q, eps_scale=cfg.eps_scale
        )
        info["max_constraint_residual"] = basis.max_residual()
        return run_coarse(transport_system(basis, setup.flux, setup.q), U0, times, setup.dt_max), info
    if scheme == "nlmc-nonlinear":
        model = NonlinearTransport(
            setup.flux, part, layers, flux_fn, setup.q, eps_scale=cfg.eps_scale,
            newton_tol=cfg.newton_tol, newton_max_iter=cfg.newton_max_iter,
        )
        states, worst = model.run(U0, times, setup.dt_max)
        info["max_constraint_residual"] = worst
        return states, info
    if scheme == "two-phase":
        raise ConfigurationError("scheme 'two-phase' needs problem = two-phase")
    raise ConfigurationError(f"unknown coarse scheme {scheme!r}")


def run_scheme(
    setup: Setup,
    scheme: str,
    reference: dict[float, np.ndarray] | None = None,
    layers: float | None = None,
    beta: float | None = None,
) -> tuple[dict[float, np.ndarray], ErrorReport]:
    """Run one coarse scheme (or ``fine``) and report its errors against the fine averages."""
    cfg = setup.config
    layers = cfg.layers if layers is None else layers
    beta = cfg.beta if beta is None else beta
    part = setup.partition
    if reference is None:
        reference = fine_reference(setup if beta == cfg.beta else _with_beta(setup, beta))
    ref = {t: part.average(S) for t, S in reference.items()}
    t0 = time.perf_counter()
    if scheme == "fine":
        states, info = ref, {}
    else:
        states, info = _coarse_states(setup, scheme, layers, beta)
    runtime = time.perf_counter() - t0
    uses_layers = scheme not in ("fine", "baseline")
    rep = ErrorReport.from_states(
        scheme, states, ref, part.volumes,
        layers=layers if uses_layers else None,
        beta=None if setup.two_phase else beta,
        runtime_s=runtime,
        extra=info,
    )
    log.info("%s layers=%s beta=%s errors=%s", scheme, rep.layers, rep.beta, rep.errors)
    return states, rep


def _with_beta(setup: Setup, beta: float) -> Setup:
    return Setup(setup.config.with_(beta=beta), setup.fine, setup.coarse, setup.kappa, setup.q, setup.partition)


def run_linear_experiment(cfg: ExperimentConfig, scheme: str = "nlmc"):
    setup = build_setup(cfg)
    return run_scheme(setup, scheme)


def run_nonlinear_experiment(cfg: ExperimentConfig):
    """Nonlinear NLMC states and report for ``λ(S) = S^β``."""
    setup = build_setup(cfg)
    return run_scheme(setup, "nlmc-nonlinear")


def run_two_phase_experiment(cfg: ExperimentConfig, scheme: str = "two-phase"):
    setup = build_setup(cfg.with_(problem="two-phase"))
    return run_scheme(setup, scheme)


def sweep(cfg: ExperimentConfig, scheme: str | None = None) -> list[ErrorReport]:
    """Baseline plus ``scheme`` over every (β, layers) of the sweep lists."""
    setup = build_setup(cfg)
    scheme = scheme or _default_sweep_scheme(cfg)
    layer_list = cfg.sweep_layers or (cfg.layers,)
    beta_list = cfg.sweep_beta or (cfg.beta,)
    if setup.two_phase:
        beta_list = (cfg.beta,)
    reports = []
    for beta in beta_list:
        ref = fine_reference(_with_beta(setup, beta))
        reports.append(run_scheme(setup, "baseline", ref, beta=beta)[1])
        for layers in layer_list:
            reports.append(run_scheme(setup, scheme, ref, layers=layers, beta=beta)[1])
    return reports


def _default_sweep_scheme(cfg: ExperimentConfig) -> str:
    if cfg.problem == "two-phase":
        return "two-phase"
    if cfg.scheme in COARSE_SCHEMES and cfg.scheme != "baseline":
        return cfg.scheme
    return "nlmc" if not cfg.sweep_beta and cfg.beta == 1.0 else "nlmc-nonlinear"
