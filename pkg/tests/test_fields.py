import numpy as np
import pytest
from hypothesis import given, strategies as st

from upscale.fields import (
    CONFIG_KEYS,
    ConfigurationError,
    ExperimentConfig,
    FieldFormatError,
    generate_channelized,
    identify_continua,
    load_config,
    load_permeability,
    parse_config,
    read_snapshot,
    save_permeability,
    threshold_rule,
    write_snapshot,
)
from upscale.grid import build_grids, oversample


def test_snapshot_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 6)) * 10.0 ** rng.integers(-200, 200, (4, 6))
    write_snapshot(a, tmp_path / "s.txt")
    b = read_snapshot(tmp_path / "s.txt")
    assert b.shape == a.shape
    assert np.array_equal(a, b)


def test_file_layout_is_row_major_y_outer(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    write_snapshot(a, tmp_path / "s.txt")
    lines = (tmp_path / "s.txt").read_text().split("\n")
    assert lines[0].split() == ["3", "2"]
    assert [float(v) for v in lines[1].split()] == [0.0, 1.0, 2.0]


def test_truncated_file(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("3 2\n1 2 3\n4 5\n")
    with pytest.raises(FieldFormatError):
        read_snapshot(p)


def test_permeability_checks(tmp_path):
    fg, _ = build_grids(4, 2)
    k = np.ones((4, 4))
    k[2, 1] = -1.0
    save_permeability(k, tmp_path / "k.txt")
    with pytest.raises(FieldFormatError, match=r"ix=1, iy=2"):
        load_permeability(tmp_path / "k.txt", fg)
    save_permeability(np.ones((4, 5)), tmp_path / "k2.txt")
    with pytest.raises(FieldFormatError):
        load_permeability(tmp_path / "k2.txt", fg)


def test_channel_generator_is_deterministic_and_binary():
    fg, _ = build_grids(40, 8)
    a = generate_channelized(fg, 3, 4, 1.0, 1e4, 2)
    b = generate_channelized(fg, 3, 4, 1.0, 1e4, 2)
    assert np.array_equal(a, b)
    assert set(np.unique(a)) == {1.0, 1e4}
    assert 0.05 < np.mean(a > 1) < 0.6
    with pytest.raises(ConfigurationError):
        generate_channelized(fg, 3, 4, 1.0, 0.5, 2)


def test_continua_volumes_sum_to_coarse_area():
    fg, cg = build_grids(20, 4)
    kappa = generate_channelized(fg, 1, 2, 1.0, 1e4, 2)
    part = identify_continua(kappa, cg, threshold_rule(1e3))
    for i in range(cg.n_cells):
        dofs = part.dofs_in_coarse(i)
        assert np.isclose(part.volumes[dofs].sum(), cg.H**2)
        assert all(part.dofs[d][0] == i for d in dofs)
    # empty continua are dropped
    hom = identify_continua(np.ones((20, 20)), cg, threshold_rule(1e3))
    assert hom.n_dofs == cg.n_cells


def test_log10_threshold():
    fg, cg = build_grids(4, 2)
    kappa = np.full((4, 4), 10**0.5)
    kappa[0, 0] = 10**0.9
    part = identify_continua(kappa, cg, threshold_rule(0.8, log10=True))
    assert part.n_dofs == 5
    assert part.dofs[0] == (0, 1)


def test_average_prolong_round_trip(channel20):
    *_, part = channel20
    U = np.random.default_rng(1).uniform(size=part.n_dofs)
    assert np.allclose(part.average(part.prolong(U)), U, atol=1e-14)


def test_dofs_in_region_cover_region(channel20):
    fg, cg, *_, part = channel20
    r = oversample(cg, 5, 1)
    dofs = part.dofs_in_region(r)
    assert set(part.dof_of_fine.ravel()[r.fine_cells]) == set(dofs.tolist())


def test_parse_config_all_keys(tmp_path):
    text = """
    # comment
    grid.nx = 40
    grid.N1 = 8
    oversample.layers = inf
    time.dt = 0.01
    time.T = 2
    time.observe = 1, 2
    scheme = nlmc-nonlinear
    beta = 2
    corey.swc = 0.1
    corey.sor = 0.15
    corey.muw = 1
    corey.muo = 2
    diffusion.eps_scale = 0.5
    solver.newton_tol = 1e-9
    solver.newton_max_iter = 20
    continuum.threshold = 1000
    continuum.log10 = false
    sweep.layers = 4, 6, inf
    """
    p = tmp_path / "c.cfg"
    p.write_text(text)
    cfg = load_config(p)
    assert cfg.nx == 40 and cfg.layers == float("inf") and cfg.observation_times == (1.0, 2.0)
    assert cfg.scheme == "nlmc-nonlinear" and cfg.beta == 2.0 and cfg.muo == 2.0
    assert cfg.threshold == 1000.0 and cfg.log10 is False
    assert cfg.sweep_layers == (4.0, 6.0, float("inf"))


@pytest.mark.parametrize(
    "text",
    ["nosuch.key = 1", "grid.nx = abc", "beta = 0.5", "scheme = magic", "corey.swc = 0.6\ncorey.sor = 0.5", "garbage"],
)
def test_parse_config_errors(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_manifest_items_cover_every_key():
    items = dict(ExperimentConfig().as_items())
    assert set(items) == set(CONFIG_KEYS)
    again = parse_config("\n".join(f"{k} = {v}" for k, v in items.items()))
    assert again == ExperimentConfig()


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_threshold_rule_splits_by_value(a, b):
    fg, cg = build_grids(2, 1)
    kappa = np.array([[a, b], [a, b]])
    part = identify_continua(kappa, cg, threshold_rule(10.0))
    assert part.n_dofs == (1 if (a > 10) == (b > 10) else 2)


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.cfg"))
    assert files
    for f in files:
        cfg = load_config(f)
        assert cfg.eps_scale < 1.0 and cfg.nx % cfg.N1 == 0
