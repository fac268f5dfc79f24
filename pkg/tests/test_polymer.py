import math

import numpy as np
import pytest

from polymetric.environment import FieldSpec, Window, sample_field
from polymetric.errors import ConfigError, NumericContractError
from polymetric.measures import GridMeasure, PointMeasure, StepDistribution, convolve, dumps
from polymetric.polymer import (
    PolymerConfig,
    Trajectory,
    estimate_p_and_lyapunov,
    free_energy,
    path_sum_oracle,
    run,
    step,
)


def lattice_step():
    return StepDistribution(PointMeasure([[-1.0], [0.0], [1.0]], [1 / 3, 1 / 3, 1 / 3]))


def gauss_spec(variance=1.0, dep=1.0):
    return FieldSpec(law="gaussian", variance=variance, dependence_range=dep, dim=1)


def tri_grid_step(h=0.25):
    vals = np.array([1, 2, 3, 4, 3, 2, 1], float)
    return StepDistribution(GridMeasure([-3 * h], h, vals / vals.sum()))


def config(beta=1.0, n=5, **kw):
    return PolymerConfig(beta=beta, step_dist=lattice_step(), field=gauss_spec(),
                         n_steps=n, **kw)


# ---------------------------------------------------------------- config

def test_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="beta"):
        config(beta=-0.5)
    with pytest.raises(ConfigError, match="n_steps"):
        config(n=-1)
    with pytest.raises(ConfigError, match="mode"):
        config(mode="exactish")
    with pytest.raises(ConfigError, match="dimension"):
        PolymerConfig(beta=1.0, step_dist=lattice_step(),
                      field=FieldSpec(law="gaussian", variance=1.0,
                                      dependence_range=1.0, dim=2), n_steps=3)


def test_config_grid_mode_alignment():
    with pytest.raises(ConfigError, match="spacing"):
        PolymerConfig(beta=1.0, step_dist=tri_grid_step(), field=gauss_spec(),
                      n_steps=3, mode="grid")
    # mesh is 1/8 by default; 0.3 is not a multiple
    with pytest.raises(ConfigError, match="mesh"):
        PolymerConfig(beta=1.0, step_dist=tri_grid_step(0.3), field=gauss_spec(),
                      n_steps=3, mode="grid", spacing=0.3)
    with pytest.raises(ConfigError, match="lattice"):
        PolymerConfig(beta=1.0, step_dist=lattice_step(), field=gauss_spec(),
                      n_steps=3, mode="grid", spacing=0.75)


def test_config_window_growth_must_cover_step():
    with pytest.raises(ConfigError, match="window_growth"):
        PolymerConfig(beta=1.0, step_dist=tri_grid_step(), field=gauss_spec(),
                      n_steps=3, mode="grid", spacing=0.25, window_growth=2)


def test_config_bounded_law_tilt_domain():
    spec = FieldSpec(law="bounded", variance=1.0, dependence_range=1.0, dim=1,
                     kappa_max=1.5)
    with pytest.raises(ConfigError, match="kappa_max"):
        PolymerConfig(beta=1.0, step_dist=lattice_step(), field=spec, n_steps=3)
    PolymerConfig(beta=0.75, step_dist=lattice_step(), field=spec, n_steps=3)


# ---------------------------------------------------------------- step

def test_step_beta_zero_is_plain_convolution():
    rho = PointMeasure([[0.0]], [1.0])
    out, lr = step(rho, lattice_step(), None, 0.0)
    assert lr == 0.0
    assert np.array_equal(out.positions, [[-1.0], [0.0], [1.0]])
    assert out.total_mass() == pytest.approx(1.0, abs=1e-15)


def test_step_two_atom_hand_value():
    half = StepDistribution(PointMeasure([[-1.0], [1.0]], [0.5, 0.5]))
    a, b, beta = 0.7, -0.2, 2.0

    def field(points):
        return np.where(points[:, 0] < 0, a, b)

    out, lr = step(PointMeasure([[0.0]], [1.0]), half, field, beta)
    want = math.log(0.5 * math.exp(beta * a) + 0.5 * math.exp(beta * b))
    assert lr == pytest.approx(want, abs=1e-13)
    w_minus = math.exp(beta * a) / (math.exp(beta * a) + math.exp(beta * b))
    assert out.weights[0] == pytest.approx(w_minus, abs=1e-13)
    assert out.total_mass() == pytest.approx(1.0, abs=1e-12)


def test_step_translation_covariance():
    rho = PointMeasure([[0.0], [1.0]], [0.25, 0.75])
    z = 4.0

    def field(points):
        return np.sin(points[:, 0])

    out, lr = step(rho, lattice_step(), field, 1.3)
    out2, lr2 = step(rho.translated([z]), lattice_step(),
                     lambda p: field(p - z), 1.3)
    assert lr2 == lr
    assert np.array_equal(out2.positions, out.positions + z)
    assert np.allclose(out2.weights, out.weights, atol=1e-15)


def test_step_grid_window_error_names_step():
    h = 0.25
    rho = GridMeasure([0.0], h, np.ones(1))
    conv = convolve(rho, tri_grid_step(h))
    small = Window((float(conv.origin[0]),), (conv.shape[0] - 2,), h)
    fs = sample_field(gauss_spec(), 7, small, seed=1)
    with pytest.raises(NumericContractError, match="step 7"):
        step(rho, tri_grid_step(h), fs, 1.0, step_index=7)


def test_step_grid_normalizes_and_reports_ratio():
    h = 0.25
    rho = GridMeasure([0.0], h, np.ones(1))
    conv = convolve(rho, tri_grid_step(h))
    fs = sample_field(gauss_spec(), 1, Window((float(conv.origin[0]),),
                                              conv.shape, h), seed=3)
    out, lr = step(rho, tri_grid_step(h), fs, 1.0)
    assert out.total_mass() == pytest.approx(1.0, abs=1e-12)
    want = math.log(float((conv.values * np.exp(fs.values)).sum()))
    assert lr == pytest.approx(want, abs=1e-10)


# ---------------------------------------------------------------- run

def test_run_beta_zero_gives_step_law_powers():
    n = 5
    traj = run(config(beta=0.0, n=n), seed=9)
    assert traj.log_ratios.sum() == 0.0
    ref_w = np.array([1.0])
    for _ in range(n):
        ref_w = np.convolve(ref_w, np.full(3, 1 / 3))
    rho = traj.snapshots[n]
    assert np.array_equal(rho.positions[:, 0], np.arange(-n, n + 1, dtype=float))
    assert np.allclose(rho.weights, ref_w / ref_w.sum(), atol=1e-14)


def test_run_is_deterministic_in_seed():
    t1 = run(config(n=6), seed=42)
    t2 = run(config(n=6), seed=42)
    assert np.array_equal(t1.log_ratios, t2.log_ratios)
    assert dumps(t1.snapshots[6]) == dumps(t2.snapshots[6])
    t3 = run(config(n=6), seed=43)
    assert not np.array_equal(t1.log_ratios, t3.log_ratios)


def test_run_zero_steps():
    traj = run(config(n=0), seed=1)
    assert traj.n == 0
    assert 0 in traj.snapshots and traj.snapshots[0].total_mass() == 1.0
    with pytest.raises(ConfigError, match="at least one step"):
        free_energy(traj)


def test_run_agrees_with_path_enumeration():
    for seed in (1, 2, 3, 4, 5):
        for n in (1, 3, 5):
            cfg = config(beta=1.2, n=n)
            lhs = n * free_energy(run(cfg, seed, keep="none"))
            rhs = path_sum_oracle(cfg, n, seed)
            assert lhs == pytest.approx(rhs, abs=1e-10)


def test_run_snapshots_stay_normalized():
    traj = run(config(beta=2.0, n=12), seed=5, keep="all")
    assert set(traj.snapshots) == set(range(1, 13))
    for rho in traj.snapshots.values():
        assert abs(rho.total_mass() - 1.0) <= 1e-12


def test_run_observer_streams_every_step():
    seen = []
    run(config(n=4), seed=2, observer=lambda i, rho, lr: seen.append((i, lr)),
        keep="none")
    assert [i for i, _ in seen] == [1, 2, 3, 4]


def test_run_keep_subset():
    traj = run(config(n=6), seed=2, keep={2, 5})
    assert set(traj.snapshots) == {2, 5}


def test_run_prune_logs_removed_mass():
    # incommensurate steps: supports never merge, so pruning must kick in
    messy = StepDistribution(PointMeasure([[0.0], [1.0], [math.sqrt(2)]],
                                          [0.4, 0.3, 0.3]))
    cfg = PolymerConfig(beta=0.5, step_dist=messy, field=gauss_spec(),
                        n_steps=8, prune_tol=0.05)
    traj = run(cfg, seed=3)
    assert traj.pruned_mass > 0.0
    assert traj.snapshots[8].total_mass() == pytest.approx(1.0, abs=1e-12)
    exact = PolymerConfig(beta=0.5, step_dist=messy, field=gauss_spec(), n_steps=8)
    drift = abs(free_energy(run(exact, 3)) - free_energy(traj))
    assert drift <= 0.05


def test_run_atom_cap_is_a_hard_error():
    messy = StepDistribution(PointMeasure([[0.0], [1.0], [math.sqrt(2)]],
                                          [0.4, 0.3, 0.3]))
    cfg = PolymerConfig(beta=0.5, step_dist=messy, field=gauss_spec(),
                        n_steps=8, max_atoms=30)
    with pytest.raises(NumericContractError, match="max_atoms"):
        run(cfg, seed=3)


def test_run_policy_window_matches_exact_cover():
    base = dict(beta=1.0, step_dist=tri_grid_step(), field=gauss_spec(0.25),
                n_steps=15, mode="grid", spacing=0.25)
    t_auto = run(PolymerConfig(**base), seed=4)
    t_grown = run(PolymerConfig(**base, window_growth=5), seed=4)
    assert np.array_equal(t_auto.log_ratios, t_grown.log_ratios)


def test_point_and_grid_modes_agree_on_the_lattice():
    base = dict(beta=0.8, field=gauss_spec(), n_steps=12)
    t_point = run(PolymerConfig(step_dist=lattice_step(), **base), seed=6)
    t_grid = run(PolymerConfig(step_dist=lattice_step(), mode="grid", spacing=1.0,
                               **base), seed=6)
    assert np.allclose(t_point.log_ratios, t_grid.log_ratios, atol=1e-12)
    pm, dropped = t_grid.snapshots[12].to_point_measure()
    assert dropped == 0.0
    ref = t_point.snapshots[12]
    assert np.allclose(pm.weights, ref.weights, atol=1e-12)


def test_free_energy_below_max_ratio():
    traj = run(config(beta=1.5, n=30), seed=8, keep="none")
    assert free_energy(traj) <= traj.log_ratios.max() + 1e-15


def test_trajectory_validates_snapshots():
    bad = PointMeasure([[0.0]], [0.5])
    with pytest.raises(NumericContractError, match="normalized"):
        Trajectory(config(n=1), 0, [0.1], {1: bad})


# ---------------------------------------------------------------- estimates

def test_estimate_statistics_layout():
    est = estimate_p_and_lyapunov(config(), n=20, n_seeds=5, master_seed=7)
    assert est.p_hat == pytest.approx(np.mean(est.f_samples), abs=1e-15)
    assert est.lyapunov_hat == pytest.approx(est.annealed - est.p_hat, abs=1e-15)
    assert est.var_f == pytest.approx(np.var(est.f_samples, ddof=1), abs=1e-15)
    assert est.p_stderr == pytest.approx(math.sqrt(est.var_f / 5), abs=1e-15)
    with pytest.raises(ConfigError, match="n_seeds"):
        estimate_p_and_lyapunov(config(), n=20, n_seeds=1)


def test_estimate_beta_zero_exact():
    est = estimate_p_and_lyapunov(config(beta=0.0), n=15, n_seeds=3)
    assert est.p_hat == 0.0 and est.lyapunov_hat == 0.0 and est.p_stderr == 0.0


def test_estimate_annealed_bound():
    # Jensen: mean F_n stays below the annealed value, up to noise
    est = estimate_p_and_lyapunov(config(beta=1.0), n=60, n_seeds=6, master_seed=3)
    assert est.p_hat <= est.annealed + 3.0 * est.p_stderr
    assert est.lyapunov_hat >= -3.0 * est.p_stderr


# ---------------------------------------------------------------- oracle

def test_oracle_validations():
    with pytest.raises(ConfigError, match="1 <= n <= 6"):
        path_sum_oracle(config(), 7, seed=1)
    wide = StepDistribution(PointMeasure(np.arange(12.0).reshape(-1, 1),
                                         np.full(12, 1 / 12)))
    cfg = PolymerConfig(beta=1.0, step_dist=wide, field=gauss_spec(), n_steps=6)
    with pytest.raises(ConfigError, match="cap"):
        path_sum_oracle(cfg, 6, seed=1)


def test_oracle_beta_zero():
    assert path_sum_oracle(config(beta=0.0), 4, seed=2) == 0.0


def test_oracle_single_step_closed_form():
    from polymetric.environment import field_at

    cfg = config(beta=1.7, n=1)
    got = path_sum_oracle(cfg, 1, seed=11)
    pos = cfg.step_dist.measure.positions
    x = field_at(cfg.field, 1, pos, 11)
    want = math.log(float((cfg.step_dist.measure.weights * np.exp(1.7 * x)).sum()))
    assert got == pytest.approx(want, abs=1e-12)
