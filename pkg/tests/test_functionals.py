import math

import numpy as np
import pytest

from polymetric.environment import FieldSpec, field_at, log_mgf, split_seed
from polymetric.errors import ConfigError
from polymetric.functionals import (
    LocalizationReport,
    cluster_functional,
    clustering_mass,
    covering_radius,
    density_clustering_mass,
    expected_log_ratio,
    lifted_distance_bound,
    localization_functionals,
    mass_defect_stats,
    mean_expected_log_ratio,
    tent_density,
    update_sample,
)
from polymetric.measures import (
    GridMeasure,
    LayeredMeasure,
    PointMeasure,
    StepDistribution,
    convolve,
)
from polymetric.metric import metric_upper
from polymetric.polymer import PolymerConfig, run, step


def spec1d(variance=1.0):
    return FieldSpec(law="gaussian", variance=variance, dependence_range=1.0, dim=1)


def lattice_step():
    return StepDistribution(PointMeasure([[-1.0], [0.0], [1.0]], [1 / 3] * 3))


def delta(x=0.0, mass=1.0):
    return PointMeasure([[float(x)]], [mass])


# ---------------------------------------------------------------- update

def test_update_zero_measure_is_fixed_with_annealed_normalizer():
    us = update_sample(LayeredMeasure.zero(), lattice_step(), 1.5, spec1d(), 3)
    assert len(us.output) == 0
    assert us.normalizer == math.exp(log_mgf(spec1d(), 1.5))
    assert us.log_normalizer == log_mgf(spec1d(), 1.5)


def test_update_beta_zero_is_plain_convolution():
    mu = LayeredMeasure({0: delta(mass=0.3), 2: delta(4.0, 0.2)})
    us = update_sample(mu, lattice_step(), 0.0, spec1d(), 11)
    assert us.normalizer == 1.0
    assert us.output.keys() == [0, 2]
    for key in (0, 2):
        assert us.output.layers[key] == convolve(mu.layers[key],
                                                 lattice_step().measure)


def test_update_probability_measure_reproduces_recursion_step():
    rho = PointMeasure([[0.0], [2.0]], [0.3, 0.7])
    seed, beta = 99, 1.2
    us = update_sample(LayeredMeasure.single(rho), lattice_step(), beta,
                       spec1d(), seed)

    def field(points):
        return field_at(spec1d(), 1, points, split_seed(seed, "layer", 0))

    out, log_ratio = step(rho, lattice_step(), field, beta)
    assert us.output.layers[0] == out
    assert us.log_normalizer == log_ratio
    assert us.output.total_mass() == 1.0


def test_update_keeps_layer_keys_and_caps_mass():
    mu = LayeredMeasure({1: delta(mass=0.25), 5: delta(9.0, 0.25)})
    us = update_sample(mu, lattice_step(), 2.0, spec1d(), 17)
    assert us.output.keys() == [1, 5]
    assert us.output.total_mass() <= 1.0 + 1e-12
    assert us.normalizer > 0.0


def test_update_is_deterministic_in_seed():
    mu = LayeredMeasure.single(delta(mass=0.5))
    a = update_sample(mu, lattice_step(), 1.0, spec1d(), 21)
    b = update_sample(mu, lattice_step(), 1.0, spec1d(), 21)
    assert a.output == b.output and a.normalizer == b.normalizer
    c = update_sample(mu, lattice_step(), 1.0, spec1d(), 22)
    assert a.output != c.output


def test_update_validation():
    with pytest.raises(ConfigError, match="beta"):
        update_sample(LayeredMeasure.zero(), lattice_step(), -1.0, spec1d(), 0)
    planar = FieldSpec(law="gaussian", variance=1.0, dependence_range=1.0, dim=2)
    with pytest.raises(ConfigError, match="dimension"):
        update_sample(LayeredMeasure.single(delta()), lattice_step(), 1.0,
                      planar, 0)


def test_mass_defect_boundaries_exact():
    assert mass_defect_stats(LayeredMeasure.zero(), lattice_step(), 1.0,
                             spec1d(), 5) == (0.0, 0.0)
    prob = LayeredMeasure.single(delta())
    assert mass_defect_stats(prob, lattice_step(), 1.0, spec1d(), 5) == (1.0, 0.0)


def test_mass_defect_strict_supermartingale():
    half = LayeredMeasure.single(delta(mass=0.5))
    mean, se = mass_defect_stats(half, lattice_step(), 1.0, spec1d(), 400,
                                 master_seed=5)
    assert se > 0.0
    assert mean < 0.5 - 3.0 * se


def test_mass_defect_interior_needs_samples():
    half = LayeredMeasure.single(delta(mass=0.5))
    with pytest.raises(ConfigError, match="n_samples"):
        mass_defect_stats(half, lattice_step(), 1.0, spec1d(), 99)


# ---------------------------------------------------------------- log ratio

def test_log_ratio_zero_measure_is_annealed_exactly():
    got = expected_log_ratio(LayeredMeasure.zero(), lattice_step(), 1.3,
                             spec1d(), 4)
    assert got == (log_mgf(spec1d(), 1.3), 0.0)


def test_log_ratio_beta_zero_is_zero():
    mu = LayeredMeasure.single(delta(mass=0.7))
    assert expected_log_ratio(mu, lattice_step(), 0.0, spec1d(), 4) == (0.0, 0.0)


def test_log_ratio_strictly_below_annealed_on_probability_measures():
    prob = LayeredMeasure.single(PointMeasure([[0.0], [2.0]], [0.3, 0.7]))
    est, se = expected_log_ratio(prob, lattice_step(), 1.0, spec1d(), 2000,
                                 master_seed=1)
    c = log_mgf(spec1d(), 1.0)
    assert est < c - 3.0 * se


def test_log_ratio_within_documented_envelope():
    c = log_mgf(spec1d(), 1.0)
    floor = -(math.log(2.0) + log_mgf(spec1d(), -1.0))
    for mass in (0.2, 0.6, 1.0):
        mu = LayeredMeasure.single(delta(mass=mass))
        est, se = expected_log_ratio(mu, lattice_step(), 1.0, spec1d(), 500,
                                     master_seed=2)
        assert floor - 5.0 * se <= est <= c + 5.0 * se


def test_mean_log_ratio_beta_zero_matches_free_energy():
    cfg = PolymerConfig(beta=0.0, step_dist=lattice_step(), field=spec1d(),
                        n_steps=6)
    traj = run(cfg, seed=3, keep="all")
    assert mean_expected_log_ratio(traj, 0.0, spec1d(), 8) == (0.0, 0.0)


def test_mean_log_ratio_single_step_uses_initial_law():
    cfg = PolymerConfig(beta=1.0, step_dist=lattice_step(), field=spec1d(),
                        n_steps=1)
    traj = run(cfg, seed=4, keep="all")
    got = mean_expected_log_ratio(traj, 1.0, spec1d(), 64, master_seed=9)
    want = expected_log_ratio(LayeredMeasure.single(delta()), lattice_step(),
                              1.0, spec1d(), 64,
                              master_seed=split_seed(9, "step", 0))
    assert got == want


def test_mean_log_ratio_needs_stored_snapshots():
    cfg = PolymerConfig(beta=1.0, step_dist=lattice_step(), field=spec1d(),
                        n_steps=5)
    traj = run(cfg, seed=4, keep="last")
    with pytest.raises(ConfigError, match="keep"):
        mean_expected_log_ratio(traj, 1.0, spec1d(), 4)


# ---------------------------------------------------------------- clustering

def test_tent_density_atom_values():
    assert tent_density(delta(), [0.0], 2.0) == 1.0 / (2.0 * 2.0)
    assert tent_density(delta(), [1.0], 2.0) == 1.0 / (4.0 * 2.0)
    assert tent_density(PointMeasure.empty(1), [0.0], 1.0) == 0.0
    with pytest.raises(ConfigError, match="radius"):
        tent_density(delta(), [0.0], 0.0)


def test_tent_density_planar_atom():
    atom = PointMeasure([[1.0, -2.0]], [1.0])
    got = tent_density(atom, [1.0, -2.0], 0.5)
    assert got == pytest.approx(1.0 / (math.pi * 0.25), abs=1e-12)


def test_cluster_functional_saturates_at_a_heavy_atom():
    assert cluster_functional(delta(), 0.5, 0.4) == 1.0
    assert cluster_functional(delta(), 0.5, 10.0) == 0.0
    assert cluster_functional(PointMeasure.empty(1), 1.0, 0.1) == 0.0


def test_cluster_functional_sweep_matches_dense_matrix():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        pos = rng.uniform(-5, 5, (n, 1))
        w = rng.uniform(0.01, 0.1, n)
        m = PointMeasure(pos, w)
        r, eps = float(rng.uniform(0.2, 3.0)), float(rng.uniform(0.05, 0.5))
        fast = cluster_functional(m, r, eps)
        dist = np.abs(pos[:, 0][:, None] - pos[:, 0][None, :])
        dens = (np.clip(1.0 - dist / r, 0.0, None) * w[None, :]).sum(axis=1)
        dens /= 2.0 * r
        slow = float((w * np.clip((dens - eps) / eps, 0.0, 1.0)).sum())
        assert fast == pytest.approx(slow, abs=1e-12)


def test_clustering_mass_examples():
    assert clustering_mass(delta(), 0.1, 1.0) == 1.0
    spread = PointMeasure([[0.0], [10.0], [20.0], [30.0]], [0.25] * 4)
    # each unit ball sees mass 1/4; threshold 0.2 * 2 = 0.4 beats it
    assert clustering_mass(spread, 0.2, 1.0) == 0.0
    assert clustering_mass(spread, 0.01, 1.0) == 1.0


def test_clustering_mass_monotone_in_eps_with_full_mass_limit():
    rng = np.random.default_rng(3)
    pos = rng.uniform(-4, 4, (30, 1))
    w = rng.uniform(0.01, 0.03, 30)
    m = PointMeasure(pos, w)
    grid = [1e-9, 0.01, 0.05, 0.1, 0.5, 2.0]
    vals = [clustering_mass(m, eps, 0.7) for eps in grid]
    assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))
    assert vals[0] == pytest.approx(m.total_mass(), abs=1e-12)


def test_clustering_mass_planar_matches_direct_count():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    m = PointMeasure(pts, [0.3, 0.3, 0.4])
    # each close atom sees 0.6 in its unit ball, the far one sees 0.4
    assert clustering_mass(m, 0.35 / math.pi, 1.0) == 1.0
    assert clustering_mass(m, 0.5 / math.pi, 1.0) == pytest.approx(0.6)
    assert clustering_mass(m, 0.7 / math.pi, 1.0) == 0.0


def test_density_clustering_levels():
    h, e0 = 0.5, 0.4
    cells = np.array([2 * e0 * h] * 2 + [e0 / 2 * h] * 8)
    grid = GridMeasure([0.0], h, cells / cells.sum())
    # halves of the mass sit at densities 2e0 and e0/2 after normalization
    dens_hi = grid.values[0] / h
    assert density_clustering_mass(grid, dens_hi * 0.999) == pytest.approx(0.5)
    assert density_clustering_mass(grid, grid.values[-1] / h * 0.5) == 1.0
    assert density_clustering_mass(grid, dens_hi * 1.001) == 0.0
    with pytest.raises(ConfigError, match="grid"):
        density_clustering_mass(delta(), 0.1)
    with pytest.raises(ConfigError, match="eps"):
        density_clustering_mass(grid, 0.0)


# ---------------------------------------------------------------- localization

def test_covering_radius_of_a_point_mass_is_zero():
    assert covering_radius(LayeredMeasure.single(delta()), 0.3) == 0.0


def test_covering_radius_two_atom_value():
    pair = LayeredMeasure.single(PointMeasure([[0.0], [3.0]], [0.5, 0.5]))
    got = covering_radius(pair, 0.4, tol=1e-8)
    assert got == pytest.approx(1.1, abs=1e-6)


def test_covering_radius_monotone_in_delta():
    rng = np.random.default_rng(7)
    pos = rng.uniform(-6, 6, (8, 1))
    w = np.full(8, 1 / 8)
    mu = LayeredMeasure.single(PointMeasure(pos, w))
    radii = [covering_radius(mu, d) for d in (0.1, 0.3, 0.5, 0.7)]
    assert all(a >= b - 1e-6 for a, b in zip(radii, radii[1:]))


def test_covering_radius_infinite_when_mass_is_short():
    thin = LayeredMeasure.single(delta(mass=0.3))
    assert covering_radius(thin, 0.5) == math.inf
    # two layers of 0.45 each: no single layer reaches 0.55
    two = LayeredMeasure({0: delta(mass=0.45), 1: delta(9.0, 0.45)})
    assert covering_radius(two, 0.45) == math.inf


def test_localization_report_point_mass():
    rep = localization_functionals(LayeredMeasure.single(delta()),
                                   [0.3, 0.5], [0.5, 2.0])
    assert isinstance(rep, LocalizationReport)
    assert rep.covering_radii == (0.0, 0.0)
    assert rep.top_layer_mass == 1.0
    assert rep.layer_odds_sum == math.inf
    assert rep.ball_indicators == ((True, True), (True, True))


def test_localization_layer_statistics():
    two = LayeredMeasure({0: delta(mass=1 / 3), 1: delta(5.0, 1 / 3)})
    rep = localization_functionals(two, [0.5], [1.0])
    assert rep.top_layer_mass == pytest.approx(1 / 3, abs=1e-15)
    assert rep.layer_odds_sum == pytest.approx(1.0, abs=1e-12)


def test_localization_grid_validation():
    mu = LayeredMeasure.single(delta())
    with pytest.raises(ConfigError, match="nonempty"):
        localization_functionals(mu, [], [1.0])
    with pytest.raises(ConfigError, match="delta"):
        localization_functionals(mu, [1.5], [1.0])
    with pytest.raises(ConfigError, match="radii"):
        localization_functionals(mu, [0.5], [0.0])


def test_heavy_ball_sandwich_around_covering_radius():
    # ball(K) mass > 1-delta forces radius < K forces ball(K+1) mass > 1-delta
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(2, 7))
        pos = np.round(rng.uniform(-5, 5, (n, 1)), 2)
        w = rng.uniform(0.1, 1.0, n)
        mu = LayeredMeasure.single(PointMeasure(pos, w / w.sum()))
        delta_, k = float(rng.uniform(0.15, 0.6)), float(rng.uniform(0.5, 4.0))
        rep = localization_functionals(mu, [delta_], [k, k + 1.0], tol=1e-9)
        inner, outer = rep.ball_indicators[0]
        w_rad = rep.covering_radii[0]
        if inner:
            assert w_rad < k
        if w_rad < k:
            assert outer


# ---------------------------------------------------------------- lifted bound

def test_lifted_bound_beta_zero_is_deterministic():
    cfg = PolymerConfig(beta=0.0, step_dist=lattice_step(), field=spec1d(),
                        n_steps=3)
    traj = run(cfg, seed=2, keep="all")
    got = lifted_distance_bound(traj, 0.0, spec1d())
    rhos = [cfg.initial_measure(), traj.snapshots[1], traj.snapshots[2]]
    want = np.mean([
        metric_upper(rho, convolve(rho, lattice_step().measure)).value
        for rho in rhos
    ])
    assert got == pytest.approx(float(want), abs=1e-12)
    again = lifted_distance_bound(traj, 0.0, spec1d(), n_samples=4, master_seed=8)
    assert got == pytest.approx(again, abs=1e-12)


def test_lifted_bound_single_step_and_cap():
    cfg = PolymerConfig(beta=1.0, step_dist=lattice_step(), field=spec1d(),
                        n_steps=1)
    traj = run(cfg, seed=6, keep="all")
    got = lifted_distance_bound(traj, 1.0, spec1d(), master_seed=13)
    us = update_sample(LayeredMeasure.single(delta()), lattice_step(), 1.0,
                       spec1d(), split_seed(13, "lift", 0, 0))
    want = metric_upper(LayeredMeasure.single(delta()), us.output).value
    assert got == pytest.approx(want, abs=1e-12)
    assert 0.0 <= got <= 2.0


def test_lifted_bound_validation():
    cfg = PolymerConfig(beta=1.0, step_dist=lattice_step(), field=spec1d(),
                        n_steps=4)
    traj = run(cfg, seed=6, keep="all")
    with pytest.raises(ConfigError, match="n_samples"):
        lifted_distance_bound(traj, 1.0, spec1d(), n_samples=0)
    short = run(PolymerConfig(beta=1.0, step_dist=lattice_step(),
                              field=spec1d(), n_steps=0), seed=1)
    with pytest.raises(ConfigError, match="step"):
        lifted_distance_bound(short, 1.0, spec1d())
