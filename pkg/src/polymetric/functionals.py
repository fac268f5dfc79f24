"""One-step update sampling, log-ratio statistics, and localization reports.

The update map sends a layered subprobability measure to a random one:
convolve each layer with the step law, tilt by an independent field copy
per layer, and divide by a normalizer that charges the missing mass
1 - total at the annealed rate. Everything downstream (defect statistics,
expected log ratios, clustering and covering diagnostics) is built on it.
"""

import dataclasses
import math

import numpy as np
from scipy.special import logsumexp

from .environment import FieldSpec, field_at, log_mgf, split_seed
from .errors import ConfigError, NumericContractError
from .measures import (
    GridMeasure,
    LayeredMeasure,
    PointMeasure,
    StepDistribution,
    convolve,
    heaviest_ball,
)
from .metric import concentration, metric_upper

_MASS_TOL = 1e-12
_PAIRWISE_CAP = 4096  # dense distance matrices beyond this are refused


def _unit_ball_volume(d: int) -> float:
    if d == 1:
        return 2.0
    if d == 2:
        return math.pi
    if d == 3:
        return 4.0 * math.pi / 3.0
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def _as_layered(mu) -> LayeredMeasure:
    if isinstance(mu, LayeredMeasure):
        return mu
    if isinstance(mu, (PointMeasure, GridMeasure)):
        if mu.total_mass() <= 0.0:
            return LayeredMeasure.zero()
        return LayeredMeasure.single(mu)
    raise ConfigError("expected a point, grid, or layered measure")


def _support(m):
    """Positions and weights of a plain measure; grids contribute cell centers."""
    if isinstance(m, GridMeasure):
        return m.cell_centers(), m.values.ravel()
    if isinstance(m, PointMeasure):
        return m.positions, m.weights
    raise ConfigError("this functional acts on a single (non-layered) measure")


# ---------------------------------------------------------------------------
# the one-step update


@dataclasses.dataclass(frozen=True)
class UpdateSample:
    """One draw of the updated measure together with its normalizer."""

    input: LayeredMeasure
    output: LayeredMeasure
    normalizer: float
    log_normalizer: float
    seed: int

    def __post_init__(self):
        if not (self.normalizer > 0.0 and math.isfinite(self.normalizer)):
            raise NumericContractError("normalizer must be positive and finite")
        if self.output.total_mass() > 1.0 + _MASS_TOL:
            raise NumericContractError("updated measure must stay subprobability")
        if not set(self.output.keys()) <= set(self.input.keys()):
            raise NumericContractError("update must not invent layers")


def _convolved_parts(mu: LayeredMeasure, step_dist: StepDistribution):
    parts = []
    for ordinal, (key, layer) in enumerate(mu.items()):
        conv = convolve(layer, step_dist.measure)
        pts, w = _support(conv)
        parts.append((ordinal, key, conv, pts, w))
    return parts


def _draw_fields(parts, spec, seed):
    # independent field copy per layer, keyed by the layer's ordinal
    return [
        field_at(spec, 1, pts, split_seed(seed, "layer", ordinal))
        for ordinal, _key, _conv, pts, _w in parts
    ]


def _log_normalizer(parts, vals, defect, beta, c_beta):
    logits = np.concatenate([beta * v for v in vals])
    weights = np.concatenate([p[4] for p in parts])
    # subnormal weights break logsumexp's internal scaling; their
    # contribution to the normalizer is below representable precision
    weights = np.where(weights >= np.finfo(np.float64).tiny, weights, 0.0)
    if defect > 0.0:
        logits = np.append(logits, c_beta)
        weights = np.append(weights, defect)
    return float(logsumexp(logits, b=weights))


def update_sample(mu, step_dist: StepDistribution, beta: float,
                  field_spec: FieldSpec, seed) -> UpdateSample:
    """Sample the one-step update of mu under a fresh field copy.

    Each layer is convolved with the step law and reweighted by
    exp(beta * field); the shared normalizer adds (1 - total mass) at the
    annealed rate exp(c(beta)), so the zero measure stays zero and a
    probability measure stays a probability measure.
    """
    mu = _as_layered(mu)
    if not (math.isfinite(beta) and beta >= 0.0):
        raise ConfigError("beta must be finite and >= 0")
    if mu.dim is not None and mu.dim != field_spec.dim:
        raise ConfigError("measure and field dimension mismatch")
    if step_dist.dim != field_spec.dim:
        raise ConfigError("step and field dimension mismatch")
    seed = int(seed)

    if len(mu) == 0:
        c = log_mgf(field_spec, beta)
        return UpdateSample(mu, LayeredMeasure.zero(), math.exp(c), c, seed)

    if beta == 0.0:
        # every tilt is 1: the update is the plain convolution, normalizer 1
        layers = {key: conv for _o, key, conv, _p, _w in
                  _convolved_parts(mu, step_dist)}
        return UpdateSample(mu, LayeredMeasure(layers), 1.0, 0.0, seed)

    defect = max(0.0, 1.0 - mu.total_mass())
    parts = _convolved_parts(mu, step_dist)
    vals = _draw_fields(parts, field_spec, seed)
    c_beta = log_mgf(field_spec, beta)
    log_a = _log_normalizer(parts, vals, defect, beta, c_beta)

    new_weights = [p[4] * np.exp(beta * v - log_a) for p, v in zip(parts, vals)]
    if defect == 0.0:
        # no mass leaks, so normalize away the last ulp of rounding
        total = sum(float(w.sum()) for w in new_weights)
        new_weights = [w / total for w in new_weights]

    layers = {}
    for (ordinal, key, conv, _pts, _w), w in zip(parts, new_weights):
        if float(w.sum()) <= 0.0:
            continue  # tilt underflowed the whole layer away
        if isinstance(conv, GridMeasure):
            layers[key] = GridMeasure(conv.origin, conv.spacing,
                                      w.reshape(conv.shape))
        else:
            live = w > 0.0  # individual atoms can underflow to exact zero
            layers[key] = PointMeasure(conv.positions[live], w[live])
    return UpdateSample(mu, LayeredMeasure(layers), math.exp(log_a), log_a, seed)


def mass_defect_stats(mu, step_dist: StepDistribution, beta: float,
                      field_spec: FieldSpec, n_samples: int, master_seed=0):
    """Monte Carlo mean and stderr of the updated total mass.

    Strictly between 0 and 1 the mass is a strict supermartingale; at the
    boundary it is preserved deterministically, so no sampling happens.
    """
    mu = _as_layered(mu)
    mass = mu.total_mass()
    if mass <= 0.0 or mass >= 1.0 - _MASS_TOL:
        return (0.0 if mass <= 0.0 else mass), 0.0
    if n_samples < 100:
        raise ConfigError("n_samples must be >= 100")
    out = np.empty(n_samples)
    for s in range(n_samples):
        draw = update_sample(mu, step_dist, beta, field_spec,
                             split_seed(master_seed, "defect", s))
        out[s] = draw.output.total_mass()
    return float(out.mean()), float(out.std(ddof=1) / math.sqrt(n_samples))


def expected_log_ratio(mu, step_dist: StepDistribution, beta: float,
                       field_spec: FieldSpec, n_samples: int, master_seed=0):
    """Monte Carlo estimate of the expected log normalizer at mu.

    Returns (estimate, stderr). The zero measure gives the annealed value
    exactly (the normalizer is the constant exp(c(beta))), and beta = 0
    gives 0 exactly; neither draws any samples.
    """
    mu = _as_layered(mu)
    if len(mu) == 0:
        return log_mgf(field_spec, beta), 0.0
    if beta == 0.0:
        return 0.0, 0.0
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    defect = max(0.0, 1.0 - mu.total_mass())
    parts = _convolved_parts(mu, step_dist)
    c_beta = log_mgf(field_spec, beta)
    draws = np.empty(n_samples)
    for s in range(n_samples):
        vals = _draw_fields(parts, field_spec, split_seed(master_seed, "logratio", s))
        draws[s] = _log_normalizer(parts, vals, defect, beta, c_beta)
    if n_samples == 1:
        return float(draws[0]), math.inf
    return float(draws.mean()), float(draws.std(ddof=1) / math.sqrt(n_samples))


def _stored_prefix(traj):
    """Endpoint laws before each step: the initial law plus snapshots 1..n-1."""
    rhos = [traj.config.initial_measure()]
    for i in range(1, traj.n):
        if i not in traj.snapshots:
            raise ConfigError(
                "per-step statistics need snapshots 1..n-1; run with keep='all'")
        rhos.append(traj.snapshots[i])
    return rhos


def mean_expected_log_ratio(traj, beta: float, field_spec: FieldSpec,
                            n_samples: int, master_seed=0):
    """Average expected log ratio over the trajectory's endpoint laws.

    Averages expected_log_ratio over the laws seen before each step
    (so a length-1 trajectory reports the annealed value exactly).
    Returns (mean, stderr) with per-step errors combined in quadrature.
    """
    if traj.n < 1:
        raise ConfigError("need at least one step")
    rhos = _stored_prefix(traj)
    est = np.empty(len(rhos))
    err = np.empty(len(rhos))
    for i, rho in enumerate(rhos):
        est[i], err[i] = expected_log_ratio(
            rho, traj.config.step_dist, beta, field_spec, n_samples,
            master_seed=split_seed(master_seed, "step", i))
    return float(est.mean()), float(np.sqrt((err ** 2).sum()) / len(rhos))


# ---------------------------------------------------------------------------
# clustering functionals


def tent_density(m, u, r: float) -> float:
    """Tent-smoothed density of m at u: the (1 - dist/r)+ average per volume."""
    if not (r > 0.0 and math.isfinite(r)):
        raise ConfigError("tent density radius must be positive")
    pts, w = _support(m)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if pts.shape[1] != len(u):
        raise ConfigError("point dimension mismatch")
    if len(w) == 0:
        return 0.0
    dist = np.sqrt(((pts - u) ** 2).sum(axis=1))
    kernel = np.clip(1.0 - dist / r, 0.0, None)
    return float((w * kernel).sum()) / (_unit_ball_volume(len(u)) * r ** len(u))


def _tent_density_at_support(pts, w, r):
    d = pts.shape[1]
    vol = _unit_ball_volume(d) * r ** d
    if d == 1:
        # exact prefix-sum sweep: integral of (1 - |x-c|/r)+ over sorted atoms
        order = np.argsort(pts[:, 0], kind="stable")
        p = pts[order, 0]
        ww = w[order]
        W = np.concatenate(([0.0], np.cumsum(ww)))
        P = np.concatenate(([0.0], np.cumsum(ww * p)))
        c = pts[:, 0]
        i1 = np.searchsorted(p, c - r, side="left")
        i2 = np.searchsorted(p, c, side="left")
        i3 = np.searchsorted(p, c + r, side="right")
        left = (P[i2] - P[i1]) - (c - r) * (W[i2] - W[i1])
        right = (c + r) * (W[i3] - W[i2]) - (P[i3] - P[i2])
        return (left + right) / (r * vol)
    if len(w) > _PAIRWISE_CAP:
        raise NumericContractError(
            f"pairwise clustering supports at most {_PAIRWISE_CAP} atoms in dim {d}")
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    return (np.clip(1.0 - dist / r, 0.0, None) * w[None, :]).sum(axis=1) / vol


def cluster_functional(m, r: float, eps: float) -> float:
    """Mass sitting where the tent density exceeds eps, ramped over [eps, 2eps].

    Integrates the ramp (t - eps)+/eps, capped at 1, of the tent density
    against the measure itself; exact for atoms, cellwise for grids.
    """
    if not (r > 0.0 and eps > 0.0):
        raise ConfigError("cluster functional needs r > 0 and eps > 0")
    pts, w = _support(m)
    if len(w) == 0:
        return 0.0
    dens = _tent_density_at_support(pts, w, r)
    ramp = np.clip((dens - eps) / eps, 0.0, 1.0)
    return float((w * ramp).sum())


def _ball_masses_at_support(pts, w, r):
    # open-ball mass seen from every support point
    if pts.shape[1] == 1:
        order = np.argsort(pts[:, 0], kind="stable")
        p = pts[order, 0]
        ww = w[order]
        cum = np.concatenate(([0.0], np.cumsum(ww)))
        lo = np.searchsorted(p, pts[:, 0] - r, side="right")
        hi = np.searchsorted(p, pts[:, 0] + r, side="left")
        return cum[hi] - cum[lo]
    if len(w) > _PAIRWISE_CAP:
        raise NumericContractError(
            f"pairwise clustering supports at most {_PAIRWISE_CAP} atoms")
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    return np.where(d2 < r * r, w[None, :], 0.0).sum(axis=1)


def clustering_mass(rho, eps: float, r: float) -> float:
    """Mass of the region whose r-ball holds more than eps times ball volume."""
    if not (eps > 0.0 and r > 0.0):
        raise ConfigError("clustering mass needs eps > 0 and r > 0")
    pts, w = _support(rho)
    if len(w) == 0:
        return 0.0
    threshold = eps * _unit_ball_volume(pts.shape[1]) * r ** pts.shape[1]
    masses = _ball_masses_at_support(pts, w, r)
    return float(w[masses > threshold].sum())


def density_clustering_mass(rho: GridMeasure, eps: float) -> float:
    """Mass of cells whose density exceeds eps; defined for grids only."""
    if not isinstance(rho, GridMeasure):
        raise ConfigError("density clustering is defined in grid mode only")
    if not (eps > 0.0):
        raise ConfigError("eps must be positive")
    dens = rho.values / rho.spacing ** rho.dim
    return float(rho.values[dens > eps].sum())


# ---------------------------------------------------------------------------
# localization report


@dataclasses.dataclass(frozen=True)
class LocalizationReport:
    deltas: tuple
    ball_radii: tuple
    covering_radii: tuple      # per delta; inf when no radius ever suffices
    top_layer_mass: float
    layer_odds_sum: float      # inf as soon as one layer carries full mass
    ball_indicators: tuple     # [i_delta][i_radius] booleans


def covering_radius(mu, delta: float, tol: float = 1e-7) -> float:
    """Smallest r whose concentration exceeds 1 - delta, within tol.

    Monotone bisection on the concentration profile; infinite when even
    the heaviest layer cannot reach the target mass.
    """
    if not (0.0 < delta < 1.0):
        raise ConfigError("delta must lie in (0, 1)")
    mu = _as_layered(mu)
    target = 1.0 - delta
    top = max((m.total_mass() for m in mu.layers.values()), default=0.0)
    if top <= target:
        return math.inf
    if concentration(mu, 0.0) > target:
        return 0.0
    hi = 1.0
    while concentration(mu, hi) <= target:
        hi *= 2.0
    lo = hi / 2.0 if hi > 1.0 else 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if concentration(mu, mid) > target:
            hi = mid
        else:
            lo = mid
    return hi


def localization_functionals(mu, deltas, ball_radii,
                             tol: float = 1e-7) -> LocalizationReport:
    """Covering radii, layer-mass statistics, and heavy-ball indicators.

    The heavy-ball indicator at (delta, K) asks whether some radius-K ball
    in some layer carries mass above 1 - delta, using the same certified
    center search as the concentration profile.
    """
    mu = _as_layered(mu)
    deltas = tuple(float(d) for d in deltas)
    ball_radii = tuple(float(k) for k in ball_radii)
    if not deltas or not ball_radii:
        raise ConfigError("delta and radius grids must be nonempty")
    if any(not 0.0 < d < 1.0 for d in deltas):
        raise ConfigError("deltas must lie in (0, 1)")
    if any(not k > 0.0 for k in ball_radii):
        raise ConfigError("ball radii must be positive")

    layer_masses = [m.total_mass() for m in mu.layers.values()]
    top = max(layer_masses, default=0.0)
    if any(m >= 1.0 for m in layer_masses):
        odds = math.inf
    else:
        odds = float(sum(m / (1.0 - m) for m in layer_masses))

    radii = tuple(covering_radius(mu, d, tol) for d in deltas)
    best = {k: heaviest_ball(mu, k)[1] for k in set(ball_radii)}
    flags = tuple(
        tuple(best[k] > 1.0 - d for k in ball_radii) for d in deltas
    )
    return LocalizationReport(deltas, ball_radii, radii, top, odds, flags)


def lifted_distance_bound(traj, beta: float, field_spec: FieldSpec,
                          n_samples: int = 1, master_seed=0) -> float:
    """Mean upper-bound distance between each stored law and one update of it.

    Averages metric_upper(rho_i, update(rho_i)) over the laws before each
    step (fresh field copies per step and sample). An upper bound by
    coupling convexity; never above 2.
    """
    if traj.n < 1:
        raise ConfigError("need at least one step")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rhos = _stored_prefix(traj)
    total = 0.0
    for i, rho in enumerate(rhos):
        for s in range(n_samples):
            draw = update_sample(rho, traj.config.step_dist, beta, field_spec,
                                 split_seed(master_seed, "lift", i, s))
            total += metric_upper(rho, draw.output).value / n_samples
    return total / len(rhos)
