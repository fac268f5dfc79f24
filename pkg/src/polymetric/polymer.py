"""Endpoint recursion for a directed walk in a random potential.

The endpoint law rho_i evolves by convolution with the step law, an
exponential tilt by the current potential slice, and renormalization.
The per-step log normalizers telescope into the quenched free energy
F_n = (1/n) log Z_n, and their seed statistics estimate the limiting
free energy and its gap below the annealed value.

Two execution modes: "point" keeps rho as an atomic measure (exact, and
checkable against full path enumeration for tiny n); "grid" keeps rho on
a fixed-spacing lattice so absolutely continuous step laws and density
diagnostics are available.  Probability mass is never silently clipped:
a window that fails to cover the support is a hard error.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .environment import FieldSample, FieldSpec, Window, field_at, log_mgf, sample_field, split_seed
from .errors import ConfigError, NumericContractError
from .measures import GridMeasure, PointMeasure, StepDistribution, convolve

MASS_SLACK = 1e-12


def _support_radius(m) -> float:
    if isinstance(m, GridMeasure):
        lo = np.asarray(m.origin)
        hi = lo + (np.asarray(m.shape) - 1) * m.spacing
        return float(np.max(np.abs(np.concatenate([lo, hi]))))
    return float(np.max(np.abs(m.positions))) if len(m) else 0.0


@dataclass(frozen=True)
class PolymerConfig:
    """Model plus solver choices for one run.

    window_growth (grid mode) is the number of cells added per side per
    step; None grows windows to exactly cover the support.  A growth too
    small for the step law triggers a hard error, never truncation.
    """

    beta: float
    step_dist: StepDistribution
    field: FieldSpec
    n_steps: int
    mode: str = "point"
    spacing: float = 0.0
    max_atoms: int = 200_000
    prune_tol: float = 0.0
    window_growth: int | None = None

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta >= 0.0):
            raise ConfigError("beta must be a finite nonnegative real")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        if self.mode not in ("point", "grid"):
            raise ConfigError(f"mode must be 'point' or 'grid', got {self.mode!r}")
        if not isinstance(self.step_dist, StepDistribution):
            raise ConfigError("step_dist must be a StepDistribution")
        step_m = self.step_dist.measure
        if step_m.dim != self.field.dim:
            raise ConfigError("step law and field disagree on the dimension")
        if not (0.0 <= self.prune_tol < 1.0):
            raise ConfigError("prune_tol must be in [0, 1)")
        if self.field.kappa_max is not None and self.field.kappa_max < 2.0 * self.beta:
            raise ConfigError(
                "field tilt domain must cover 2*beta; raise kappa_max or lower beta"
            )
        if self.mode == "point":
            if not isinstance(step_m, PointMeasure):
                raise ConfigError("point mode needs an atomic step law")
            if self.max_atoms < len(step_m):
                raise ConfigError("max_atoms cannot be below the step support size")
        else:
            if not self.spacing > 0.0:
                raise ConfigError("grid mode needs a positive spacing")
            ratio = self.spacing / self.field.mesh
            if abs(ratio - round(ratio)) > 1e-9:
                raise ConfigError("spacing must be an integer multiple of the field mesh")
            if isinstance(step_m, GridMeasure):
                if abs(step_m.spacing - self.spacing) > 1e-12 * self.spacing:
                    raise ConfigError("grid step law must share the solver spacing")
                off = np.asarray(step_m.origin) / self.spacing
            else:
                off = step_m.positions / self.spacing
            if np.max(np.abs(off - np.rint(off))) > 1e-9:
                raise ConfigError("step atoms must sit on the solver lattice")
            if self.window_growth is not None:
                need = int(math.ceil(_support_radius(step_m) / self.spacing - 1e-9))
                if self.window_growth < need:
                    raise ConfigError(
                        f"window_growth {self.window_growth} is below the "
                        f"step support radius ({need} cells)"
                    )

    def initial_measure(self):
        d = self.field.dim
        if self.mode == "point":
            return PointMeasure(np.zeros((1, d)), np.array([1.0]))
        return GridMeasure(np.zeros(d), self.spacing, np.ones((1,) * d))

    def annealed_free_energy(self) -> float:
        return log_mgf(self.field, self.beta)


class Trajectory:
    """One solved run: log normalizers per step plus kept snapshots."""

    __slots__ = ("config", "seed", "log_ratios", "snapshots", "pruned_mass")

    def __init__(self, config, seed, log_ratios, snapshots, pruned_mass=0.0):
        self.config = config
        self.seed = seed
        self.log_ratios = np.asarray(log_ratios, dtype=np.float64)
        self.snapshots = dict(snapshots)
        self.pruned_mass = float(pruned_mass)
        self.validate()

    def validate(self):
        if not np.all(np.isfinite(self.log_ratios)):
            raise NumericContractError("trajectory has non-finite log normalizers")
        for i, rho in self.snapshots.items():
            err = abs(rho.total_mass() - 1.0)
            if err > MASS_SLACK:
                raise NumericContractError(
                    f"snapshot {i} mass is off by {err:.3e}; endpoint laws must stay normalized"
                )

    @property
    def n(self) -> int:
        return len(self.log_ratios)

    def log_partition(self) -> float:
        return float(self.log_ratios.sum())


def free_energy(traj: Trajectory) -> float:
    """Mean log normalizer, (1/n) log Z_n."""
    if traj.n == 0:
        raise ConfigError("free energy needs at least one step")
    return float(traj.log_ratios.mean())


def _grid_field_values(conv: GridMeasure, field, step_index):
    if callable(field):
        window = Window(tuple(conv.origin), conv.shape, conv.spacing)
        return field(window.grid_points()).reshape(conv.shape)
    if not isinstance(field, FieldSample):
        raise ConfigError("grid mode needs a FieldSample or a callable field")
    win = field.window
    if abs(win.spacing - conv.spacing) > 1e-12 * conv.spacing:
        raise ConfigError("field sample spacing does not match the measure grid")
    off = (np.asarray(conv.origin) - np.asarray(win.origin)) / conv.spacing
    cells = np.rint(off).astype(np.int64)
    if np.max(np.abs(off - cells)) > 1e-9:
        raise ConfigError("field sample grid is not aligned with the measure grid")
    if (cells < 0).any() or any(
        c + s > ws for c, s, ws in zip(cells, conv.shape, win.shape)
    ):
        raise NumericContractError(
            f"step {step_index}: field window does not cover the support; "
            "the run needs a larger window growth"
        )
    region = tuple(slice(int(c), int(c) + s) for c, s in zip(cells, conv.shape))
    return field.values[region]


def step(rho, step_dist: StepDistribution, field, beta: float, step_index: int = 1):
    """One update: convolve with the step law, tilt by the field, normalize.

    field is a callable on positions, or (grid mode) a FieldSample whose
    window must cover the convolved support.  Returns (rho_next, log of
    the normalizer).  beta = 0 skips the tilt and reports exactly 0.
    """
    conv = convolve(rho, step_dist)
    if isinstance(conv, PointMeasure):
        pos, w = conv.positions, conv.weights
        if beta == 0.0:
            return PointMeasure(pos, w / w.sum()), 0.0
        if not callable(field):
            raise ConfigError("point mode needs a callable field")
        # subnormal tail weights (relative mass < 1e-300) break logsumexp's
        # internal scaling; dropping them is far below any stated tolerance
        live = w >= np.finfo(np.float64).tiny
        if not live.all():
            pos, w = pos[live], w[live]
        vals = np.asarray(field(pos), dtype=np.float64)
        log_n = float(logsumexp(beta * vals, b=w))
        new_w = w * np.exp(beta * vals - log_n)
        live = new_w > 0.0
        if not live.all():
            pos, new_w = pos[live], new_w[live]
        return PointMeasure(pos, new_w / new_w.sum()), log_n
    w = conv.values
    if beta == 0.0:
        return GridMeasure(conv.origin, conv.spacing, w / w.sum()), 0.0
    # same subnormal floor as the point branch; zero cells are legal here
    w = np.where(w >= np.finfo(np.float64).tiny, w, 0.0)
    vals = _grid_field_values(conv, field, step_index)
    log_n = float(logsumexp((beta * vals).ravel(), b=w.ravel()))
    new_w = w * np.exp(beta * vals - log_n)
    new_w = np.where(new_w >= np.finfo(np.float64).tiny, new_w, 0.0)
    return GridMeasure(conv.origin, conv.spacing, new_w / new_w.sum()), log_n


def _prune(rho: PointMeasure, tol: float):
    if tol == 0.0 or len(rho) == 0:
        return rho, 0.0
    keep = rho.weights >= tol * rho.weights.max()
    if keep.all():
        return rho, 0.0
    dropped = float(rho.weights[~keep].sum())
    w = rho.weights[keep]
    return PointMeasure(rho.positions[keep], w / w.sum()), dropped


def _snapshot_wanted(keep, i, n):
    if keep == "all":
        return True
    if keep == "last":
        return i == n
    if keep == "none":
        return False
    return i in keep


def run(config: PolymerConfig, seed, observer=None, keep="last") -> Trajectory:
    """Solve n_steps of the recursion; deterministic in (config, seed).

    observer(i, rho_i, log_ratio_i) is called after every step.  keep
    selects stored snapshots: "last", "all", "none", or a set of step
    indices (step 1 is the first update).
    """
    rho = config.initial_measure()
    spec = config.field
    log_ratios = np.empty(config.n_steps)
    snapshots = {}
    pruned = 0.0
    grow = config.window_growth
    if config.mode == "grid" and grow is not None:
        lo = np.asarray(rho.origin, dtype=np.float64)
        hi = lo + (np.asarray(rho.shape) - 1) * config.spacing
    for i in range(1, config.n_steps + 1):
        if config.mode == "point":
            if config.beta == 0.0:
                field = None
            else:
                def field(points, _t=i):
                    return field_at(spec, _t, points, seed)
            rho, log_n = step(rho, config.step_dist, field, config.beta, i)
            rho, dropped = _prune(rho, config.prune_tol)
            pruned += dropped
            if len(rho) > config.max_atoms:
                raise NumericContractError(
                    f"step {i}: {len(rho)} atoms exceed max_atoms={config.max_atoms}; "
                    "raise the cap or set a prune_tol"
                )
        else:
            conv = convolve(rho, config.step_dist)
            if config.beta == 0.0:
                field = None
            elif grow is None:
                window = Window(tuple(conv.origin), conv.shape, config.spacing)
                field = sample_field(spec, i, window, seed)
            else:
                lo = lo - grow * config.spacing
                hi = hi + grow * config.spacing
                shape = tuple(
                    int(round((h - l) / config.spacing)) + 1 for l, h in zip(lo, hi)
                )
                field = sample_field(spec, i, Window(tuple(lo), shape, config.spacing), seed)
            rho, log_n = step(rho, config.step_dist, field, config.beta, i)
        log_ratios[i - 1] = log_n
        if observer is not None:
            observer(i, rho, log_n)
        if _snapshot_wanted(keep, i, config.n_steps):
            snapshots[i] = rho
    if config.n_steps == 0 and _snapshot_wanted(keep, 0, 0):
        snapshots[0] = rho
    return Trajectory(config, seed, log_ratios, snapshots, pruned)


@dataclass(frozen=True)
class LyapunovEstimate:
    """Free-energy statistics over independent seeds at one temperature."""

    beta: float
    n: int
    n_seeds: int
    p_hat: float
    p_stderr: float
    annealed: float
    lyapunov_hat: float
    var_f: float
    f_samples: tuple


def estimate_p_and_lyapunov(config: PolymerConfig, n: int, n_seeds: int,
                            master_seed: int = 0) -> LyapunovEstimate:
    """Seed-mean of F_n, its spread, and the annealed gap estimate.

    The gap estimate inherits p_hat's standard error since the annealed
    value is exact.  beta = 0 short-circuits to exact zeros.
    """
    if n_seeds < 2:
        raise ConfigError("estimating a standard error needs n_seeds >= 2")
    cfg = dataclasses.replace(config, n_steps=n)
    c_beta = cfg.annealed_free_energy()
    samples = np.empty(n_seeds)
    for k in range(n_seeds):
        traj = run(cfg, split_seed(master_seed, "trajectory", k), keep="none")
        samples[k] = free_energy(traj)
    p_hat = float(samples.mean())
    var_f = float(samples.var(ddof=1))
    stderr = math.sqrt(var_f / n_seeds)
    return LyapunovEstimate(
        beta=cfg.beta, n=n, n_seeds=n_seeds, p_hat=p_hat, p_stderr=stderr,
        annealed=c_beta, lyapunov_hat=c_beta - p_hat, var_f=var_f,
        f_samples=tuple(float(v) for v in samples),
    )


_ORACLE_PATH_CAP = 1_000_000


def path_sum_oracle(config: PolymerConfig, n: int, seed) -> float:
    """log Z_n by summing every walk path; the recursion's ground truth.

    Enumerates |supp|^n paths of the atomic step law and accumulates the
    tilted weights in log space, using the same per-time field values as
    run() does.
    """
    step_m = config.step_dist.measure
    if not isinstance(step_m, PointMeasure):
        raise ConfigError("path enumeration needs an atomic step law")
    if n < 1 or n > 6:
        raise ConfigError("path enumeration supports 1 <= n <= 6")
    k = len(step_m)
    if k ** n > _ORACLE_PATH_CAP:
        raise ConfigError(f"{k}^{n} paths exceed the enumeration cap {_ORACLE_PATH_CAP}")
    if config.beta == 0.0:
        return 0.0
    idx = np.indices((k,) * n).reshape(n, -1).T
    moves = step_m.positions[idx]                        # paths x n x d
    pos = np.cumsum(moves, axis=1)
    log_w = np.log(step_m.weights)[idx].sum(axis=1)
    energy = np.zeros(len(idx))
    for t in range(n):
        energy += field_at(config.field, t + 1, pos[:, t, :], seed)
    return float(logsumexp(config.beta * energy + log_w))
