"""Experiment drivers behind the CLI: simulate, sweep, selftest, diagnose.

A single TOML file configures a run. Physics parameters (beta, step law,
field law, dimensions, grids) are always explicit keys; only tolerances
and budgets carry defaults. Every run writes a UTF-8 CSV plus a JSON
manifest whose only nondeterministic field is the timestamp.
"""

import csv
import dataclasses
import json
import math
import pathlib
from datetime import datetime, timezone

import numpy as np
from scipy.special import ndtri

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .environment import FieldSpec, split_seed
from .errors import ConfigError, NumericContractError
from .functionals import (
    clustering_mass,
    covering_radius,
    density_clustering_mass,
    expected_log_ratio,
)
from .measures import (
    LayeredMeasure,
    PointMeasure,
    StepDistribution,
    convolve,
    dumps,
    heaviest_ball,
    loads,
)
from .metric import (
    Matching,
    MatchPair,
    concentration,
    metric_exact,
    separation,
)
from .polymer import PolymerConfig, run
from .transport import (
    TransportPlan,
    dual_lower_bound,
    generalized_wasserstein,
    wasserstein,
)
from . import bruteforce


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class DiagnosticGrids:
    radii: tuple = ()        # ball/tent radii
    eps: tuple = ()          # clustering thresholds
    deltas: tuple = ()       # covering-mass defects
    ball_radii: tuple = ()   # heavy-ball radii
    density_eps: tuple = ()  # grid-mode density thresholds

    def any_nonempty(self) -> bool:
        return any((self.radii, self.eps, self.deltas, self.ball_radii,
                    self.density_eps))


@dataclasses.dataclass(frozen=True)
class RunConfig:
    kind: str
    betas: tuple
    polymer_configs: tuple
    seeds: tuple
    out_dir: str
    grids: DiagnosticGrids
    log_ratio_samples: int = 0
    snapshot_every: int = 0
    diag_stride: int = 1
    raw: dict = dataclasses.field(default_factory=dict, compare=False)


@dataclasses.dataclass(frozen=True)
class ResultRow:
    experiment: str
    seed: object          # int, or None for per-beta aggregates
    beta: float
    n: int
    statistic: str
    value: float
    stderr: object = None


class _Table:
    """One TOML table with precise complaints and unknown-key detection."""

    def __init__(self, data: dict, name: str):
        self.data = dict(data)
        self.name = name

    def take(self, key, required=True, default=None):
        if key not in self.data:
            if required:
                raise ConfigError(f"[{self.name}] is missing required key '{key}'")
            return default
        return self.data.pop(key)

    def number(self, key, required=True, default=None, minimum=None):
        v = self.take(key, required, default)
        if v is default and not required:
            return default
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"[{self.name}].{key} must be a number")
        v = float(v)
        if minimum is not None and v < minimum:
            raise ConfigError(f"[{self.name}].{key} must be >= {minimum}")
        return v

    def integer(self, key, required=True, default=None, minimum=None):
        v = self.take(key, required, default)
        if v is default and not required:
            return default
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"[{self.name}].{key} must be an integer")
        if minimum is not None and v < minimum:
            raise ConfigError(f"[{self.name}].{key} must be >= {minimum}")
        return int(v)

    def string(self, key, required=True, default=None, choices=None):
        v = self.take(key, required, default)
        if v is default and not required:
            return default
        if not isinstance(v, str):
            raise ConfigError(f"[{self.name}].{key} must be a string")
        if choices is not None and v not in choices:
            raise ConfigError(
                f"[{self.name}].{key} must be one of {sorted(choices)}, got {v!r}")
        return v

    def float_list(self, key, required=True, default=()):
        v = self.take(key, required, default)
        if v is default and not required:
            return tuple(default)
        if not isinstance(v, list) or any(
                isinstance(x, bool) or not isinstance(x, (int, float)) for x in v):
            raise ConfigError(f"[{self.name}].{key} must be a list of numbers")
        return tuple(float(x) for x in v)

    def finish(self):
        if self.data:
            extra = ", ".join(sorted(self.data))
            raise ConfigError(f"[{self.name}] has unknown keys: {extra}")


def _parse_step(tab: _Table, dim: int) -> StepDistribution:
    kind = tab.string("kind", choices={"lattice", "triangular", "atoms"})
    if kind == "lattice":
        offsets = tab.take("offsets")
        tab.finish()
        try:
            return StepDistribution.uniform_lattice(offsets, dim=dim)
        except (ValueError, NumericContractError) as e:
            raise ConfigError(f"[step].offsets invalid: {e}") from e
    if kind == "triangular":
        halfwidth = tab.number("halfwidth", minimum=1e-12)
        spacing = tab.number("spacing", minimum=1e-12)
        tab.finish()
        if dim != 1:
            raise ConfigError("[step] triangular steps are one-dimensional")
        try:
            return StepDistribution.triangular_grid(halfwidth, spacing)
        except ValueError as e:
            raise ConfigError(f"[step] invalid triangular law: {e}") from e
    positions = tab.take("positions")
    weights = tab.take("weights")
    tab.finish()
    try:
        return StepDistribution(PointMeasure(positions, weights))
    except (ValueError, NumericContractError) as e:
        raise ConfigError(f"[step] invalid atom law: {e}") from e


def _parse_field(tab: _Table) -> FieldSpec:
    kw = dict(
        law=tab.string("law", choices={"gaussian", "bounded"}),
        variance=tab.number("variance", minimum=1e-300),
        dependence_range=tab.number("dependence_range", minimum=1e-300),
        dim=tab.integer("dim", minimum=1),
    )
    mesh = tab.number("mesh", required=False)
    if mesh is not None:
        kw["mesh"] = mesh
    kappa_max = tab.number("kappa_max", required=False)
    if kappa_max is not None:
        kw["kappa_max"] = kappa_max
    profile = tab.float_list("profile", required=False, default=())
    if profile:
        kw["profile"] = profile
    tab.finish()
    return FieldSpec(**kw)


def _parse_seeds(tab: _Table) -> tuple:
    values = tab.take("values", required=False)
    master = tab.integer("master", required=False)
    count = tab.integer("count", required=False, minimum=1)
    tab.finish()
    if values is not None:
        if master is not None or count is not None:
            raise ConfigError("[seeds] give either values or master+count, not both")
        if not isinstance(values, list) or not values or any(
                isinstance(s, bool) or not isinstance(s, int) for s in values):
            raise ConfigError("[seeds].values must be a nonempty list of integers")
        seeds = tuple(values)
    else:
        if master is None or count is None:
            raise ConfigError("[seeds] needs values, or master and count")
        seeds = tuple(split_seed(master, "seed", k) for k in range(count))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("[seeds] seeds must be distinct")
    return seeds


def load_run_config(path) -> RunConfig:
    """Parse and validate one TOML run configuration."""
    path = pathlib.Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")

    known = {"run", "polymer", "step", "field", "seeds", "sweep", "diagnostics"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config tables: {', '.join(sorted(extra))}")

    run_tab = _Table(raw.get("run", {}), "run")
    kind = run_tab.string("kind", choices={"simulate", "sweep", "diagnose"})
    out_dir = run_tab.string("out", required=False, default="results")
    run_tab.finish()

    diag = _Table(raw.get("diagnostics", {}), "diagnostics")
    grids = DiagnosticGrids(
        radii=diag.float_list("r", required=False),
        eps=diag.float_list("eps", required=False),
        deltas=diag.float_list("delta", required=False),
        ball_radii=diag.float_list("ball_radii", required=False),
        density_eps=diag.float_list("density_eps", required=False),
    )
    log_ratio_samples = diag.integer("log_ratio_samples", required=False,
                                     default=0, minimum=0)
    snapshot_every = diag.integer("snapshot_every", required=False,
                                  default=0, minimum=0)
    diag_stride = diag.integer("stride", required=False, default=1, minimum=1)
    diag.finish()
    if any(not 0.0 < d < 1.0 for d in grids.deltas):
        raise ConfigError("[diagnostics].delta values must lie in (0, 1)")
    if any(v <= 0 for v in grids.radii + grids.eps + grids.ball_radii
           + grids.density_eps):
        raise ConfigError("[diagnostics] grid values must be positive")

    if kind == "diagnose":
        for tab in ("polymer", "step", "field", "seeds", "sweep"):
            if tab in raw:
                raise ConfigError(f"[{tab}] does not belong in a diagnose config")
        if not grids.any_nonempty():
            raise ConfigError("diagnose needs at least one nonempty diagnostics grid")
        return RunConfig(kind, (), (), (), out_dir, grids,
                         log_ratio_samples, snapshot_every, diag_stride, raw)

    field = _parse_field(_Table(raw.get("field", {}), "field"))
    step = _parse_step(_Table(raw.get("step", {}), "step"), field.dim)
    seeds = _parse_seeds(_Table(raw.get("seeds", {}), "seeds"))

    poly = _Table(raw.get("polymer", {}), "polymer")
    n_steps = poly.integer("n_steps", minimum=0)
    mode = poly.string("mode", choices={"point", "grid"})
    kw = dict(step_dist=step, field=field, n_steps=n_steps, mode=mode)
    spacing = poly.number("spacing", required=False)
    if spacing is not None:
        kw["spacing"] = spacing
    max_atoms = poly.integer("max_atoms", required=False, minimum=1)
    if max_atoms is not None:
        kw["max_atoms"] = max_atoms
    prune_tol = poly.number("prune_tol", required=False)
    if prune_tol is not None:
        kw["prune_tol"] = prune_tol
    growth = poly.integer("window_growth", required=False, minimum=0)
    if growth is not None:
        kw["window_growth"] = growth

    if kind == "simulate":
        beta = poly.number("beta", minimum=0.0)
        poly.finish()
        if "sweep" in raw:
            raise ConfigError("[sweep] does not belong in a simulate config")
        betas = (beta,)
    else:
        poly.finish()
        sweep_tab = _Table(raw.get("sweep", {}), "sweep")
        betas = sweep_tab.float_list("betas")
        sweep_tab.finish()
        if not betas:
            raise ConfigError("[sweep].betas must not be empty")
        if any(b < 0 for b in betas):
            raise ConfigError("[sweep].betas must be >= 0")
        if any(a >= b for a, b in zip(betas, betas[1:])):
            raise ConfigError("[sweep].betas must be strictly increasing")
        if len(seeds) < 2:
            raise ConfigError("sweep needs at least 2 seeds")

    if grids.density_eps and mode != "grid":
        raise ConfigError("[diagnostics].density_eps requires grid mode")

    try:
        configs = tuple(PolymerConfig(beta=b, **kw) for b in betas)
    except (ConfigError, NumericContractError) as e:
        raise ConfigError(f"[polymer] {e}") from e
    return RunConfig(kind, betas, configs, seeds, out_dir, grids,
                     log_ratio_samples, snapshot_every, diag_stride, raw)


# ---------------------------------------------------------------------------
# output plumbing


def _fmt_param(v: float) -> str:
    return f"{v:g}"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _write_manifest(path, experiment, cfg: RunConfig, outputs, extra=None):
    manifest = {
        "experiment": experiment,
        "package_version": __version__,
        "config": cfg.raw,
        "seeds": list(cfg.seeds),
        "outputs": sorted(str(o) for o in outputs),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# simulate


def _diag_columns(cfg: RunConfig) -> list:
    g = cfg.grids
    cols = []
    cols += [f"concentration_r{_fmt_param(r)}" for r in g.radii]
    cols += [f"ball_sup_r{_fmt_param(r)}" for r in g.radii]
    cols += [f"clustering_eps{_fmt_param(e)}_r{_fmt_param(r)}"
             for e in g.eps for r in g.radii]
    cols += [f"density_clustering_eps{_fmt_param(e)}" for e in g.density_eps]
    cols += [f"covering_radius_delta{_fmt_param(d)}" for d in g.deltas]
    if g.deltas and g.ball_radii:
        cols += [f"ball_ind_delta{_fmt_param(d)}_K{_fmt_param(k)}"
                 for d in g.deltas for k in g.ball_radii]
    if cfg.log_ratio_samples > 0:
        cols += ["log_ratio_estimate", "log_ratio_stderr"]
    return cols


def _diag_values(cfg: RunConfig, poly: PolymerConfig, rho, seed: int, i: int):
    g = cfg.grids
    vals = []
    vals += [concentration(rho, r) for r in g.radii]
    vals += [heaviest_ball(rho, r)[1] for r in g.radii]
    vals += [clustering_mass(rho, e, r) for e in g.eps for r in g.radii]
    vals += [density_clustering_mass(rho, e) for e in g.density_eps]
    vals += [covering_radius(rho, d) for d in g.deltas]
    if g.deltas and g.ball_radii:
        best = {k: heaviest_ball(rho, k)[1] for k in set(g.ball_radii)}
        vals += [best[k] > 1.0 - d for d in g.deltas for k in g.ball_radii]
    if cfg.log_ratio_samples > 0:
        est, err = expected_log_ratio(
            rho, poly.step_dist, poly.beta, poly.field, cfg.log_ratio_samples,
            master_seed=split_seed(seed, "diag", i))
        vals += [est, err]
    return vals


def cmd_simulate(cfg: RunConfig, out_dir=None) -> dict:
    """Run one beta over all seeds; stream per-step rows to diagnostics.csv."""
    if cfg.kind != "simulate":
        raise ConfigError(f"config kind is {cfg.kind!r}, expected 'simulate'")
    out = pathlib.Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poly = cfg.polymer_configs[0]
    diag_cols = _diag_columns(cfg)
    header = ["step", "seed", "log_ratio", "free_energy"] + diag_cols
    rows = []
    snapshots = []

    for seed in cfg.seeds:
        running = [0.0]

        def observer(i, rho, log_ratio, seed=seed, running=running):
            running[0] += log_ratio
            row = [i, seed, log_ratio, running[0] / i]
            if (i - 1) % cfg.diag_stride == 0:
                row += _diag_values(cfg, poly, rho, seed, i)
            else:
                row += [None] * len(diag_cols)
            rows.append(row)
            if cfg.snapshot_every and i % cfg.snapshot_every == 0:
                snap = out / f"snapshot_seed{seed}_step{i}.json"
                snap.write_text(dumps(rho), encoding="utf-8")
                snapshots.append(snap)

        run(poly, seed, observer=observer, keep="none")

    csv_path = out / "diagnostics.csv"
    _write_csv(csv_path, header, rows)
    manifest_path = out / "manifest.json"
    _write_manifest(manifest_path, "simulate", cfg, [csv_path, *snapshots])
    return {"csv": csv_path, "manifest": manifest_path, "rows": len(rows),
            "snapshots": snapshots}


# ---------------------------------------------------------------------------
# sweep


def _sweep_stat_names(cfg: RunConfig) -> list:
    g = cfg.grids
    names = []
    names += [f"ball_sup_r{_fmt_param(r)}" for r in g.radii]
    names += [f"clustering_eps{_fmt_param(e)}_r{_fmt_param(r)}"
              for e in g.eps for r in g.radii]
    if g.deltas and g.ball_radii:
        names += [f"localization_density_delta{_fmt_param(d)}_K{_fmt_param(k)}"
                  for d in g.deltas for k in g.ball_radii]
    return names


def _sweep_step_stats(cfg: RunConfig, rho) -> list:
    g = cfg.grids
    vals = []
    vals += [heaviest_ball(rho, r)[1] for r in g.radii]
    vals += [clustering_mass(rho, e, r) for e in g.eps for r in g.radii]
    if g.deltas and g.ball_radii:
        best = {k: heaviest_ball(rho, k)[1] for k in set(g.ball_radii)}
        vals += [1.0 if best[k] > 1.0 - d else 0.0
                 for d in g.deltas for k in g.ball_radii]
    return vals


def cmd_sweep(cfg: RunConfig, out_dir=None) -> dict:
    """Per-beta aggregates over seeds plus a Lyapunov monotonicity report."""
    if cfg.kind != "sweep":
        raise ConfigError(f"config kind is {cfg.kind!r}, expected 'sweep'")
    out = pathlib.Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stat_names = _sweep_stat_names(cfg)
    rows = []
    summary = []

    for beta, poly in zip(cfg.betas, cfg.polymer_configs):
        n = poly.n_steps
        f_samples = []
        stat_means = []
        for seed in cfg.seeds:
            running = [0.0]
            acc = [[] for _ in stat_names]

            def observer(i, rho, log_ratio, running=running, acc=acc):
                running[0] += log_ratio
                if (i - 1) % cfg.diag_stride == 0 and stat_names:
                    for slot, v in zip(acc, _sweep_step_stats(cfg, rho)):
                        slot.append(v)

            run(poly, seed, observer=observer, keep="none")
            f_n = running[0] / n if n else 0.0
            f_samples.append(f_n)
            rows.append(ResultRow("sweep", seed, beta, n, "free_energy", f_n))
            stat_means.append([float(np.mean(s)) if s else math.nan for s in acc])

        k = len(f_samples)
        p_hat = float(np.mean(f_samples))
        p_se = float(np.std(f_samples, ddof=1) / math.sqrt(k))
        annealed = poly.annealed_free_energy()
        lyap = annealed - p_hat
        rows.append(ResultRow("sweep", None, beta, n, "p_hat", p_hat, p_se))
        rows.append(ResultRow("sweep", None, beta, n, "annealed", annealed))
        rows.append(ResultRow("sweep", None, beta, n, "lyapunov_hat", lyap, p_se))
        by_stat = np.asarray(stat_means, dtype=np.float64)
        for j, name in enumerate(stat_names):
            col = by_stat[:, j]
            rows.append(ResultRow("sweep", None, beta, n, name,
                                  float(col.mean()),
                                  float(col.std(ddof=1) / math.sqrt(k))))
        summary.append({"beta": beta, "lyapunov_hat": lyap, "stderr": p_se})

    pairs = []
    monotone = True
    for lo, hi in zip(summary, summary[1:]):
        margin = 2.0 * math.hypot(lo["stderr"], hi["stderr"])
        ok = hi["lyapunov_hat"] >= lo["lyapunov_hat"] - margin
        monotone = monotone and ok
        pairs.append({
            "beta_lo": lo["beta"], "beta_hi": hi["beta"],
            "lyapunov_lo": lo["lyapunov_hat"], "lyapunov_hi": hi["lyapunov_hat"],
            "margin": margin, "nondecreasing_within_margin": ok,
        })

    csv_path = out / "sweep.csv"
    header = ["experiment", "seed", "beta", "n", "statistic", "value", "stderr"]
    _write_csv(csv_path, header,
               [[r.experiment, r.seed, r.beta, r.n, r.statistic, r.value,
                 r.stderr] for r in rows])
    manifest_path = out / "manifest.json"
    report = {"nondecreasing": monotone, "pairs": pairs}
    _write_manifest(manifest_path, "sweep", cfg, [csv_path],
                    extra={"lyapunov_monotonicity": report})
    return {"csv": csv_path, "manifest": manifest_path, "rows": rows,
            "monotonicity": report}


# ---------------------------------------------------------------------------
# the reference two-collection instance


def _gaussian_quantile_atoms(mean: float, var: float, n: int) -> np.ndarray:
    z = ndtri((np.arange(n) + 0.5) / n)
    return mean + math.sqrt(var) * z


def _uniform_grid_atoms(a: float, b: float, n: int) -> np.ndarray:
    # endpoint-inclusive so the support distance of the pieces is exact
    return np.linspace(a, b, n)


def reference_collections(n_atoms: int = 200):
    """Two layered measures with a known four-pair matching of separation 8.

    Uniform pieces are quantized on endpoint-inclusive grids and Gaussian
    pieces at midpoint quantiles, n_atoms each. Returns (mu, nu, matching,
    shifts, bound) where bound dominates the quantization error of the
    matched-transport residual.
    """
    if n_atoms < 2:
        raise ConfigError("need at least 2 atoms per piece")
    n = int(n_atoms)

    def pm(points, mass):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 1)
        return PointMeasure(points, np.full(len(points), mass / len(points)))

    u89 = _uniform_grid_atoms(8.0, 9.0, n)
    u36 = _uniform_grid_atoms(3.0, 6.0, n)
    g14 = _gaussian_quantile_atoms(1.0, 4.0, n)
    g01 = _gaussian_quantile_atoms(0.0, 1.0, n)
    g21 = _gaussian_quantile_atoms(2.0, 1.0, n)
    g33 = _gaussian_quantile_atoms(3.0, 3.0, n)

    mu = LayeredMeasure({
        1: PointMeasure(
            np.concatenate([[0.0], u89]).reshape(-1, 1),
            np.concatenate([[1 / 8], np.full(n, (1 / 8) / n)])),
        2: PointMeasure(
            np.concatenate([[1.0], g14]).reshape(-1, 1),
            np.concatenate([[1 / 4], np.full(n, (1 / 6) / n)])),
        3: pm(g01, 1 / 4),
    })
    nu = LayeredMeasure({
        1: PointMeasure([[-1.0], [10.0]], [1 / 4, 1 / 10]),
        2: pm(g21, 1 / 6),
        3: pm(u36, 1 / 6),
        4: pm(g33, 1 / 8),
    })

    matching = Matching((
        MatchPair(1, pm([0.0], 1 / 10), 1, pm([10.0], 1 / 10)),
        MatchPair(1, pm(u89, 1 / 8), 3, pm(u36, 1 / 8)),
        MatchPair(2, pm([1.0], 1 / 4), 1, pm([-1.0], 1 / 4)),
        MatchPair(3, pm(g01, 1 / 6), 2, pm(g21, 1 / 6)),
    ))
    shifts = (-10.0, 4.0, 2.0, -2.0)
    # worst-case displacement of each quantized uniform piece, times its mass
    bound = (1 / 8) * (1.0 + 3.0) / (2 * (n - 1))
    return mu, nu, matching, shifts, bound


def matched_transport_residual(matching: Matching, shifts) -> float:
    """Sum of pairwise transport costs after applying the per-pair shifts."""
    total = 0.0
    for pair, x in zip(matching.pairs, shifts):
        shifted = pair.nu_sub.translated([x] * pair.nu_sub.dim)
        total += wasserstein(pair.mu_sub, shifted)[0]
    return total


# ---------------------------------------------------------------------------
# selftest


def _rand_rational_pair(rng, max_atoms=4, balanced=True):
    m = int(rng.integers(1, max_atoms + 1))
    n = int(rng.integers(1, max_atoms + 1))
    su = rng.integers(1, 5, m)
    if balanced:
        total = int(su.sum())
        n = min(n, total)
        du = np.ones(n, dtype=np.int64)
        for _ in range(total - n):
            du[int(rng.integers(0, n))] += 1
    else:
        du = rng.integers(1, 5, n)
    unit = 1.0 / (4 * max(int(su.sum()), int(du.sum())))
    x = rng.normal(0.0, 2.0, (m, 1))
    y = rng.normal(0.0, 2.0, (n, 1))
    a = PointMeasure(x, su * unit)
    g = PointMeasure(y, du * unit)
    return a, g, x, y, tuple(int(v) for v in su), tuple(int(v) for v in du), unit


def _rand_layered(rng, max_atoms=3, max_layers=2):
    layers = {}
    budget = 1.0
    for k in range(int(rng.integers(1, max_layers + 1))):
        n = int(rng.integers(1, max_atoms + 1))
        w = rng.uniform(0.05, 0.4, n)
        if w.sum() > 0.95 * budget:
            w *= 0.9 * budget / w.sum()
        budget -= w.sum()
        pos = np.round(rng.uniform(-4, 4, n), 2) + np.arange(n) * 1e-3
        layers[k] = PointMeasure(pos.reshape(-1, 1), w)
    return LayeredMeasure(layers)


def _check_transport_oracle(budget, rng):
    for i in range(max(20, budget // 4)):
        a, g, x, y, su, du, unit = _rand_rational_pair(rng, balanced=True)
        got = wasserstein(a, g)[0]
        want = bruteforce.wasserstein_units(x, y, su, du, unit)
        if abs(got - want) > 1e-9:
            return f"instance {i}: flow {got} vs enumeration {want}"
        a, g, x, y, su, du, unit = _rand_rational_pair(rng, balanced=False)
        got = generalized_wasserstein(a, g)[0]
        want = bruteforce.generalized_wasserstein_units(x, y, su, du, unit)
        if abs(got - want) > 1e-9:
            return f"instance {i} (generalized): {got} vs {want}"
    return None


def _check_dual_bound(budget, rng):
    for i in range(max(20, budget // 4)):
        a, g, *_ = _rand_rational_pair(rng, balanced=True)
        primal = wasserstein(a, g)[0]
        for _ in range(20):
            c = rng.normal(0.0, 2.0, a.dim)
            sign = 1.0 if rng.random() < 0.5 else -1.0

            def f(p, c=c, sign=sign):
                return sign * min(1.0, float(np.linalg.norm(p - c)))

            dual = dual_lower_bound(a, g, f)
            if dual > primal + 1e-9:
                return f"instance {i}: dual {dual} beats primal {primal}"
    return None


def _check_concentration(budget, rng):
    for i in range(max(30, budget // 3)):
        mu = _rand_layered(rng)
        r = float(rng.uniform(0.0, 3.0))
        i_r = concentration(mu, r)
        lo = heaviest_ball(mu, r)[1]
        hi = heaviest_ball(mu, r + 1.0)[1]
        if not (lo - 1e-12 <= i_r <= hi + 1e-12):
            return f"instance {i}: ball sandwich {lo} <= {i_r} <= {hi} fails"
        if concentration(mu, r + 0.5) < i_r - 1e-12:
            return f"instance {i}: not monotone in r"
    return None


def _check_concentration_lipschitz(budget, rng):
    for i in range(max(20, budget // 5)):
        a, g, *_ = _rand_rational_pair(rng, balanced=True)
        w, _plan = wasserstein(a, g)
        r = float(rng.uniform(0.0, 2.0))
        gap = abs(concentration(LayeredMeasure.single(a), r)
                  - concentration(LayeredMeasure.single(g), r))
        if gap > w + 1e-9:
            return f"instance {i}: |I_r gap| {gap} > transport {w}"
    return None


def _check_convolution_contraction(budget, rng):
    step = StepDistribution.uniform_lattice((-1.0, 0.0, 1.0))
    for i in range(max(20, budget // 5)):
        mu = _rand_layered(rng)
        r = float(rng.uniform(0.0, 2.0))
        smoothed = LayeredMeasure(
            {k: convolve(m, step.measure) for k, m in mu.items()})
        if concentration(smoothed, r) > concentration(mu, r) + 1e-12:
            return f"instance {i}: smoothing increased concentration"
    return None


def _check_metric_axioms(budget, rng):
    count = max(2, budget // 80)
    for i in range(count):
        mu, nu = _rand_layered(rng, 2, 2), _rand_layered(rng, 2, 2)
        d1 = metric_exact(mu, nu)
        d2 = metric_exact(nu, mu)
        if d1 != d2:
            return f"instance {i}: asymmetric {d1} vs {d2}"
        if d1 > 2.0:
            return f"instance {i}: value {d1} beyond the cap 2"
        if metric_exact(mu, mu) > 1e-6:
            return f"instance {i}: nonzero self distance"
        dg = metric_exact(mu, nu, kind="g-matching")
        if abs(dg - d1) > 1e-6:
            return f"instance {i}: g-matching {dg} vs matching {d1}"
    return None


def _check_reference_collections(budget, rng):
    n = 50 if budget < 400 else 200
    mu, nu, matching, shifts, bound = reference_collections(n)
    sep = separation(matching)
    if sep != 8.0:
        return f"separation {sep} != 8"
    residual = matched_transport_residual(matching, shifts)
    if abs(residual - 1.0 / 18.0) > 2.0 * bound:
        return (f"residual {residual} vs 1/18 = {1 / 18:.9f} "
                f"(allowed 2*{bound})")
    return None


def _check_plan_negative_control(budget, rng):
    a, g, *_ = _rand_rational_pair(rng, balanced=True)
    _value, plan = wasserstein(a, g)
    if len(plan.masses) == 0:
        return "no pairs to corrupt"
    try:
        TransportPlan(plan.src_positions, plan.dst_positions, plan.src_weights,
                      plan.dst_weights, plan.rows, plan.cols,
                      plan.masses * 1.5, plan.cost)
    except NumericContractError as e:
        if "TransportPlan invariant" not in str(e):
            return f"error does not name the invariant: {e}"
        return None
    return "corrupted plan was accepted"


_SELFTEST_CHECKS = (
    ("transport-matches-enumeration", _check_transport_oracle),
    ("dual-never-beats-primal", _check_dual_bound),
    ("concentration-ball-sandwich", _check_concentration),
    ("concentration-transport-lipschitz", _check_concentration_lipschitz),
    ("convolution-contracts-concentration", _check_convolution_contraction),
    ("metric-axioms-tiny-instances", _check_metric_axioms),
    ("two-collection-reproduction", _check_reference_collections),
    ("transport-plan-negative-control", _check_plan_negative_control),
)


def cmd_selftest(budget: int = 200, master_seed: int = 0):
    """Run the property suite; returns (all_passed, report_lines)."""
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    lines = []
    ok = True
    for name, check in _SELFTEST_CHECKS:
        rng = np.random.default_rng(split_seed(master_seed, "selftest", name))
        failure = check(budget, rng)
        if failure is None:
            lines.append(f"PASS {name}")
        else:
            ok = False
            lines.append(f"FAIL {name}: {failure}")
    return ok, lines


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(snapshot_path, cfg: RunConfig, out_dir=None) -> dict:
    """Evaluate the configured grids on one stored measure snapshot."""
    if cfg.kind != "diagnose":
        raise ConfigError(f"config kind is {cfg.kind!r}, expected 'diagnose'")
    snapshot_path = pathlib.Path(snapshot_path)
    if not snapshot_path.exists():
        raise ConfigError(f"snapshot file not found: {snapshot_path}")
    m = loads(snapshot_path.read_text(encoding="utf-8"))
    g = cfg.grids

    stats = []
    for r in g.radii:
        stats.append((f"concentration_r{_fmt_param(r)}", concentration(m, r)))
        stats.append((f"ball_sup_r{_fmt_param(r)}", heaviest_ball(m, r)[1]))
    if not isinstance(m, LayeredMeasure):
        for e in g.eps:
            for r in g.radii:
                stats.append((f"clustering_eps{_fmt_param(e)}_r{_fmt_param(r)}",
                              clustering_mass(m, e, r)))
        for e in g.density_eps:
            stats.append((f"density_clustering_eps{_fmt_param(e)}",
                          density_clustering_mass(m, e)))
    elif g.eps or g.density_eps:
        raise ConfigError("clustering grids need a single-measure snapshot")
    for d in g.deltas:
        stats.append((f"covering_radius_delta{_fmt_param(d)}",
                      covering_radius(m, d)))
    for d in g.deltas:
        for k in g.ball_radii:
            stats.append((f"ball_ind_delta{_fmt_param(d)}_K{_fmt_param(k)}",
                          heaviest_ball(m, k)[1] > 1.0 - d))

    out = pathlib.Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "diagnose.csv"
    _write_csv(csv_path, ["statistic", "value"], stats)
    manifest_path = out / "manifest.json"
    _write_manifest(manifest_path, "diagnose", cfg, [csv_path],
                    extra={"snapshot": str(snapshot_path)})
    return {"csv": csv_path, "manifest": manifest_path, "stats": dict(stats)}
