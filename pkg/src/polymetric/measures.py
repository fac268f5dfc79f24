"""Subprobability measures on R^d: atomic, gridded, and layered collections.

All measures carry total mass at most 1 (small slack for rounding). Balls are
open everywhere. Layered collections assign measures to integer layer keys;
points in distinct layers are at infinite distance from each other.
"""

from __future__ import annotations

import base64
import json
import math

import numpy as np

from .errors import NumericContractError

MASS_TOL = 1e-12   # slack on the unit-mass cap and on step normalization
MERGE_TOL = 1e-12  # atoms closer than this in max-norm are merged


def _merge_atoms(pos, w):
    # Lexicographic sort, then group rows whose consecutive max-norm gap is
    # within MERGE_TOL. Exact duplicates always land in one group; the first
    # row of a group keeps its position, weights add.
    if len(w) == 0:
        return pos, w
    order = np.lexsort(pos.T[::-1])
    pos = pos[order]
    w = w[order]
    gap = np.abs(np.diff(pos, axis=0)).max(axis=1)
    starts = np.flatnonzero(np.concatenate(([True], gap > MERGE_TOL)))
    if len(starts) == len(w):
        return pos, w
    merged_w = np.add.reduceat(w, starts)
    return np.ascontiguousarray(pos[starts]), merged_w


class PointMeasure:
    """Finite atomic measure: positions (m, d), strictly positive weights (m,).

    Construction canonicalizes: atoms are sorted lexicographically and
    near-duplicates merged. The empty measure (m = 0) is allowed.
    """

    __slots__ = ("positions", "weights")

    def __init__(self, positions, weights):
        pos = np.atleast_1d(np.asarray(positions, dtype=np.float64))
        w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1)
        if pos.ndim != 2:
            raise ValueError("positions must be an (m, d) array")
        if w.ndim != 1 or len(w) != len(pos):
            raise ValueError("weights must be a vector matching positions")
        if not np.all(np.isfinite(pos)):
            raise NumericContractError("atom positions must be finite")
        if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
            raise NumericContractError("atom weights must be finite and > 0")
        pos, w = _merge_atoms(np.ascontiguousarray(pos), w)
        total = float(w.sum())
        if total > 1.0 + MASS_TOL:
            raise NumericContractError(f"total mass {total} exceeds 1")
        self.positions = pos
        self.weights = w
        self.positions.flags.writeable = False
        self.weights.flags.writeable = False

    @classmethod
    def empty(cls, dim: int = 1) -> "PointMeasure":
        m = cls.__new__(cls)
        m.positions = np.zeros((0, dim))
        m.weights = np.zeros(0)
        return m

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def __len__(self):
        return len(self.weights)

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def translated(self, shift) -> "PointMeasure":
        shift = np.asarray(shift, dtype=np.float64).reshape(-1)
        if shift.shape != (self.dim,):
            raise ValueError("shift dimension mismatch")
        if len(self) == 0:
            return PointMeasure.empty(self.dim)
        return PointMeasure(self.positions + shift, self.weights)

    def scaled(self, c: float) -> "PointMeasure":
        if c < 0:
            raise ValueError("scale must be nonnegative")
        if c == 0 or len(self) == 0:
            return PointMeasure.empty(self.dim)
        return PointMeasure(self.positions, self.weights * c)

    def restricted(self, mask) -> "PointMeasure":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return PointMeasure.empty(self.dim)
        return PointMeasure(self.positions[mask], self.weights[mask])

    def __eq__(self, other):
        if not isinstance(other, PointMeasure):
            return NotImplemented
        return (
            self.positions.shape == other.positions.shape
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None

    def __repr__(self):
        return f"PointMeasure({len(self)} atoms, dim={self.dim}, mass={self.total_mass():.6g})"


class GridMeasure:
    """Cell masses on a uniform grid; cell i sits at origin + i * spacing."""

    __slots__ = ("origin", "spacing", "values")

    def __init__(self, origin, spacing: float, values):
        vals = np.ascontiguousarray(values, dtype=np.float64)
        origin = np.atleast_1d(np.asarray(origin, dtype=np.float64))
        if vals.ndim != len(origin):
            raise ValueError("values rank must equal len(origin)")
        if not (spacing > 0 and math.isfinite(spacing)):
            raise ValueError("spacing must be positive and finite")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise NumericContractError("cell masses must be finite and >= 0")
        total = float(vals.sum())
        if total > 1.0 + MASS_TOL:
            raise NumericContractError(f"total mass {total} exceeds 1")
        self.origin = origin
        self.spacing = float(spacing)
        self.values = vals
        self.origin.flags.writeable = False
        self.values.flags.writeable = False

    @property
    def dim(self) -> int:
        return len(self.origin)

    @property
    def shape(self):
        return self.values.shape

    def total_mass(self) -> float:
        return float(self.values.sum())

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing * np.arange(self.shape[axis])

    def cell_centers(self) -> np.ndarray:
        """All cell centers as an (N, d) array, C order."""
        axes = [self.axis_coords(i) for i in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def translated(self, shift) -> "GridMeasure":
        shift = np.asarray(shift, dtype=np.float64).reshape(-1)
        return GridMeasure(self.origin + shift, self.spacing, self.values)

    def to_point_measure(self, floor: float = 1e-12):
        """Atoms at nonzero cell centers; cells with mass <= floor are dropped.

        Returns (measure, dropped_mass).
        """
        centers = self.cell_centers()
        w = self.values.ravel()
        keep = w > floor
        dropped = float(w[~keep].sum())
        if not keep.any():
            return PointMeasure.empty(self.dim), dropped
        return PointMeasure(centers[keep], w[keep]), dropped

    def __eq__(self, other):
        if not isinstance(other, GridMeasure):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and np.array_equal(self.origin, other.origin)
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __repr__(self):
        return f"GridMeasure(shape={self.shape}, h={self.spacing}, mass={self.total_mass():.6g})"


class LayeredMeasure:
    """Finite collection of measures keyed by integer layer, total mass <= 1.

    Every stored layer must have strictly positive mass; distances across
    layers are infinite, so per-layer statistics never mix layers.
    """

    __slots__ = ("layers",)

    def __init__(self, layers):
        if isinstance(layers, dict):
            items = sorted(layers.items())
        else:
            items = sorted(layers)
        clean = {}
        dim = None
        for key, m in items:
            key = int(key)
            if key in clean:
                raise ValueError(f"duplicate layer key {key}")
            if not isinstance(m, (PointMeasure, GridMeasure)):
                raise TypeError("layers must hold PointMeasure or GridMeasure")
            if m.total_mass() <= 0.0:
                raise NumericContractError(f"layer {key} has zero mass")
            if dim is None:
                dim = m.dim
            elif m.dim != dim:
                raise ValueError("all layers must share one dimension")
            clean[key] = m
        total = sum(m.total_mass() for m in clean.values())
        if total > 1.0 + MASS_TOL:
            raise NumericContractError(f"total mass {total} exceeds 1")
        self.layers = clean

    @classmethod
    def single(cls, m, key: int = 0) -> "LayeredMeasure":
        return cls({key: m})

    @classmethod
    def zero(cls) -> "LayeredMeasure":
        return cls({})

    @property
    def dim(self):
        for m in self.layers.values():
            return m.dim
        return None

    def items(self):
        return sorted(self.layers.items())

    def keys(self):
        return sorted(self.layers)

    def __len__(self):
        return len(self.layers)

    def total_mass(self) -> float:
        return float(sum(m.total_mass() for m in self.layers.values()))

    def __eq__(self, other):
        if not isinstance(other, LayeredMeasure):
            return NotImplemented
        return self.keys() == other.keys() and all(
            self.layers[k] == other.layers[k] for k in self.layers
        )

    __hash__ = None

    def __repr__(self):
        return f"LayeredMeasure({len(self)} layers, mass={self.total_mass():.6g})"


def total_mass(m) -> float:
    return m.total_mass()


# ---------------------------------------------------------------------------
# convolution


def convolve(m, step):
    """Convolve a measure with a step distribution (or raw measure).

    point * point -> point (duplicate sums merge exactly);
    grid * grid   -> grid, by direct shift-and-add (no FFT, sums are exact);
    grid * point  -> grid, when the step's atoms are exact multiples of the
    spacing. point * grid is not representable and raises.
    """
    step_m = step.measure if isinstance(step, StepDistribution) else step
    if isinstance(m, PointMeasure) and isinstance(step_m, PointMeasure):
        if m.dim != step_m.dim:
            raise ValueError("dimension mismatch")
        if len(m) == 0 or len(step_m) == 0:
            return PointMeasure.empty(m.dim)
        pos = (m.positions[:, None, :] + step_m.positions[None, :, :]).reshape(-1, m.dim)
        w = np.outer(m.weights, step_m.weights).ravel()
        live = w > 0.0  # subnormal inputs can underflow to exact zero
        if not live.all():
            pos, w = pos[live], w[live]
        return PointMeasure(pos, w)
    if isinstance(m, GridMeasure) and isinstance(step_m, GridMeasure):
        if m.dim != step_m.dim:
            raise ValueError("dimension mismatch")
        if abs(m.spacing - step_m.spacing) > 1e-12 * m.spacing:
            raise ValueError("grid spacings differ")
        if m.dim == 1:
            vals = np.convolve(m.values, step_m.values)
        else:
            out_shape = tuple(a + b - 1 for a, b in zip(m.shape, step_m.shape))
            vals = np.zeros(out_shape)
            it = np.ndindex(step_m.shape)
            for idx in it:
                c = step_m.values[idx]
                if c == 0.0:
                    continue
                sl = tuple(slice(i, i + s) for i, s in zip(idx, m.shape))
                vals[sl] += c * m.values
        return GridMeasure(m.origin + step_m.origin, m.spacing, vals)
    if isinstance(m, GridMeasure) and isinstance(step_m, PointMeasure):
        if m.dim != step_m.dim:
            raise ValueError("dimension mismatch")
        offs = step_m.positions / m.spacing
        k = np.rint(offs)
        if np.max(np.abs(offs - k)) > 1e-9:
            raise ValueError("point step atoms must sit on the grid lattice")
        k = k.astype(np.int64)
        lo = k.min(axis=0)
        hi = k.max(axis=0)
        out_shape = tuple(s + int(h - l) for s, l, h in zip(m.shape, lo, hi))
        vals = np.zeros(out_shape)
        for row, wgt in zip(k, step_m.weights):
            sl = tuple(slice(int(r - l), int(r - l) + s) for r, l, s in zip(row, lo, m.shape))
            vals[sl] += wgt * m.values
        return GridMeasure(m.origin + lo * m.spacing, m.spacing, vals)
    raise TypeError(f"cannot convolve {type(m).__name__} with {type(step_m).__name__}")


# ---------------------------------------------------------------------------
# balls


def _point_ball_mass(pos, w, center, r):
    if len(w) == 0 or r <= 0:
        return 0.0
    d2 = np.sum((pos - center) ** 2, axis=1)
    return float(w[d2 < r * r].sum())  # open ball: strict inequality


def ball_mass(m, center, r: float) -> float:
    """Mass of the open ball of radius r. For layered measures the center is
    a (layer, point) pair and only that layer contributes."""
    if r < 0:
        raise ValueError("radius must be >= 0")
    if isinstance(m, LayeredMeasure):
        key, point = center
        key = int(key)
        if key not in m.layers:
            return 0.0
        return ball_mass(m.layers[key], point, r)
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    if isinstance(m, GridMeasure):
        pm, _ = m.to_point_measure(floor=0.0)
        m = pm
    if center.shape != (m.dim,):
        raise ValueError("center dimension mismatch")
    return _point_ball_mass(m.positions, m.weights, center, r)


def _heaviest_interval(pos, w, r):
    # Densest open interval of length 2r over sorted atoms; exact in 1-d.
    order = np.argsort(pos, kind="stable")
    p = pos[order]
    ww = w[order]
    cum = np.concatenate(([0.0], np.cumsum(ww)))
    left = np.searchsorted(p, p - 2.0 * r, side="right")
    masses = cum[np.arange(1, len(p) + 1)] - cum[left]
    i = int(np.argmax(masses))
    center = 0.5 * (p[left[i]] + p[i])
    return np.array([center]), float(masses[i])


_MAX_ATOMS_BALL_SEARCH = 4096


def heaviest_ball(m, r: float):
    """Best open ball of radius r: returns (center, mass).

    Exact in one dimension (sliding-window scan over sorted atoms). In
    d >= 2 the search uses atom positions and pairwise midpoints, which is
    exact whenever some optimal ball is pinned by at most two atoms.
    For layered measures returns ((layer, center), mass), best layer first.
    """
    if r < 0:
        raise ValueError("radius must be >= 0")
    if isinstance(m, LayeredMeasure):
        best = (None, 0.0)
        for key, layer in m.items():
            c, mass = heaviest_ball(layer, r)
            if mass > best[1]:
                best = ((key, c), mass)
        return best
    if isinstance(m, GridMeasure):
        pm, _ = m.to_point_measure(floor=0.0)
        m = pm
    if len(m) == 0 or r == 0.0:
        return None, 0.0
    pos, w = m.positions, m.weights
    if m.dim == 1:
        center, mass = _heaviest_interval(pos[:, 0], w, r)
        return center, mass
    if len(m) > _MAX_ATOMS_BALL_SEARCH:
        raise NumericContractError(
            f"ball search in dim {m.dim} supports at most {_MAX_ATOMS_BALL_SEARCH} atoms"
        )
    mids = 0.5 * (pos[:, None, :] + pos[None, :, :]).reshape(-1, m.dim)
    cands = np.concatenate([pos, mids], axis=0)
    d2 = np.sum((cands[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    masses = np.where(d2 < r * r, w[None, :], 0.0).sum(axis=1)
    i = int(np.argmax(masses))
    return cands[i].copy(), float(masses[i])


# ---------------------------------------------------------------------------
# step distributions


class StepDistribution:
    """Unit-mass step law for the walk: a PointMeasure or GridMeasure with
    total mass 1 (within 1e-12) and at least two support points."""

    __slots__ = ("measure", "truncation_error")

    def __init__(self, measure, truncation_error: float = 0.0):
        if not isinstance(measure, (PointMeasure, GridMeasure)):
            raise TypeError("step must wrap a PointMeasure or GridMeasure")
        total = measure.total_mass()
        if abs(total - 1.0) > MASS_TOL:
            raise NumericContractError(f"step mass {total} is not 1")
        n_support = (
            len(measure)
            if isinstance(measure, PointMeasure)
            else int(np.count_nonzero(measure.values))
        )
        if n_support < 2:
            raise NumericContractError("step needs at least two support points")
        self.measure = measure
        self.truncation_error = float(truncation_error)

    @property
    def dim(self):
        return self.measure.dim

    def support_extent(self) -> np.ndarray:
        """Per-axis max |offset| of the support; drives window growth."""
        if isinstance(self.measure, PointMeasure):
            return np.abs(self.measure.positions).max(axis=0)
        nz = np.argwhere(self.measure.values > 0)
        coords = self.measure.origin + nz * self.measure.spacing
        return np.abs(coords).max(axis=0)

    @classmethod
    def uniform_lattice(cls, offsets=(-1.0, 0.0, 1.0), dim: int = 1) -> "StepDistribution":
        offs = np.asarray(offsets, dtype=np.float64)
        if offs.ndim == 1 and dim == 1:
            pos = offs.reshape(-1, 1)
        elif offs.ndim == 2:
            pos = offs
        else:
            raise ValueError("offsets must be a vector (dim=1) or an (m, d) array")
        w = np.full(len(pos), 1.0 / len(pos))
        return cls(PointMeasure(pos, w))

    @classmethod
    def triangular_grid(cls, halfwidth: float, spacing: float) -> "StepDistribution":
        """Triangular density (1 - |x|/W)/W on [-W, W], cell-integrated on a
        1-d grid of the given spacing."""
        if not (0 < spacing <= halfwidth):
            raise ValueError("need 0 < spacing <= halfwidth")
        W = float(halfwidth)

        def cdf(x):
            x = np.clip(x, -W, W)
            return np.where(x < 0, 0.5 * (1 + x / W) ** 2, 1 - 0.5 * (1 - x / W) ** 2)

        n = int(math.ceil(W / spacing))
        centers = spacing * np.arange(-n, n + 1)
        w = cdf(centers + spacing / 2) - cdf(centers - spacing / 2)
        keep = w > 0
        w = w[keep]
        w = w / w.sum()
        origin = np.array([centers[keep][0]])
        return cls(GridMeasure(origin, spacing, w))

    def __repr__(self):
        return f"StepDistribution({self.measure!r})"


def truncated_step(m: PointMeasure, mass_tol: float) -> StepDistribution:
    """Drop the farthest atoms of a near-unit-mass point law until the
    removed mass stays within mass_tol, renormalize, and record the error."""
    if len(m) < 2:
        raise ValueError("need at least two atoms")
    dist = np.linalg.norm(m.positions, axis=1)
    order = np.argsort(-dist, kind="stable")  # farthest first
    dropped = 0.0
    cut = 0
    for idx in order:
        if dropped + m.weights[idx] > mass_tol or len(m) - cut <= 2:
            break
        dropped += float(m.weights[idx])
        cut += 1
    keep = np.ones(len(m), dtype=bool)
    keep[order[:cut]] = False
    w = m.weights[keep]
    return StepDistribution(
        PointMeasure(m.positions[keep], w / w.sum()), truncation_error=dropped
    )


# ---------------------------------------------------------------------------
# serialization (bit-faithful: arrays travel as little-endian float64 bytes)


def _enc(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _dec(s: str, shape) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)
    return a.reshape(shape)


def to_json(m) -> dict:
    if isinstance(m, PointMeasure):
        return {
            "kind": "point",
            "shape": list(m.positions.shape),
            "positions": _enc(m.positions),
            "weights": _enc(m.weights),
        }
    if isinstance(m, GridMeasure):
        return {
            "kind": "grid",
            "origin": _enc(m.origin),
            "spacing": m.spacing.hex(),
            "shape": list(m.values.shape),
            "values": _enc(m.values),
        }
    if isinstance(m, LayeredMeasure):
        return {
            "kind": "layered",
            "layers": [[k, to_json(v)] for k, v in m.items()],
        }
    raise TypeError(f"cannot serialize {type(m).__name__}")


def from_json(obj: dict):
    kind = obj.get("kind")
    if kind == "point":
        shape = tuple(obj["shape"])
        if shape[0] == 0:
            return PointMeasure.empty(shape[1])
        return PointMeasure(_dec(obj["positions"], shape), _dec(obj["weights"], (shape[0],)))
    if kind == "grid":
        shape = tuple(obj["shape"])
        return GridMeasure(
            _dec(obj["origin"], (len(shape),)),
            float.fromhex(obj["spacing"]),
            _dec(obj["values"], shape),
        )
    if kind == "layered":
        return LayeredMeasure({int(k): from_json(v) for k, v in obj["layers"]})
    raise ValueError(f"unknown measure kind {kind!r}")


def dumps(m) -> str:
    return json.dumps(to_json(m), sort_keys=True, separators=(",", ":"))


def loads(s: str):
    return from_json(json.loads(s))
