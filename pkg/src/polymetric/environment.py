"""Stationary, finite-range random potentials over a white-noise mesh.

The potential at time n is a moving average of i.i.d. mesh-node variables:

    X(n, x) = sigma * sum_j w_j(x) * xi(seed, n, j)

where w_j(x) is the kernel profile evaluated at |x - z_j| and rescaled so
that sum_j w_j(x)^2 = 1 at every x.  The rescaling pins the marginal
variance at exactly sigma^2 (with an exactly normal marginal under the
gaussian law), while the compact kernel support makes values at points
farther apart than ``dependence_range`` share no nodes at all.

Node variables come from a counter-based generator keyed by
(seed, time index, node lattice index), so any window can be regenerated
bit-identically without storing history, and disjoint time indices use
independent streams.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError, NumericContractError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)

_LAWS = ("gaussian", "bounded")


def _mix(h):
    # SplitMix64 finalizer; h is a uint64 scalar or array, wrapping mod 2^64.
    h = (h ^ (h >> np.uint64(30))) * _MIX_A
    h = (h ^ (h >> np.uint64(27))) * _MIX_B
    return h ^ (h >> np.uint64(31))


def _absorb(h, v):
    return _mix((h + _GOLDEN) ^ v)


def split_seed(seed, *parts) -> int:
    """Derive a child seed from a parent seed and a path of labels.

    Parts may be ints or short strings.  The same path always yields the
    same child; distinct paths give unrelated streams.
    """
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
        for p in parts:
            if isinstance(p, str):
                data = p.encode()
                h = _absorb(h, np.uint64(len(data)))
                for k in range(0, len(data), 8):
                    h = _absorb(h, np.uint64(int.from_bytes(data[k : k + 8], "little")))
            else:
                h = _absorb(h, np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF))
        return int(h)


@dataclass(frozen=True)
class FieldSpec:
    """Law and geometry of the potential.

    ``profile`` holds radial kernel samples on [0, dependence_range/2],
    linearly interpolated and zero beyond the last sample, so two points
    farther apart than ``dependence_range`` are independent.  ``mesh`` is
    the white-noise node spacing; it defaults to dependence_range / 8.
    ``kappa_max``, when set, bounds the tilt arguments accepted by
    log_mgf for the bounded law.
    """

    law: str = "gaussian"
    variance: float = 1.0
    dependence_range: float = 1.0
    mesh: float | None = None
    dim: int = 1
    profile: tuple = (1.0, 0.0)
    kappa_max: float | None = None

    def __post_init__(self):
        if self.law not in _LAWS:
            raise ConfigError(f"unknown field law {self.law!r}; expected one of {_LAWS}")
        if not (self.variance > 0.0 and np.isfinite(self.variance)):
            raise ConfigError("variance must be a positive finite real")
        if not (self.dependence_range > 0.0 and np.isfinite(self.dependence_range)):
            raise ConfigError("dependence_range must be a positive finite real")
        if self.mesh is None:
            object.__setattr__(self, "mesh", self.dependence_range / 8.0)
        if not (self.mesh > 0.0 and np.isfinite(self.mesh)):
            raise ConfigError("mesh must be a positive finite real")
        if int(self.dim) < 1:
            raise ConfigError("dim must be >= 1")
        object.__setattr__(self, "dim", int(self.dim))
        prof = tuple(float(p) for p in self.profile)
        if not prof or not all(np.isfinite(prof)):
            raise ConfigError("profile must be a nonempty tuple of finite samples")
        if max(abs(p) for p in prof) == 0.0:
            raise ConfigError("profile must not vanish identically")
        object.__setattr__(self, "profile", prof)
        if self.kappa_max is not None and not self.kappa_max > 0.0:
            raise ConfigError("kappa_max must be positive when set")

    @property
    def kernel_radius(self) -> float:
        return self.dependence_range / 2.0

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.variance))

    def profile_at(self, dist):
        """Interpolated kernel value at radial distance(s); 0 beyond support."""
        dist = np.asarray(dist, dtype=np.float64)
        p = np.asarray(self.profile)
        if len(p) == 1:
            return np.where(dist <= self.kernel_radius, p[0], 0.0)
        grid = np.linspace(0.0, self.kernel_radius, len(p))
        return np.interp(dist, grid, p, right=0.0)


class Window(NamedTuple):
    """Axis-aligned evaluation grid: origin + k * spacing per axis."""

    origin: tuple
    shape: tuple
    spacing: float

    def grid_points(self) -> np.ndarray:
        axes = [
            np.asarray(o, dtype=np.float64) + self.spacing * np.arange(s)
            for o, s in zip(self.origin, self.shape)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class FieldSample:
    """One time slice on a window, regenerable from (seed, time_index, window)."""

    time_index: int
    window: Window
    values: np.ndarray
    seed: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericContractError("field values must be finite")
        self.values.flags.writeable = False

    def to_bytes(self) -> bytes:
        """Flat little-endian export: u32 dim, u32 shape, f64 origin, f64 spacing, f64 values."""
        d = len(self.window.shape)
        head = struct.pack("<I", d)
        head += struct.pack(f"<{d}I", *self.window.shape)
        head += struct.pack(f"<{d}d", *self.window.origin)
        head += struct.pack("<d", self.window.spacing)
        return head + self.values.astype("<f8").tobytes()


def field_sample_from_bytes(data: bytes, time_index: int = 0, seed: int = 0) -> FieldSample:
    (d,) = struct.unpack_from("<I", data, 0)
    off = 4
    shape = struct.unpack_from(f"<{d}I", data, off)
    off += 4 * d
    origin = struct.unpack_from(f"<{d}d", data, off)
    off += 8 * d
    (spacing,) = struct.unpack_from("<d", data, off)
    off += 8
    values = np.frombuffer(data, dtype="<f8", offset=off).reshape(shape).copy()
    return FieldSample(time_index, Window(origin, shape, spacing), values, seed)


def _stencil_offsets(spec: FieldSpec):
    # Node offsets covering the kernel support around the node nearest a point.
    reach = int(np.ceil(spec.kernel_radius / spec.mesh + 0.5 + 1e-9))
    axis = np.arange(-reach, reach + 1, dtype=np.int64)
    if (2 * reach + 1) ** spec.dim > 200_000:
        raise ConfigError(
            "kernel stencil too large; increase mesh or shrink dependence_range"
        )
    grids = np.meshgrid(*([axis] * spec.dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _kernel_weights(spec: FieldSpec, points):
    """Per-point node stencil and variance-normalized kernel weights.

    Returns (nodes, weights): nodes has shape (npoints, nstencil, dim) with
    absolute lattice indices, weights (npoints, nstencil) with unit sum of
    squares along the stencil axis.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[1] != spec.dim:
        raise ConfigError(f"points have dim {pts.shape[1]}, field spec has dim {spec.dim}")
    offs = _stencil_offsets(spec)
    base = np.rint(pts / spec.mesh).astype(np.int64)
    nodes = base[:, None, :] + offs[None, :, :]
    z = nodes * spec.mesh
    dist = np.sqrt(((pts[:, None, :] - z) ** 2).sum(axis=-1))
    w = spec.profile_at(dist)
    nrm2 = (w * w).sum(axis=1)
    if np.any(nrm2 <= 1e-300):
        raise NumericContractError(
            "kernel covers no node at some evaluation point; mesh too coarse"
        )
    return nodes, w / np.sqrt(nrm2)[:, None]


def _node_values(spec: FieldSpec, seed, time_index, nodes):
    # i.i.d. unit-variance node draws keyed by (seed, time, lattice index).
    with np.errstate(over="ignore"):
        h = _absorb(_mix(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)),
                    np.uint64(int(time_index) & 0xFFFFFFFFFFFFFFFF))
        h = np.broadcast_to(h, nodes.shape[:-1]).copy()
        for a in range(nodes.shape[-1]):
            h = _absorb(h, nodes[..., a].astype(np.uint64))
    u = (h >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54
    if spec.law == "gaussian":
        return ndtri(u)
    return np.sqrt(3.0) * (2.0 * u - 1.0)


def field_at(spec: FieldSpec, time_index: int, points, seed) -> np.ndarray:
    """Potential values at arbitrary points, deterministic in (seed, time, point)."""
    nodes, w = _kernel_weights(spec, points)
    xi = _node_values(spec, seed, time_index, nodes)
    return spec.sigma * (w * xi).sum(axis=1)


def _check_mesh_aligned(spec: FieldSpec, window: Window):
    if len(window.origin) != spec.dim or len(window.shape) != spec.dim:
        raise ConfigError("window dimension does not match field spec")
    for o in window.origin:
        q = o / spec.mesh
        if abs(q - round(q)) > 1e-9:
            raise ConfigError(f"window origin {o} is not on the white-noise mesh")
    q = window.spacing / spec.mesh
    if abs(q - round(q)) > 1e-9 or round(q) < 1:
        raise ConfigError(
            f"window spacing {window.spacing} is not a positive multiple of the mesh"
        )


def sample_field(spec: FieldSpec, time_index: int, window: Window, seed) -> FieldSample:
    """One time slice on a mesh-aligned window grid.

    Same (seed, time_index, window) always regenerates identical bytes.
    """
    _check_mesh_aligned(spec, window)
    vals = field_at(spec, time_index, window.grid_points(), seed)
    return FieldSample(int(time_index), window, vals.reshape(window.shape), int(seed))


def _log_sinhc(t):
    # log(sinh(t)/t), even in t, stable through t = 0.
    t = np.abs(np.asarray(t, dtype=np.float64))
    small = t < 1e-4
    series = t * t / 6.0 - t**4 / 180.0
    safe = np.where(small, 1.0, t)
    exact = safe - np.log(2.0) + np.log1p(-np.exp(-2.0 * safe)) - np.log(safe)
    return np.where(small, series, exact)


def log_mgf(spec: FieldSpec, kappa) -> float:
    """log E exp(kappa * X(n, x)) at a mesh node.

    Gaussian law: exactly kappa^2 * variance / 2.  Bounded law: the exact
    finite product over stencil nodes, log sum of log(sinh(t_j)/t_j) with
    t_j = kappa * sigma * sqrt(3) * w_j; finite for every kappa but
    rejected outside [-kappa_max, kappa_max] when that bound is set.
    """
    kappa = float(kappa)
    if spec.law == "gaussian":
        return 0.5 * kappa * kappa * spec.variance
    if spec.kappa_max is not None and abs(kappa) > spec.kappa_max + 1e-12:
        raise ConfigError(
            f"kappa {kappa} outside configured domain [-{spec.kappa_max}, {spec.kappa_max}]"
        )
    _, w = _kernel_weights(spec, np.zeros((1, spec.dim)))
    t = kappa * spec.sigma * np.sqrt(3.0) * w[0]
    return float(_log_sinhc(t).sum())
