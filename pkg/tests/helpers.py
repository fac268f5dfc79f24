"""Shared generators for the test suite: rational-mass instances and the like."""

import numpy as np

from polymetric.measures import PointMeasure


def rational_pair(rng, max_atoms=4, dim=1, balanced=True, scale=2.0):
    """Two atomic measures whose weights are integer multiples of one unit.

    Returns (a, g, x, y, su, du, unit); unit counts su/du make the pair an
    exact input for the enumeration oracle.
    """
    m = int(rng.integers(1, max_atoms + 1))
    n = int(rng.integers(1, max_atoms + 1))
    su = rng.integers(1, 5, m)
    if balanced:
        # Distribute exactly su.sum() units over n atoms, each getting >= 1.
        total = int(su.sum())
        n = min(n, total)
        du = np.ones(n, dtype=np.int64)
        for _ in range(total - n):
            du[int(rng.integers(0, n))] += 1
    else:
        du = rng.integers(1, 5, n)
    denom = 4 * max(int(su.sum()), int(du.sum()), 1)
    unit = 1.0 / denom
    x = rng.normal(0.0, scale, (m, dim))
    y = rng.normal(0.0, scale, (n, dim))
    a = PointMeasure(x, su * unit)
    g = PointMeasure(y, du * unit)
    return a, g, x, y, tuple(int(v) for v in su), tuple(int(v) for v in du), unit


def random_prob_measure(rng, max_atoms=4, dim=1, scale=2.0):
    m = int(rng.integers(1, max_atoms + 1))
    w = rng.uniform(0.2, 1.0, m)
    return PointMeasure(rng.normal(0.0, scale, (m, dim)), w / w.sum())


def random_layered(rng, max_atoms=3, max_layers=2, scale=4.0):
    """Small layered subprobability measure with well-separated atoms."""
    from polymetric.measures import LayeredMeasure

    layers = {}
    budget = 1.0
    for k in range(int(rng.integers(1, max_layers + 1))):
        n = int(rng.integers(1, max_atoms + 1))
        w = rng.uniform(0.05, 0.4, n)
        if w.sum() > 0.95 * budget:
            w *= 0.9 * budget / w.sum()
        budget -= w.sum()
        pos = np.round(rng.uniform(-scale, scale, n), 2) + np.arange(n) * 1e-3
        layers[k] = PointMeasure(pos.reshape(-1, 1), w)
    return LayeredMeasure(layers)
