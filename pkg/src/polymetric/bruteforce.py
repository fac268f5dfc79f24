"""Reference transport costs by enumeration, independent of the flow solver.

Masses are given as integer unit counts. Every basic feasible solution of a
transportation polytope can be produced by repeatedly picking some cell and
shipping min(remaining supply, remaining demand) -- eliminating a leaf of the
solution's spanning forest -- so the minimum over all greedy cell orders is
the exact optimum of the LP. A memoized search over remaining-margin states
walks all such orders.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _capped(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    diff = x[:, None, :] - y[None, :, :]
    return np.minimum(np.sqrt((diff * diff).sum(axis=2)), 1.0)


def min_cost_units(supply_units, demand_units, cost) -> float:
    """Exact optimum of the balanced transportation LP with integer units.

    supply_units / demand_units: tuples of nonnegative ints with equal sums;
    cost: (m, n) array. Returns the optimal cost for unit masses (scale by
    the actual unit size outside).
    """
    supply = tuple(int(u) for u in supply_units)
    demand = tuple(int(v) for v in demand_units)
    if sum(supply) != sum(demand):
        raise ValueError("unbalanced instance")
    cost = np.asarray(cost, dtype=float)
    m, n = cost.shape
    if len(supply) != m or len(demand) != n:
        raise ValueError("margin sizes disagree with the cost matrix")

    @lru_cache(maxsize=None)
    def best(u, v):
        total = sum(u)
        if total == 0:
            return 0.0
        out = np.inf
        for i in range(m):
            if u[i] == 0:
                continue
            for j in range(n):
                if v[j] == 0:
                    continue
                q = u[i] if u[i] < v[j] else v[j]
                nu = list(u)
                nv = list(v)
                nu[i] -= q
                nv[j] -= q
                c = q * cost[i, j] + best(tuple(nu), tuple(nv))
                if c < out:
                    out = c
        return out

    value = best(supply, demand)
    best.cache_clear()
    return float(value)


def wasserstein_units(x, y, supply_units, demand_units, unit: float) -> float:
    """Equal-mass truncated-cost transport, atoms at x / y, masses unit * count."""
    return unit * min_cost_units(supply_units, demand_units, _capped(x, y))


def generalized_wasserstein_units(x, y, supply_units, demand_units, unit: float) -> float:
    """Unequal-mass variant: pad with a disposal row/column at unit price
    (disposal-to-disposal is free) and solve the balanced instance."""
    su = tuple(int(u) for u in supply_units)
    du = tuple(int(v) for v in demand_units)
    m, n = len(su), len(du)
    cost = np.ones((m + 1, n + 1))
    cost[:m, :n] = _capped(x, y)
    cost[m, n] = 0.0
    return unit * min_cost_units(su + (sum(du),), du + (sum(su),), cost)
