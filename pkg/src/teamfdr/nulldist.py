"""Exact discrete null distributions for node counts.

A leaf count is ``Binom(n, theta0)``.  A parent node's count is the sum of its
two children's counts, each conditioned on having survived the previous
layer's test, i.e. on ``G(Z) > c_prev`` which is the same as ``Z <= bhat``.
The parent null is therefore the convolution of the two truncated,
renormalized child nulls.  Everything here is exact enumeration; no normal or
saddlepoint approximations are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Hashable

import numpy as np
from scipy.special import gammaln

from . import _dd

__all__ = [
    "DegenerateNullError",
    "DiscreteDist",
    "LayeredNull",
    "NullCache",
    "binomial_dist",
    "build_layer_null",
    "ccdf",
    "convolve",
    "leaf_null",
    "threshold_count",
    "truncate_renormalize",
]

PMF_SUM_TOL = 1e-12


class DegenerateNullError(ValueError):
    """Raised when a conditioning event has probability zero."""


@dataclass(frozen=True, eq=False)
class DiscreteDist:
    """A distribution on ``0 .. support_max``.

    ``pmf`` holds the float64 probabilities; ``pmf_lo`` holds the low-order
    parts of a double-double representation (zeros when the pmf is exact
    as given).
    """

    pmf: np.ndarray
    pmf_lo: np.ndarray = field(default=None)

    def __post_init__(self):
        pmf = np.array(self.pmf, dtype=np.float64, copy=True).ravel()
        if pmf.size == 0:
            raise ValueError("pmf must have at least one entry")
        lo = (np.zeros_like(pmf) if self.pmf_lo is None
              else np.array(self.pmf_lo, dtype=np.float64, copy=True).ravel())
        if lo.shape != pmf.shape:
            raise ValueError("pmf_lo must match pmf in shape")
        if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
            raise ValueError("pmf entries must be finite and non-negative")
        total = float(np.sum(pmf))
        if abs(total - 1.0) > PMF_SUM_TOL:
            raise ValueError(f"pmf sums to {total!r}, not 1")
        pmf.flags.writeable = False
        lo.flags.writeable = False
        object.__setattr__(self, "pmf", pmf)
        object.__setattr__(self, "pmf_lo", lo)

    @property
    def support_max(self) -> int:
        return self.pmf.size - 1

    @cached_property
    def _tail(self) -> tuple[np.ndarray, np.ndarray]:
        hi, lo = _dd.dd_suffix(self.pmf, self.pmf_lo)
        hi.flags.writeable = False
        lo.flags.writeable = False
        return hi, lo

    @property
    def tail(self) -> np.ndarray:
        """``tail[x] = P(Z > x)`` for ``x`` in the support."""
        return self._tail[0]

    def ccdf(self, x):
        """Vectorized ``P(Z > x)`` for integer ``x`` (any range)."""
        x = np.asarray(x, dtype=np.int64)
        out = np.where(x < 0, 1.0, 0.0)
        inside = (x >= 0) & (x < self.support_max)
        out[inside] = self.tail[x[inside]]
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"DiscreteDist(support_max={self.support_max})"


def binomial_dist(n: int, theta: float) -> DiscreteDist:
    """``Binom(n, theta)`` seeded from log-gamma and renormalized."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta!r}")
    n = int(n)
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    k = np.arange(n + 1, dtype=np.float64)
    logpmf = (gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)
              + k * np.log(theta) + (n - k) * np.log1p(-theta))
    raw = np.exp(logpmf)
    zeros = np.zeros_like(raw)
    th, tl = _dd.dd_sum(raw, zeros, raw.size)
    hi, lo = _dd.dd_scale(raw, zeros, raw.size, th, tl)
    return DiscreteDist(hi, lo)


def ccdf(dist: DiscreteDist, x: int) -> float:
    """``P(Z > x)``: 1 below the support, 0 at or beyond its top."""
    return dist.ccdf(int(x))


def threshold_count(dist: DiscreteDist, c_hat: float) -> int:
    """Largest ``z`` with ``P(Z > z) > c_hat``; -1 when there is none.

    A count survives the test at level ``c_hat`` iff it is ``<= bhat``.
    """
    if not 0.0 < c_hat < 1.0:
        raise ValueError(f"c_hat must lie in (0, 1), got {c_hat!r}")
    # tail is nonincreasing, so the survivors form a prefix
    return int(np.count_nonzero(dist.tail > c_hat)) - 1


def truncate_renormalize(dist: DiscreteDist, bhat: int) -> DiscreteDist:
    """Condition ``dist`` on ``Z <= bhat``."""
    bhat = int(bhat)
    if bhat < 0:
        raise DegenerateNullError("cannot condition on an empty event (bhat = -1)")
    if bhat >= dist.support_max:
        return dist
    mh, ml = _dd.dd_sum(dist.pmf, dist.pmf_lo, bhat + 1)
    if mh <= 0.0:
        raise DegenerateNullError(f"P(Z <= {bhat}) is zero")
    hi, lo = _dd.dd_scale(dist.pmf, dist.pmf_lo, bhat + 1, mh, ml)
    return DiscreteDist(hi, lo)


def convolve(a: DiscreteDist, b: DiscreteDist) -> DiscreteDist:
    """Distribution of the sum of independent draws from ``a`` and ``b``."""
    hi, lo = _dd.dd_convolve(a.pmf, a.pmf_lo, b.pmf, b.pmf_lo)
    return DiscreteDist(hi, lo)


@dataclass(frozen=True, eq=False)
class LayeredNull:
    """Conditional null of a node count on a given layer.

    ``key`` identifies the null structurally: ``(n, theta0)`` on layer 1 and
    ``(key1, key2, c_hat_prev)`` above it.  Nodes with equal keys share
    identical nulls.
    """

    layer: int
    dist: DiscreteDist
    key: Hashable
    children: tuple = ()
    bhat: int | None = None

    def with_threshold(self, c_hat: float) -> "LayeredNull":
        return replace(self, bhat=threshold_count(self.dist, c_hat))

    def ccdf(self, x):
        return self.dist.ccdf(x)


def leaf_null(n: int, theta0: float) -> LayeredNull:
    return LayeredNull(1, binomial_dist(n, theta0), (int(n), float(theta0)))


class NullCache:
    """Memo for :func:`build_layer_null` keyed by (layer, child keys, c_prev)."""

    def __init__(self):
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, key):
        found = self._store.get(key)
        if found is None:
            self.misses += 1
        else:
            self.hits += 1
        return found

    def put(self, key, value):
        self._store[key] = value

    def __len__(self):
        return len(self._store)


def build_layer_null(child1: LayeredNull, child2: LayeredNull, c_hat_prev: float,
                     cache: NullCache | None = None) -> LayeredNull:
    """Null of ``Z1 + Z2`` given both children survived at ``c_hat_prev``.

    Raises :class:`DegenerateNullError` when a child cannot survive at all.
    """
    if child1.layer != child2.layer:
        raise ValueError("children must live on the same layer")
    layer = child1.layer + 1
    key = (child1.key, child2.key, float(c_hat_prev))
    if cache is not None:
        hit = cache.get((layer, key))
        if hit is not None:
            return hit
    b1 = threshold_count(child1.dist, c_hat_prev)
    b2 = threshold_count(child2.dist, c_hat_prev)
    if b1 < 0 or b2 < 0:
        raise DegenerateNullError("a child node cannot survive the previous layer")
    dist = convolve(truncate_renormalize(child1.dist, b1),
                    truncate_renormalize(child2.dist, b2))
    node = LayeredNull(layer, dist, key,
                       children=(replace(child1, bhat=b1), replace(child2, bhat=b2)))
    if cache is not None:
        cache.put((layer, key), node)
    return node
