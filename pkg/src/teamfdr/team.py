"""Multi-layer aggregation-tree testing of leaf bins.

Layer 1 tests every leaf count against ``Binom(n_i, theta0)`` with a
BH-like threshold that has a floor ``(m log m)^-1``.  Each further layer pairs
consecutive surviving nodes (in ordinal leaf order), tests the pair's summed
count against its conditional null given that both children survived, and
maps a rejected node back to all of its leaves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .ingest import DataError, MarkerMatrix
from .nulldist import LayeredNull, NullCache, build_layer_null, leaf_null
from .partition import (LeafBinning, PartitionSpec, build_partition, default_bins_per_dim,
                        default_splits)

__all__ = [
    "TEAM",
    "LayerRecord",
    "LayerState",
    "Node",
    "StoppingRule",
    "TeamResult",
    "a_floor",
    "aggregate_pairs",
    "choose_max_layers",
    "find_threshold",
    "layer_pvalues",
    "map_to_leaves",
    "reject_nodes",
    "run_team",
    "run_team_counts",
    "should_stop",
]

PValueHook = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def a_floor(m_layer: int) -> float:
    """Lowest admissible threshold on a layer with ``m_layer`` nodes."""
    if m_layer < 2:
        raise ValueError("the threshold floor needs at least 2 nodes")
    return 1.0 / (m_layer * math.log(m_layer))


def find_threshold(pvalues, alpha: float) -> float:
    """Supremum of ``c`` in ``[a_N, alpha]`` with ``c <= max(#{P <= c}, 1) * alpha / m``.

    The admissible set is closed upward to the corner ``k * alpha / m`` of the
    step function, so the supremum is the largest admissible corner; when no
    corner is admissible the floor ``a_N`` is returned.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    p = np.sort(np.asarray(pvalues, dtype=np.float64))
    m = p.size
    floor = a_floor(m)
    k = np.arange(1, m + 1)
    corners = k * alpha / m
    # k = 1 is admissible regardless of the p-values because of the max(., 1)
    ok = (corners >= floor) & ((p <= corners) | (k == 1))
    if not ok.any():
        return floor
    return float(corners[np.flatnonzero(ok)[-1]])


def reject_nodes(pvalues, c_hat: float) -> np.ndarray:
    """Indices of nodes with ``P <= c_hat``."""
    return np.flatnonzero(np.asarray(pvalues) <= c_hat)


def aggregate_pairs(leaf_sets) -> tuple[np.ndarray, np.ndarray | None]:
    """Pair consecutive surviving nodes: 1st+2nd, 3rd+4th, ...

    ``leaf_sets`` is a sequence of equally sized leaf-index collections sorted
    by their smallest leaf.  Returns the parents' leaf sets (one row each)
    and the unpaired last node, if any.
    """
    sets = np.asarray(leaf_sets)
    if sets.ndim == 1:
        sets = sets[:, None]
    if sets.shape[0] < 2:
        raise ValueError("need at least 2 surviving nodes to aggregate")
    k = sets.shape[0] // 2
    parents = np.hstack([sets[0:2 * k:2], sets[1:2 * k:2]])
    leftover = sets[2 * k] if sets.shape[0] % 2 else None
    return parents, leftover


def map_to_leaves(rejected_leaf_sets) -> np.ndarray:
    """Every leaf of every rejected node, sorted."""
    sets = [np.ravel(s) for s in rejected_leaf_sets]
    if not sets:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(sets)).astype(np.int64)


@dataclass(frozen=True)
class StoppingRule:
    """When to stop adding layers.  Every rule given is active; any one fires.

    ``max_layers`` stops after that layer.  ``min_rejections`` stops after a
    layer (>= 2) rejecting fewer nodes than that.  ``rejection_ratio`` stops
    after a layer (>= 2) whose node rejections divided by the previous
    layer's fall below it.
    """

    max_layers: int | None = None
    min_rejections: int | None = None
    rejection_ratio: float | None = None

    def __post_init__(self):
        if self.max_layers is not None and self.max_layers < 1:
            raise ValueError("max_layers must be >= 1")
        if self.min_rejections is not None and self.min_rejections < 0:
            raise ValueError("min_rejections must be >= 0")
        if self.rejection_ratio is not None and self.rejection_ratio < 0:
            raise ValueError("rejection_ratio must be >= 0")


def should_stop(history: Sequence[int], rule: StoppingRule, layer: int) -> bool:
    """``history[l - 1]`` is the number of nodes rejected on layer ``l``."""
    if rule.max_layers is not None and layer >= rule.max_layers:
        return True
    if layer >= 2:
        current = history[layer - 1]
        if rule.min_rejections is not None and current < rule.min_rejections:
            return True
        if rule.rejection_ratio is not None:
            previous = history[layer - 2]
            if previous == 0:
                ratio = math.inf if current > 0 else 0.0
            else:
                ratio = current / previous
            if ratio < rule.rejection_ratio:
                return True
    return False


def choose_max_layers(m: int, low: int = 1000, high: int = 2000) -> int:
    """Layers ``L`` such that ``low <= m / 2**(L-1) < high`` (idealized halving).

    Returns 1 when ``m`` is already below ``high``.
    """
    layers = 1
    while m / 2 ** (layers - 1) >= high and m / 2 ** layers >= low:
        layers += 1
    return layers


@dataclass(frozen=True, eq=False)
class Node:
    leaf_set: tuple[int, ...]
    n_node: int
    X_node: int
    null: LayeredNull
    pvalue: float


@dataclass(eq=False)
class LayerState:
    """All nodes on one layer, stored column-wise.

    ``leaf_sets`` has one row per node (0-based ordinal leaves); ``null_id``
    indexes ``nulls``, the distinct conditional nulls on this layer.
    """

    layer: int
    leaf_sets: np.ndarray
    n: np.ndarray
    X: np.ndarray
    null_id: np.ndarray
    nulls: list
    pvalues: np.ndarray | None = None
    c_hat: float | None = None
    a_floor: float | None = None
    rejected: np.ndarray | None = None
    leftover: np.ndarray | None = None
    testable: np.ndarray | None = None

    @property
    def m_layer(self) -> int:
        return int(self.n.size)

    def node(self, i: int) -> Node:
        return Node(tuple(int(j) for j in self.leaf_sets[i]), int(self.n[i]), int(self.X[i]),
                    self.nulls[self.null_id[i]],
                    float(self.pvalues[i]) if self.pvalues is not None else math.nan)

    @property
    def nodes(self) -> list[Node]:
        return [self.node(i) for i in range(self.m_layer)]


def layer_pvalues(state: LayerState) -> np.ndarray:
    """``P = G(X)`` for every node under its own conditional null."""
    p = np.empty(state.m_layer)
    for g, null in enumerate(state.nulls):
        idx = np.flatnonzero(state.null_id == g)
        p[idx] = null.ccdf(state.X[idx])
    if state.testable is not None:
        p[~state.testable] = 1.0
    return p


@dataclass(frozen=True)
class LayerRecord:
    layer: int
    m_layer: int
    c_hat: float
    a_floor: float
    rejected_nodes: int
    rejected_leaves: int
    leftover: tuple[int, ...] = ()


@dataclass(eq=False)
class TeamResult:
    """Outcome of a TEAM run over ``m`` leaves (0-based ordinal indices).

    ``rejection_layer[i]`` is the layer that rejected leaf ``i`` (0 = never).
    """

    rejection_layer: np.ndarray
    p_first: np.ndarray
    layers: list[LayerRecord]
    stop_layer: int
    theta0: float
    alpha: float
    states: list[LayerState] = field(default_factory=list, repr=False)

    @property
    def m(self) -> int:
        return int(self.rejection_layer.size)

    @property
    def rejected(self) -> np.ndarray:
        return self.rejection_layer > 0

    def rejected_upto(self, layer: int) -> np.ndarray:
        return (self.rejection_layer > 0) & (self.rejection_layer <= layer)

    def rejection_set(self, layer: int | None = None) -> np.ndarray:
        """Leaves rejected on ``layer`` (or on any layer when ``None``)."""
        if layer is None:
            return np.flatnonzero(self.rejection_layer > 0)
        return np.flatnonzero(self.rejection_layer == layer)

    def summary(self) -> dict:
        return {
            "theta0": self.theta0,
            "alpha": self.alpha,
            "m": self.m,
            "stop_layer": self.stop_layer,
            "rejected_leaves": int(self.rejected.sum()),
            "layers": [
                {
                    "layer": r.layer,
                    "m_layer": r.m_layer,
                    "c_hat": r.c_hat,
                    "a_floor": r.a_floor,
                    "rejected_nodes": r.rejected_nodes,
                    "rejected_leaves": r.rejected_leaves,
                    "leftover": [i + 1 for i in r.leftover],
                }
                for r in self.layers
            ],
        }


def _test_layer(state: LayerState, alpha: float, hook: PValueHook | None):
    p = layer_pvalues(state)
    if hook is not None:
        p = np.asarray(hook(state.layer, state.leaf_sets, p), dtype=np.float64)
        if p.shape != (state.m_layer,):
            raise ValueError("p-value hook returned the wrong shape")
    state.pvalues = p
    state.a_floor = a_floor(state.m_layer)
    state.c_hat = find_threshold(p, alpha)
    state.rejected = p <= state.c_hat


def run_team_counts(n, X, alpha: float, rule: StoppingRule, theta0: float | None = None,
                    pvalue_hook: PValueHook | None = None, cache: NullCache | None = None,
                    keep_states: bool = False) -> TeamResult:
    """Run TEAM on per-leaf pooled counts ``n`` and cohort-2 counts ``X``.

    ``pvalue_hook(layer, leaf_sets, pvalues)`` may replace a layer's
    p-values before thresholding; it exists for controlled experiments.
    """
    n = np.asarray(n, dtype=np.int64)
    X = np.asarray(X, dtype=np.int64)
    if n.shape != X.shape or n.ndim != 1:
        raise ValueError("n and X must be 1-d and of equal length")
    if np.any(X < 0) or np.any(X > n):
        raise ValueError("need 0 <= X <= n for every leaf")
    m = n.size
    if m < 2:
        raise ValueError("need at least 2 leaves")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    if theta0 is None:
        total = n.sum()
        theta0 = X.sum() / total if total else 0.0
    if not 0.0 < theta0 < 1.0:
        raise DataError(f"theta0 = {theta0} is degenerate; both cohorts must be nonempty")
    cache = NullCache() if cache is None else cache

    uniq, inv = np.unique(n, return_inverse=True)
    state = LayerState(1, np.arange(m, dtype=np.int64)[:, None], n, X, inv.astype(np.int64),
                       [leaf_null(u, theta0) for u in uniq], testable=n > 0)
    _test_layer(state, alpha, pvalue_hook)

    rejection_layer = np.zeros(m, dtype=np.int64)
    p_first = state.pvalues.copy()
    history: list[int] = []
    records: list[LayerRecord] = []
    states = [state]
    while True:
        rej = np.flatnonzero(state.rejected)
        leaves = map_to_leaves(state.leaf_sets[rej])
        rejection_layer[leaves] = state.layer
        history.append(int(rej.size))
        records.append(LayerRecord(state.layer, state.m_layer, state.c_hat, state.a_floor,
                                   int(rej.size), int(leaves.size),
                                   tuple(int(i) for i in state.leftover)
                                   if state.leftover is not None else ()))
        if should_stop(history, rule, state.layer):
            break
        keep = ~state.rejected
        if state.testable is not None:
            keep &= state.testable
        survivors = np.flatnonzero(keep)
        if survivors.size < 4:
            # fewer than two parents cannot be tested
            break
        state = _next_layer(state, survivors, cache)
        _test_layer(state, alpha, pvalue_hook)
        states.append(state)

    return TeamResult(rejection_layer, p_first, records, records[-1].layer, float(theta0),
                      float(alpha), states if keep_states else [])


def _next_layer(state: LayerState, survivors: np.ndarray, cache: NullCache) -> LayerState:
    k = survivors.size // 2
    a = survivors[0:2 * k:2]
    b = survivors[1:2 * k:2]
    leftover = state.leaf_sets[survivors[-1]] if survivors.size % 2 else None
    leaf_sets = np.hstack([state.leaf_sets[a], state.leaf_sets[b]])
    pair = np.stack([state.null_id[a], state.null_id[b]], axis=1)
    uniq, inv = np.unique(pair, axis=0, return_inverse=True)
    nulls = [build_layer_null(state.nulls[i], state.nulls[j], state.c_hat, cache)
             for i, j in uniq]
    return LayerState(state.layer + 1, leaf_sets, state.n[a] + state.n[b],
                      state.X[a] + state.X[b], inv.ravel().astype(np.int64), nulls,
                      leftover=leftover)


def run_team(binning: LeafBinning, alpha: float, rule: StoppingRule,
             pvalue_hook: PValueHook | None = None, cache: NullCache | None = None,
             keep_states: bool = False) -> TeamResult:
    """TEAM on a tabulated partition; ``theta0 = N2 / N`` from the global counts."""
    if binning.N1 == 0 or binning.N2 == 0:
        raise DataError("both cohorts must be nonempty")
    return run_team_counts(binning.n, binning.X, alpha, rule, binning.N2 / binning.N,
                           pvalue_hook=pvalue_hook, cache=cache, keep_states=keep_states)


class TEAM(BaseEstimator):
    """Locate regions where cohort 2's density exceeds cohort 1's.

    ``fit(X, y)`` partitions the pooled rows of ``X`` (``y`` holds cohort
    labels 1/2), runs the layered test and keeps the rejected leaves.
    ``predict`` then flags rows of any table that fall in a rejected leaf.

    Parameters
    ----------
    alpha : float
        Target false discovery rate over leaves.
    scheme : {"sequential", "adaptive"}
    bins_per_dim : int or None
        Sequential bins per dimension (or adaptive split levels).
    target_bin_count : float or None
        Pooled cells per leaf used when ``bins_per_dim`` is None;
        ``None`` means ``(2N)^(1/3)``.
    max_layers, min_rejections, rejection_ratio
        Stopping rules.  With all three None, ``max_layers`` is chosen so the
        last layer has roughly 1000-2000 nodes.
    dim_order : "variance" or sequence of int
    ordering : {"serpentine", "lexicographic"}
    """

    def __init__(self, alpha=0.05, scheme="sequential", bins_per_dim=None,
                 target_bin_count=None, max_layers=None, min_rejections=None,
                 rejection_ratio=None, dim_order="variance", ordering="serpentine"):
        self.alpha = alpha
        self.scheme = scheme
        self.bins_per_dim = bins_per_dim
        self.target_bin_count = target_bin_count
        self.max_layers = max_layers
        self.min_rejections = min_rejections
        self.rejection_ratio = rejection_ratio
        self.dim_order = dim_order
        self.ordering = ordering

    def _partition_spec(self, n_rows, p):
        resolution = self.bins_per_dim
        if resolution is None:
            if self.scheme == "sequential":
                resolution = default_bins_per_dim(n_rows, p, self.target_bin_count)
            else:
                resolution = default_splits(n_rows, self.target_bin_count)
        return PartitionSpec(self.scheme, resolution, self.dim_order, self.ordering)

    def stopping_rule(self, m: int) -> StoppingRule:
        max_layers = self.max_layers
        if max_layers is None and self.min_rejections is None and self.rejection_ratio is None:
            max_layers = choose_max_layers(m)
        return StoppingRule(max_layers, self.min_rejections, self.rejection_ratio)

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y).ravel()
        names = tuple(f"x{j}" for j in range(X.shape[1]))
        matrix = MarkerMatrix(X, y, names)
        matrix.require_both_cohorts()
        spec = self._partition_spec(matrix.n_rows, matrix.n_markers)
        self.binning_ = build_partition(matrix, spec)
        self.result_ = run_team(self.binning_, self.alpha, self.stopping_rule(self.binning_.m))
        self.theta0_ = self.result_.theta0
        self.n_features_in_ = X.shape[1]
        return self

    def rejection_layer(self, X) -> np.ndarray:
        """Layer that rejected each row's leaf (0 = not rejected)."""
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.result_.rejection_layer[self.binning_.geometry.assign(X)]

    def predict(self, X) -> np.ndarray:
        """1 where a row lies in a leaf where cohort 2 is enriched, else 0."""
        return (self.rejection_layer(X) > 0).astype(np.int64)

    def transform(self, X) -> np.ndarray:
        """0-based ordinal leaf index of each row."""
        check_is_fitted(self, "result_")
        return self.binning_.geometry.assign(check_array(X, dtype=np.float64))
