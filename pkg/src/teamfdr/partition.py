"""Leaf partitions of the pooled sample space.

Two schemes are supported.  The sequential scheme splits the first dimension
at pooled sample quantiles into ``m_tilde`` slabs, then splits each slab along
the next dimension at its own conditional quantiles, and so on through all
dimensions (``m = m_tilde ** p`` leaves).  The adaptive scheme repeatedly
median-splits every cell along its highest-variance dimension
(``m = 2 ** m_tilde`` leaves).

Cells are half-open ``[lo, hi)`` with the top cell of every split closed, and
split points are order statistics ``s[ceil(k * K / m_tilde)]`` (0-based) of
the ``K`` values being split.  Leaves are numbered so that consecutive ordinal
indices are spatially adjacent (serpentine order), which is what the
aggregation step pairs on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ingest import DataError, MarkerMatrix

__all__ = [
    "AdaptiveGeometry",
    "AdaptivePartitioner",
    "LeafBinning",
    "PartitionSpec",
    "SequentialGeometry",
    "SequentialPartitioner",
    "assign_and_count",
    "build_adaptive_partition",
    "build_partition",
    "build_sequential_partition",
    "default_bins_per_dim",
    "default_splits",
    "order_dimensions",
    "read_leaf_table",
    "target_bin_count",
    "write_leaf_table",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionSpec:
    """How to partition.

    ``resolution`` is bins per dimension for the sequential scheme and the
    number of median-split levels for the adaptive one.  ``dim_order`` is
    ``"variance"`` or an explicit sequence of column indices.
    """

    scheme: str = "sequential"
    resolution: int | None = None
    dim_order: str | tuple[int, ...] = "variance"
    ordering: str = "serpentine"
    adaptive_variance: str = "local"

    def __post_init__(self):
        if self.scheme not in ("sequential", "adaptive"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.ordering not in ("serpentine", "lexicographic"):
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.adaptive_variance not in ("local", "global"):
            raise ValueError(f"unknown adaptive_variance {self.adaptive_variance!r}")
        if not isinstance(self.dim_order, str):
            object.__setattr__(self, "dim_order", tuple(int(d) for d in self.dim_order))
        elif self.dim_order != "variance":
            raise ValueError(f"dim_order must be 'variance' or a list, got {self.dim_order!r}")
        if self.resolution is not None:
            low = 2 if self.scheme == "sequential" else 1
            if int(self.resolution) < low:
                raise ValueError(f"{self.scheme} resolution must be >= {low}")

    def n_leaves(self, p: int) -> int:
        if self.scheme == "sequential":
            return self.resolution ** p
        return 2 ** self.resolution


def target_bin_count(n_total: int) -> float:
    """Pooled cells per leaf that balances resolution and power, (2N)^(1/3)."""
    return (2.0 * n_total) ** (1.0 / 3.0)


def default_bins_per_dim(n_total: int, p: int, target: float | None = None) -> int:
    target = target_bin_count(n_total) if target is None else float(target)
    return max(2, int(round((n_total / target) ** (1.0 / p))))


def default_splits(n_total: int, target: float | None = None) -> int:
    target = target_bin_count(n_total) if target is None else float(target)
    return max(1, int(round(math.log2(n_total / target))))


def order_dimensions(values) -> tuple[int, ...]:
    """Column indices by decreasing pooled sample variance (ties by index)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    var = values.var(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(values.shape[1])
    return tuple(int(i) for i in np.argsort(-var, kind="stable"))


def _resolve_dim_order(values, dim_order):
    p = values.shape[1]
    if isinstance(dim_order, str):
        return order_dimensions(values)
    order = tuple(int(d) for d in dim_order)
    if sorted(order) != list(range(p)):
        raise ValueError(f"explicit dim_order must be a permutation of 0..{p - 1}")
    return order


def _serpentine_rank(digits: np.ndarray, m_tilde: int) -> np.ndarray:
    """Boustrophedon position of cells given their per-level digits (cells x p)."""
    pos = digits[:, 0].astype(np.int64)
    for d in range(1, digits.shape[1]):
        dig = digits[:, d].astype(np.int64)
        pos = pos * m_tilde + np.where(pos % 2 == 0, dig, m_tilde - 1 - dig)
    return pos


def _groups(parent: np.ndarray, n_parents: int):
    order = np.argsort(parent, kind="stable")
    bounds = np.searchsorted(parent[order], np.arange(n_parents + 1))
    return order, bounds


@dataclass(frozen=True, eq=False)
class SequentialGeometry:
    """Nested quantile splits.

    ``splits[d]`` has shape ``(m_tilde ** d, m_tilde - 1)``: the interior
    boundaries of level ``d`` (dimension ``dims[d]``) for every parent cell in
    lexicographic order.
    """

    dims: tuple[int, ...]
    m_tilde: int
    splits: tuple[np.ndarray, ...]
    data_lo: np.ndarray
    data_hi: np.ndarray
    ordering: str = "serpentine"
    order: np.ndarray = field(init=False)

    def __post_init__(self):
        p = len(self.dims)
        m = self.m_tilde ** p
        digits = np.stack(np.unravel_index(np.arange(m), (self.m_tilde,) * p), axis=1)
        if self.ordering == "serpentine":
            order = _serpentine_rank(digits, self.m_tilde)
        else:
            order = np.arange(m, dtype=np.int64)
        object.__setattr__(self, "order", order)

    @property
    def n_leaves(self) -> int:
        return self.m_tilde ** len(self.dims)

    def cells(self, values: np.ndarray) -> np.ndarray:
        """Lexicographic cell index of every row."""
        cell = np.zeros(values.shape[0], dtype=np.int64)
        for d, dim in enumerate(self.dims):
            col = values[:, dim]
            bounds = self.splits[d]
            if bounds.shape[0] == 1:
                digit = np.searchsorted(bounds[0], col, side="right")
            else:
                digit = np.empty(values.shape[0], dtype=np.int64)
                order, edges = _groups(cell, bounds.shape[0])
                for g in range(bounds.shape[0]):
                    rows = order[edges[g]:edges[g + 1]]
                    if rows.size:
                        digit[rows] = np.searchsorted(bounds[g], col[rows], side="right")
            cell = cell * self.m_tilde + digit
        return cell

    def assign(self, values: np.ndarray) -> np.ndarray:
        """0-based ordinal leaf of every row."""
        return self.order[self.cells(values)]

    def boxes(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-leaf lower/upper bounds in ordinal order, columns in data order."""
        p = len(self.dims)
        m = self.n_leaves
        lo = np.empty((m, p))
        hi = np.empty((m, p))
        lex = np.arange(m)
        digits = np.stack(np.unravel_index(lex, (self.m_tilde,) * p), axis=1)
        parent = np.zeros(m, dtype=np.int64)
        for d, dim in enumerate(self.dims):
            b = self.splits[d]
            edges = np.hstack([np.full((b.shape[0], 1), self.data_lo[dim]), b,
                               np.full((b.shape[0], 1), self.data_hi[dim])])
            lo[self.order, dim] = edges[parent, digits[:, d]]
            hi[self.order, dim] = edges[parent, digits[:, d] + 1]
            parent = parent * self.m_tilde + digits[:, d]
        return lo, hi


@dataclass(frozen=True, eq=False)
class AdaptiveGeometry:
    """Complete binary tree of median splits, one array pair per level."""

    split_dim: tuple[np.ndarray, ...]
    threshold: tuple[np.ndarray, ...]
    data_lo: np.ndarray
    data_hi: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.split_dim)

    @property
    def n_leaves(self) -> int:
        return 2 ** self.depth

    def assign(self, values: np.ndarray) -> np.ndarray:
        node = np.zeros(values.shape[0], dtype=np.int64)
        rows = np.arange(values.shape[0])
        for dims, thr in zip(self.split_dim, self.threshold):
            right = values[rows, dims[node]] >= thr[node]
            node = 2 * node + right
        return node

    def boxes(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.data_lo[None, :].copy()
        hi = self.data_hi[None, :].copy()
        for dims, thr in zip(self.split_dim, self.threshold):
            lo = np.repeat(lo, 2, axis=0)
            hi = np.repeat(hi, 2, axis=0)
            idx = np.arange(dims.size)
            hi[2 * idx, dims] = thr
            lo[2 * idx + 1, dims] = thr
        return lo, hi


@dataclass(frozen=True, eq=False)
class LeafBinning:
    """Leaf geometry plus per-leaf counts, everything indexed by ordinal leaf.

    ``X`` counts cohort-2 cells, ``Xtilde`` cohort-1 cells, ``n = X + Xtilde``.
    """

    geometry: SequentialGeometry | AdaptiveGeometry
    marker_names: tuple[str, ...]
    n: np.ndarray
    X: np.ndarray
    Xtilde: np.ndarray
    row_leaf: np.ndarray | None = None

    @property
    def m(self) -> int:
        return int(self.n.size)

    @property
    def regions(self) -> tuple[np.ndarray, np.ndarray]:
        return self.geometry.boxes()

    @property
    def N1(self) -> int:
        return int(self.Xtilde.sum())

    @property
    def N2(self) -> int:
        return int(self.X.sum())

    @property
    def N(self) -> int:
        return int(self.n.sum())

    def leaf_table(self) -> pd.DataFrame:
        lo, hi = self.regions
        cols = {"leaf_id": np.arange(1, self.m + 1)}
        for j, name in enumerate(self.marker_names):
            cols[f"{name}_lo"] = lo[:, j]
            cols[f"{name}_hi"] = hi[:, j]
        cols["n"] = self.n
        cols["X"] = self.X
        cols["Xtilde"] = self.Xtilde
        return pd.DataFrame(cols)


def _fit_sequential(values: np.ndarray, m_tilde: int, dims, ordering) -> SequentialGeometry:
    n_rows = values.shape[0]
    ks = np.arange(1, m_tilde)
    data_lo = values.min(axis=0)
    data_hi = values.max(axis=0)
    cell = np.zeros(n_rows, dtype=np.int64)
    splits = []
    for d, dim in enumerate(dims):
        n_parents = m_tilde ** d
        col = values[:, dim]
        bounds = np.empty((n_parents, m_tilde - 1))
        digit = np.empty(n_rows, dtype=np.int64)
        order, edges = _groups(cell, n_parents)
        for g in range(n_parents):
            rows = order[edges[g]:edges[g + 1]]
            K = rows.size
            if K == 0:
                bounds[g] = data_lo[dim]
                continue
            s = np.sort(col[rows])
            idx = -((-ks * K) // m_tilde)  # ceil(k K / m_tilde)
            b = np.where(idx < K, s[np.minimum(idx, K - 1)], data_hi[dim])
            bounds[g] = b
            digit[rows] = np.searchsorted(b, col[rows], side="right")
        splits.append(bounds)
        cell = cell * m_tilde + digit
    return SequentialGeometry(tuple(dims), m_tilde, tuple(splits), data_lo, data_hi, ordering)


def _fit_adaptive(values: np.ndarray, depth: int, dims, local: bool) -> AdaptiveGeometry:
    n_rows, p = values.shape
    data_lo = values.min(axis=0)
    data_hi = values.max(axis=0)
    node = np.zeros(n_rows, dtype=np.int64)
    split_dim, threshold = [], []
    box_lo = data_lo[None, :].copy()
    for level in range(depth):
        n_cells = 2 ** level
        sd = np.empty(n_cells, dtype=np.int64)
        th = np.empty(n_cells)
        order, edges = _groups(node, n_cells)
        for g in range(n_cells):
            rows = order[edges[g]:edges[g + 1]]
            if rows.size == 0:
                sd[g] = dims[level % p]
                th[g] = box_lo[g, sd[g]]
                continue
            block = values[rows]
            if local:
                var = block.var(axis=0)
                dim = int(np.argmax(var))
                if var[dim] == 0.0:
                    raise DataError("cannot median-split a cell whose points are all identical")
            else:
                dim = dims[level % p]
                if np.ptp(block[:, dim]) == 0.0:
                    raise DataError(f"cannot median-split constant dimension {dim}")
            s = np.sort(block[:, dim])
            sd[g] = dim
            th[g] = s[-(-s.size // 2)] if s.size > 1 else s[0]
        split_dim.append(sd)
        threshold.append(th)
        right = values[np.arange(n_rows), sd[node]] >= th[node]
        node = 2 * node + right
        box_lo = np.repeat(box_lo, 2, axis=0)
        box_lo[2 * np.arange(n_cells) + 1, sd] = th
    return AdaptiveGeometry(tuple(split_dim), tuple(threshold), data_lo, data_hi)


def assign_and_count(geometry, matrix: MarkerMatrix) -> LeafBinning:
    """Drop every row into its leaf and tabulate cohort counts."""
    leaf = geometry.assign(matrix.values)
    m = geometry.n_leaves
    if leaf.size and (leaf.min() < 0 or leaf.max() >= m):
        raise RuntimeError("row fell outside every leaf")
    X = np.bincount(leaf[matrix.cohort == 2], minlength=m)
    Xtilde = np.bincount(leaf[matrix.cohort == 1], minlength=m)
    binning = LeafBinning(geometry, matrix.marker_names, X + Xtilde, X, Xtilde, leaf)
    spread = int(binning.n.max() - binning.n.min()) if m else 0
    if isinstance(geometry, SequentialGeometry) and spread > len(geometry.dims):
        log.info("leaf counts range over %d (ties at split points)", spread)
    return binning


def build_sequential_partition(matrix: MarkerMatrix, spec: PartitionSpec) -> LeafBinning:
    if spec.scheme != "sequential":
        raise ValueError("spec.scheme must be 'sequential'")
    p = matrix.n_markers
    m_tilde = spec.resolution or default_bins_per_dim(matrix.n_rows, p)
    if m_tilde < 2:
        raise ValueError("need at least 2 bins per dimension")
    if matrix.n_rows < m_tilde ** p:
        raise DataError(f"{matrix.n_rows} rows cannot fill {m_tilde ** p} leaves")
    dims = _resolve_dim_order(matrix.values, spec.dim_order)
    geometry = _fit_sequential(matrix.values, m_tilde, dims, spec.ordering)
    return assign_and_count(geometry, matrix)


def build_adaptive_partition(matrix: MarkerMatrix, spec: PartitionSpec) -> LeafBinning:
    if spec.scheme != "adaptive":
        raise ValueError("spec.scheme must be 'adaptive'")
    depth = spec.resolution or default_splits(matrix.n_rows)
    if matrix.n_rows < 2 ** depth:
        raise DataError(f"{matrix.n_rows} rows cannot fill {2 ** depth} leaves")
    dims = _resolve_dim_order(matrix.values, spec.dim_order)
    geometry = _fit_adaptive(matrix.values, depth, dims, spec.adaptive_variance == "local")
    return assign_and_count(geometry, matrix)


def build_partition(matrix: MarkerMatrix, spec: PartitionSpec) -> LeafBinning:
    if spec.scheme == "sequential":
        return build_sequential_partition(matrix, spec)
    return build_adaptive_partition(matrix, spec)


def write_leaf_table(table: pd.DataFrame, path) -> None:
    table.to_csv(path, index=False, float_format="%.17g")


def read_leaf_table(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


class _PartitionerMixin(TransformerMixin, BaseEstimator):
    def _matrix(self, X, y):
        X = check_array(X, dtype=np.float64)
        cohort = np.ones(X.shape[0], dtype=int) if y is None else np.asarray(y)
        names = tuple(f"x{j}" for j in range(X.shape[1]))
        return MarkerMatrix(X, cohort, names)

    def fit(self, X, y=None):
        """Learn split points from ``X``; ``y`` (cohort labels 1/2) only fills counts."""
        matrix = self._matrix(X, y)
        self.binning_ = build_partition(matrix, self._spec())
        self.geometry_ = self.binning_.geometry
        self.n_features_in_ = matrix.n_markers
        return self

    def transform(self, X):
        """0-based ordinal leaf index of each row."""
        check_is_fitted(self, "geometry_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.geometry_.assign(X)

    @property
    def n_leaves_(self):
        check_is_fitted(self, "geometry_")
        return self.geometry_.n_leaves


class SequentialPartitioner(_PartitionerMixin):
    """Quantile-by-quantile partition, sklearn style.

    Parameters
    ----------
    bins_per_dim : int or None
        Bins along every dimension; ``None`` picks it from ``target_bin_count``.
    target_bin_count : float or None
        Desired pooled cells per leaf; ``None`` means ``(2N)^(1/3)``.
    dim_order : "variance" or sequence of int
    ordering : {"serpentine", "lexicographic"}
    """

    def __init__(self, bins_per_dim=None, target_bin_count=None, dim_order="variance",
                 ordering="serpentine"):
        self.bins_per_dim = bins_per_dim
        self.target_bin_count = target_bin_count
        self.dim_order = dim_order
        self.ordering = ordering

    def fit(self, X, y=None):
        if self.bins_per_dim is None and self.target_bin_count is not None:
            X = check_array(X, dtype=np.float64)
            self.resolution_ = default_bins_per_dim(X.shape[0], X.shape[1], self.target_bin_count)
        else:
            self.resolution_ = self.bins_per_dim
        return super().fit(X, y)

    def _spec(self):
        return PartitionSpec("sequential", getattr(self, "resolution_", self.bins_per_dim),
                             self.dim_order, self.ordering)


class AdaptivePartitioner(_PartitionerMixin):
    """Recursive median splits along the highest-variance dimension."""

    def __init__(self, splits=None, target_bin_count=None, dim_order="variance",
                 variance="local"):
        self.splits = splits
        self.target_bin_count = target_bin_count
        self.dim_order = dim_order
        self.variance = variance

    def fit(self, X, y=None):
        if self.splits is None and self.target_bin_count is not None:
            X = check_array(X, dtype=np.float64)
            self.resolution_ = default_splits(X.shape[0], self.target_bin_count)
        else:
            self.resolution_ = self.splits
        return super().fit(X, y)

    def _spec(self):
        return PartitionSpec("adaptive", self.resolution_, self.dim_order,
                             adaptive_variance=self.variance)
