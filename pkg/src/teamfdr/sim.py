"""Simulation settings, ground truth per leaf, metrics and a replication runner.

Random streams: replication ``r`` of a study seeded with ``seed`` draws from
``Philox(SeedSequence(seed, spawn_key=(r,)))``.  Within a replication the draws
are, in order: cohort-1 component labels, cohort-1 normals, cohort-2
component labels, cohort-2 normals, then (if any) patch rectangle labels and
patch coordinates.  Normals are ``ndtri`` of open-interval uniforms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import special, stats

from .ingest import MarkerMatrix
from .nulldist import binomial_dist
from .partition import LeafBinning, PartitionSpec, build_partition, default_bins_per_dim
from .team import StoppingRule, TeamResult, choose_max_layers, run_team

__all__ = [
    "Metrics",
    "Mixture",
    "PipelineConfig",
    "SETTINGS",
    "SimSetting",
    "UniformPatch",
    "compute_metrics",
    "generate_cohorts",
    "get_setting",
    "independence_tv",
    "leaf_truth",
    "make_rng",
    "run_replications",
    "setting_from_dict",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=stream)))


def _open_uniform(rng, size):
    # random() is k / 2**53; shifting by half a step keeps ndtri finite
    return rng.random(size) + 2.0 ** -54


@dataclass(frozen=True, eq=False)
class Mixture:
    """Gaussian mixture in ``dim`` dimensions."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        k = w.size
        means = np.asarray(self.means, dtype=np.float64).reshape(k, -1)
        d = means.shape[1]
        covs = np.asarray(self.covs, dtype=np.float64).reshape(k, d, d)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        for c in covs:
            if not np.allclose(c, c.T):
                raise ValueError("covariance matrices must be symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError as exc:
                raise ValueError("covariance matrices must be positive definite") from exc
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng, size: int) -> np.ndarray:
        cum = np.cumsum(self.weights)
        comp = np.minimum(np.searchsorted(cum, _open_uniform(rng, size), side="right"),
                          self.weights.size - 1)
        z = special.ndtri(_open_uniform(rng, (size, self.dim)))
        out = np.empty((size, self.dim))
        for j in range(self.weights.size):
            rows = comp == j
            chol = np.linalg.cholesky(self.covs[j])
            out[rows] = self.means[j] + z[rows] @ chol.T
        return out


@dataclass(frozen=True, eq=False)
class UniformPatch:
    """``count`` extra cohort-2 points uniform on a union of disjoint boxes.

    ``boxes`` has shape ``(k, dim, 2)``: per box, per dimension, (lo, hi).
    """

    count: int
    boxes: np.ndarray

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64)
        if boxes.ndim != 3 or boxes.shape[2] != 2 or np.any(boxes[..., 1] <= boxes[..., 0]):
            raise ValueError("boxes must be (k, dim, 2) with lo < hi")
        object.__setattr__(self, "boxes", boxes)

    @property
    def dim(self) -> int:
        return self.boxes.shape[1]

    @property
    def areas(self) -> np.ndarray:
        return np.prod(self.boxes[..., 1] - self.boxes[..., 0], axis=1)

    @property
    def density(self) -> float:
        """Expected points per unit volume."""
        return self.count / self.areas.sum()

    def sample(self, rng) -> np.ndarray:
        p = self.areas / self.areas.sum()
        which = np.minimum(np.searchsorted(np.cumsum(p), _open_uniform(rng, self.count),
                                           side="right"), p.size - 1)
        u = _open_uniform(rng, (self.count, self.dim))
        lo = self.boxes[which, :, 0]
        hi = self.boxes[which, :, 1]
        return lo + u * (hi - lo)

    def box_fraction(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Share of the patch's volume inside each query box (rows of lo/hi)."""
        total = np.zeros(lo.shape[0])
        for box in self.boxes:
            side = np.clip(np.minimum(hi, box[:, 1]) - np.maximum(lo, box[:, 0]), 0.0, None)
            total += np.prod(side, axis=1)
        return total / self.areas.sum()


@dataclass(frozen=True, eq=False)
class SimSetting:
    """Generative model of both cohorts.

    Cohort 1 draws ``n1`` points from ``cohort1``; cohort 2 draws ``n2`` from
    ``cohort2`` plus ``patch.count`` extra points from ``patch`` when given.
    """

    name: str
    n1: int
    n2: int
    cohort1: Mixture
    cohort2: Mixture
    patch: UniformPatch | None = None
    bins_per_dim: int | None = None
    max_layers: int | None = None

    def __post_init__(self):
        if self.cohort1.dim != self.cohort2.dim:
            raise ValueError("both cohorts need the same dimension")
        if self.patch is not None and self.patch.dim != self.cohort1.dim:
            raise ValueError("patch dimension must match the mixtures")
        if self.n1 < 1 or self.n2 < 0 or self.n2 + self.n_extra < 1:
            raise ValueError("cohort sizes must be positive")

    @property
    def dim(self) -> int:
        return self.cohort1.dim

    @property
    def n_extra(self) -> int:
        return 0 if self.patch is None else self.patch.count

    @property
    def N1(self) -> int:
        return self.n1

    @property
    def N2(self) -> int:
        return self.n2 + self.n_extra

    def scaled(self, factor: float) -> "SimSetting":
        """Same densities with every count multiplied by ``factor``."""
        if factor == 1:
            return self
        patch = None
        if self.patch is not None:
            patch = UniformPatch(int(round(self.patch.count * factor)), self.patch.boxes)
        return replace(self, n1=int(round(self.n1 * factor)), n2=int(round(self.n2 * factor)),
                       patch=patch, bins_per_dim=None, max_layers=None)


def _one_dim(weights, means, sds):
    return Mixture(weights, np.asarray(means)[:, None],
                   (np.asarray(sds, dtype=np.float64) ** 2)[:, None, None])


def _builtin_settings() -> dict[str, SimSetting]:
    n = 1_474_560
    base = dict(bins_per_dim=2 ** 14, max_layers=5)
    s1 = SimSetting("S1", n, n, _one_dim([0.97, 0.03], [0.4, 0.88], [0.04, 0.01]),
                    _one_dim([0.97, 0.03], [0.4, 0.89], [0.04, 0.01]), **base)
    s2 = SimSetting("S2", n, n, _one_dim([0.97, 0.03], [0.4, 0.8], [0.04, 0.02]),
                    _one_dim([0.97, 0.03], [0.4, 0.8], [0.04, 0.03]), **base)
    s3 = SimSetting("S3", n, n, _one_dim([0.97, 0.03], [0.4, 0.8], [0.04, 0.04]),
                    _one_dim([0.97, 0.03], [0.4, 0.82], [0.04, 0.05]), **base)
    mix = Mixture(
        [0.03, 0.14, 0.17, 0.26, 0.40],
        [[9, 9], [3.4, 2.9], [8.7, -5.8], [-0.4, 3.5], [-6, -6.5]],
        [[[2.1, 0.6], [0.6, 0.9]],
         [[0.71, 0.14], [0.14, 2.12]],
         [[2.08, 0.87], [0.87, 1.39]],
         [[2.8, 0.6], [0.6, 1.2]],
         [[1.34, -0.45], [-0.45, 3.13]]],
    )
    # x-interval by y-interval
    patch = UniformPatch(5000, [[[6, 8.5], [9, 11]],
                                [[8, 10], [7, 8]],
                                [[10, 11], [9, 12]]])
    s4 = SimSetting("S4", 500_000, 495_000, mix, mix, patch, bins_per_dim=90, max_layers=4)
    return {s.name: s for s in (s1, s2, s3, s4)}


SETTINGS = _builtin_settings()


def get_setting(name: str) -> SimSetting:
    try:
        return SETTINGS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown setting {name!r}; choose from {', '.join(SETTINGS)}") from None


def setting_from_dict(spec: dict) -> SimSetting:
    """Build a custom setting from a JSON-style mapping.

    Keys: ``name``, ``n1``, ``n2``, ``cohort1`` and ``cohort2`` (each with
    ``weights``, ``means``, ``covs``), optional ``patch`` (``count``,
    ``boxes``), ``bins_per_dim``, ``max_layers``.
    """
    def mixture(d):
        return Mixture(d["weights"], d["means"], d["covs"])

    patch = None
    if spec.get("patch"):
        patch = UniformPatch(int(spec["patch"]["count"]), spec["patch"]["boxes"])
    return SimSetting(str(spec.get("name", "custom")), int(spec["n1"]), int(spec["n2"]),
                      mixture(spec["cohort1"]), mixture(spec["cohort2"]), patch,
                      spec.get("bins_per_dim"), spec.get("max_layers"))


def generate_cohorts(setting: SimSetting, seed: int, rep: int = 0) -> MarkerMatrix:
    """Draw both cohorts; cohort-1 rows first, then cohort 2, then the patch."""
    rng = make_rng(seed, rep)
    y1 = setting.cohort1.sample(rng, setting.n1)
    y2 = setting.cohort2.sample(rng, setting.n2)
    parts = [y1, y2]
    if setting.patch is not None:
        parts.append(setting.patch.sample(rng))
    values = np.vstack(parts)
    cohort = np.concatenate([np.ones(setting.N1, np.int8), np.full(setting.N2, 2, np.int8)])
    names = tuple(f"y{j + 1}" for j in range(setting.dim))
    return MarkerMatrix(values, cohort, names)


# ---------------------------------------------------------------- ground truth

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _interval_mass(lo, hi, mean, sd):
    """P(lo <= Y < hi) for Y ~ N(mean, sd^2), accurate in both tails."""
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    upper = a > 0
    return np.where(upper, special.ndtr(-a) - special.ndtr(-b), special.ndtr(b) - special.ndtr(a))


def _rect_mass_2d(lo, hi, mean, cov, rtol=1e-8, max_panels=4096):
    """Bivariate normal mass of axis-aligned rectangles.

    The inner (y given x) integral is closed form; the outer integral over x
    uses composite Gauss-Legendre, doubling panels until the relative change
    drops below ``rtol``.
    """
    sx = np.sqrt(cov[0, 0])
    sy = np.sqrt(cov[1, 1])
    rho = cov[0, 1] / (sx * sy)
    s_cond = sy * np.sqrt(1.0 - rho ** 2)
    span = 12.0 * sx
    x0 = np.clip(lo[:, 0], mean[0] - span, mean[0] + span)
    x1 = np.clip(hi[:, 0], mean[0] - span, mean[0] + span)
    ylo = lo[:, 1]
    yhi = hi[:, 1]

    def integrate(idx, panels):
        a = x0[idx][:, None]
        width = (x1[idx] - x0[idx])[:, None] / panels
        # (leaves, panels, nodes)
        left = a + width * np.arange(panels)[None, :]
        x = left[:, :, None] + 0.5 * width[:, :, None] * (_GL_NODES + 1.0)
        mu_y = mean[1] + rho * sy / sx * (x - mean[0])
        inner = _interval_mass(ylo[idx][:, None, None], yhi[idx][:, None, None], mu_y, s_cond)
        f = stats.norm.pdf(x, mean[0], sx) * inner
        return (0.5 * width[:, 0] * np.einsum("ijk,k->i", f, _GL_WEIGHTS))

    out = np.zeros(lo.shape[0])
    todo = np.flatnonzero(x1 > x0)
    panels = 1
    prev = integrate(todo, panels)
    while todo.size and panels < max_panels:
        panels *= 2
        cur = integrate(todo, panels)
        done = np.abs(cur - prev) <= rtol * np.abs(cur) + 1e-300
        out[todo[done]] = cur[done]
        todo = todo[~done]
        prev = cur[~done]
    out[todo] = prev
    return out


def _component_mass(lo, hi, mean, cov):
    if mean.size == 1:
        return _interval_mass(lo[:, 0], hi[:, 0], mean[0], np.sqrt(cov[0, 0]))
    if mean.size == 2:
        return _rect_mass_2d(lo, hi, mean, cov)
    raise NotImplementedError("ground truth is implemented for 1 and 2 dimensions")


def _integration_boxes(binning: LeafBinning):
    lo, hi = binning.regions
    geo = binning.geometry
    lo = np.where(lo <= geo.data_lo[None, :], -np.inf, lo)
    hi = np.where(hi >= geo.data_hi[None, :], np.inf, hi)
    return lo, hi


def leaf_truth(setting: SimSetting, binning: LeafBinning) -> tuple[np.ndarray, np.ndarray]:
    """Per-leaf ``theta_i`` and the flag ``theta_i > theta0``.

    Boundary leaves extend to infinity.  Components shared by both cohorts
    cancel exactly in the comparison, so leaves where the densities coincide
    are never flagged through rounding.
    """
    lo, hi = _integration_boxes(binning)
    N1, N2 = setting.N1, setting.N2
    # expected cohort counts as coefficients on each distinct component
    coef: dict = {}
    for mixture, size, slot in ((setting.cohort1, setting.n1, 0), (setting.cohort2, setting.n2, 1)):
        for w, mu, cov in zip(mixture.weights, mixture.means, mixture.covs):
            entry = coef.setdefault((mu.tobytes(), cov.tobytes()), [mu, cov, 0.0, 0.0])
            entry[2 + slot] += w * size
    e1 = np.zeros(lo.shape[0])
    e2 = np.zeros(lo.shape[0])
    # theta_i > theta0  <=>  N1 * E2 - N2 * E1 > 0
    diff = np.zeros(lo.shape[0])
    for mu, cov, c1, c2 in coef.values():
        mass = _component_mass(lo, hi, mu, cov)
        e1 += c1 * mass
        e2 += c2 * mass
        weight = N1 * c2 - N2 * c1
        if weight != 0.0:
            diff += weight * mass
    if setting.patch is not None:
        frac = setting.patch.box_fraction(lo, hi)
        e2 += setting.n_extra * frac
        diff += N1 * setting.n_extra * frac
    total = e1 + e2
    theta = np.divide(e2, total, out=np.full_like(total, N2 / (N1 + N2)),
                      where=total > 0)
    return theta, diff > 0


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    fdp: float
    false_negatives: int
    discoveries: int
    true_positives: int
    n_alternatives: int
    per_layer: list[dict] = field(default_factory=list)

    @property
    def false_positives(self) -> int:
        return self.discoveries - self.true_positives


def _metrics_for(rejected: np.ndarray, alt: np.ndarray) -> dict:
    R = int(rejected.sum())
    V = int((rejected & ~alt).sum())
    return {
        "fdp": V / max(R, 1),
        "false_negatives": int((alt & ~rejected).sum()),
        "discoveries": R,
        "true_positives": R - V,
    }


def compute_metrics(result: TeamResult, alternative: np.ndarray,
                    layers: int | None = None) -> Metrics:
    """Realized FDP ``V / (R v 1)``, false negatives and discoveries.

    ``per_layer[L-1]`` holds the same quantities had the run stopped after
    layer ``L`` (cumulative rejections), for ``L = 1 .. layers``.
    """
    alt = np.asarray(alternative, dtype=bool)
    if alt.shape != result.rejection_layer.shape:
        raise ValueError("truth flags must cover the same leaves as the result")
    layers = result.stop_layer if layers is None else layers
    per_layer = []
    for L in range(1, layers + 1):
        row = _metrics_for(result.rejected_upto(L), alt)
        row["layer"] = L
        per_layer.append(row)
    overall = _metrics_for(result.rejected, alt)
    return Metrics(overall["fdp"], overall["false_negatives"], overall["discoveries"],
                   overall["true_positives"], int(alt.sum()), per_layer)


# ---------------------------------------------------------------- runner

@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 0.05
    scheme: str = "sequential"
    bins_per_dim: int | None = None
    max_layers: int | None = None

    def resolve(self, setting: SimSetting) -> tuple[PartitionSpec, StoppingRule]:
        N = setting.N1 + setting.N2
        bins = self.bins_per_dim or setting.bins_per_dim
        if self.scheme == "sequential" and bins is None:
            bins = default_bins_per_dim(N, setting.dim)
        spec = PartitionSpec(self.scheme, bins)
        layers = self.max_layers or setting.max_layers
        if layers is None:
            m = bins ** setting.dim if self.scheme == "sequential" else 2 ** bins
            layers = choose_max_layers(m)
        return spec, StoppingRule(max_layers=layers)


def run_replications(setting: SimSetting, reps: int, config: PipelineConfig | None = None,
                     seed: int = 0, progress=None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Generate, partition, test and score ``reps`` independent replications.

    Returns ``(per_rep, summary)``: one row per (rep, layer) and the mean and
    standard deviation of each metric per stopping layer.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    config = config or PipelineConfig()
    spec, rule = config.resolve(setting)
    rows = []
    for r in range(reps):
        t0 = time.perf_counter()
        matrix = generate_cohorts(setting, seed, r)
        binning = build_partition(matrix, spec)
        result = run_team(binning, config.alpha, rule)
        _, alt = leaf_truth(setting, binning)
        metrics = compute_metrics(result, alt, rule.max_layers)
        wall_ms = (time.perf_counter() - t0) * 1e3
        for row in metrics.per_layer:
            rows.append({"rep": r, "layer": row["layer"], "fdp": row["fdp"],
                         "false_negatives": row["false_negatives"],
                         "discoveries": row["discoveries"],
                         "n_alternatives": metrics.n_alternatives,
                         "wall_ms": round(wall_ms, 3)})
        if progress is not None:
            progress(r, metrics)
    per_rep = pd.DataFrame(rows, columns=["rep", "layer", "fdp", "false_negatives",
                                          "discoveries", "n_alternatives", "wall_ms"])
    summary = summarize(per_rep)
    return per_rep, summary


def summarize(per_rep: pd.DataFrame) -> pd.DataFrame:
    cols = ["fdp", "false_negatives", "discoveries", "n_alternatives"]
    grouped = per_rep.groupby("layer")[cols]
    mean = grouped.mean().add_prefix("mean_")
    sd = grouped.std(ddof=1).fillna(0.0).add_prefix("sd_")
    out = pd.concat([mean, sd], axis=1).reset_index()
    out.insert(1, "reps", per_rep.groupby("layer")["rep"].nunique().to_numpy())
    return out


# ---------------------------------------------------------------- independence check

def independence_tv(N: int = 200, m: int = 10, reps: int = 10 ** 6, seed: int = 0,
              chunk: int = 50_000) -> float:
    """Total variation between the simulated joint law of two leaf counts and
    the product of their binomial approximations.

    Both cohorts share one continuous density with ``N1 = N2 = N / 2``; the
    pooled sample is split into ``m`` equal-count quantile leaves, so the
    cohort labels in rank order form a uniformly random arrangement.  The
    joint frequency of ``(X_1, X_2)`` over ``reps`` replications is compared
    with ``Binom(n_1, theta0) x Binom(n_2, theta0)``.
    """
    if N % 2 or N % m:
        raise ValueError("N must be even and divisible by m")
    n_leaf = N // m
    n2 = N // 2
    labels = np.zeros(N, dtype=np.int8)
    labels[:n2] = 1
    rng = make_rng(seed, 0)
    counts = np.zeros((n_leaf + 1, n_leaf + 1), dtype=np.int64)
    done = 0
    while done < reps:
        size = min(chunk, reps - done)
        perm = rng.permuted(np.broadcast_to(labels, (size, N)), axis=1)
        x1 = perm[:, :n_leaf].sum(axis=1, dtype=np.int64)
        x2 = perm[:, n_leaf:2 * n_leaf].sum(axis=1, dtype=np.int64)
        np.add.at(counts, (x1, x2), 1)
        done += size
    emp = counts / reps
    b = binomial_dist(n_leaf, n2 / N).pmf
    return 0.5 * float(np.abs(emp - np.outer(b, b)).sum())
