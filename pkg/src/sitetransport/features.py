"""Feature maps (standardization, pairwise interactions) and kernel functions."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import (
    AllPointsIdenticalError,
    DimensionMismatchError,
    EmptySampleError,
    UnfittedMapError,
)

# Subsample cap for the median-heuristic bandwidth; pairwise distances are
# quadratic in the sample size.
BANDWIDTH_SUBSAMPLE_CAP = 2000


@dataclass(frozen=True)
class FeatureMap:
    """Identity-plus-interactions feature map with optional unit-variance scaling.

    The map starts unfitted: ``fit_feature_map`` computes per-feature standard
    deviations on a pooled sample, drops zero-variance features, and returns a
    fitted copy. Applying an unfitted map raises :class:`UnfittedMapError`.
    """

    interactions: tuple[tuple[int, int], ...] = ()
    standardize: bool = True

    # populated by fit_feature_map
    n_raw: int | None = None
    kept_base: tuple[int, ...] | None = None
    kept_interactions: tuple[tuple[int, int], ...] | None = None
    fitted_scale: np.ndarray | None = field(default=None, compare=False)
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "interactions", tuple((int(i), int(j)) for i, j in self.interactions)
        )

    @property
    def fitted(self) -> bool:
        return self.fitted_scale is not None

    @property
    def output_dim(self) -> int:
        if not self.fitted:
            raise UnfittedMapError("feature map has not been fitted")
        return len(self.kept_base) + len(self.kept_interactions)

    def feature_names(self) -> tuple[str, ...]:
        if not self.fitted:
            raise UnfittedMapError("feature map has not been fitted")
        base = tuple(f"x{i + 1}" for i in self.kept_base)
        inter = tuple(f"x{i + 1}*x{j + 1}" for i, j in self.kept_interactions)
        return base + inter


def _raw_features(spec: FeatureMap, X: np.ndarray) -> np.ndarray:
    """Base covariates followed by the interaction products, unscaled."""
    cols = [X]
    for i, j in spec.interactions:
        cols.append((X[:, i] * X[:, j])[:, None])
    return np.hstack(cols) if len(cols) > 1 else X


def fit_feature_map(spec: FeatureMap, pooled: np.ndarray | Sequence[Sequence[float]]) -> FeatureMap:
    """Fit scale factors on a pooled sample and drop constant features.

    Scales are population standard deviations (ddof=0). Zero-variance features
    are dropped regardless of the ``standardize`` flag and recorded in
    ``dropped``. The pooled sample should cover both the experimental units and
    the target sample so that both sides share one feature space.
    """
    X = np.atleast_2d(np.asarray(pooled, dtype=float))
    if X.size == 0:
        raise EmptySampleError("cannot fit a feature map on an empty sample")
    d = X.shape[1]
    for i, j in spec.interactions:
        if not (0 <= i < d and 0 <= j < d):
            raise DimensionMismatchError(
                f"interaction ({i}, {j}) out of range for {d} covariates"
            )

    raw = _raw_features(spec, X)
    sd = raw.std(axis=0)  # population sd
    names = [f"x{i + 1}" for i in range(d)] + [f"x{i + 1}*x{j + 1}" for i, j in spec.interactions]

    keep = sd > 0
    kept_base = tuple(i for i in range(d) if keep[i])
    kept_inter = tuple(pair for k, pair in enumerate(spec.interactions) if keep[d + k])
    dropped = tuple(name for name, k in zip(names, keep) if not k)

    scale = sd[keep] if spec.standardize else np.ones(int(keep.sum()))
    scale = scale.copy()
    scale.setflags(write=False)
    return replace(
        spec,
        n_raw=d,
        kept_base=kept_base,
        kept_interactions=kept_inter,
        fitted_scale=scale,
        dropped=dropped,
    )


def apply_feature_map(spec: FeatureMap, x: np.ndarray | Sequence[float]) -> np.ndarray:
    """Map raw covariates to the fitted feature space.

    Accepts a single vector or an (n, d) matrix; the output has one column per
    retained base feature followed by one per retained interaction.
    """
    if not spec.fitted:
        raise UnfittedMapError("feature map has not been fitted")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    X = np.atleast_2d(arr)
    if X.shape[1] != spec.n_raw:
        raise DimensionMismatchError(
            f"expected {spec.n_raw} raw covariates, got {X.shape[1]}"
        )
    cols = [X[:, list(spec.kept_base)]] if spec.kept_base else [np.empty((X.shape[0], 0))]
    for i, j in spec.kept_interactions:
        cols.append((X[:, i] * X[:, j])[:, None])
    out = np.hstack(cols) / spec.fitted_scale
    return out[0] if single else out


def identity_map(d: int, standardize: bool = False) -> FeatureMap:
    """Fitted identity map on d covariates (unit scales, nothing dropped)."""
    scale = np.ones(d)
    scale.setflags(write=False)
    return FeatureMap(
        interactions=(),
        standardize=standardize,
        n_raw=d,
        kept_base=tuple(range(d)),
        kept_interactions=(),
        fitted_scale=scale,
    )


@dataclass(frozen=True)
class KernelSpec:
    """Kernel function: ``linear`` (dot product) or ``rbf`` with a bandwidth.

    ``bandwidth=None`` on an RBF kernel means "resolve by the median heuristic
    on the data at solve time".
    """

    kind: str = "linear"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def resolved(self) -> bool:
        return self.kind == "linear" or self.bandwidth is not None


def kernel_eval(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> float:
    """Evaluate the kernel at a pair of equal-length vectors."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise DimensionMismatchError(f"kernel arguments have shapes {x.shape} and {y.shape}")
    if spec.kind == "linear":
        return float(x @ y)
    if spec.bandwidth is None:
        raise ValueError("RBF bandwidth unresolved; call resolve_bandwidth first")
    sq = float(np.sum((x - y) ** 2))
    return float(np.exp(-sq / (2.0 * spec.bandwidth**2)))


def kernel_matrix(spec: KernelSpec, X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    """Gram matrix k(X_i, Y_j); Y defaults to X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatchError(
            f"kernel arguments have widths {X.shape[1]} and {Y.shape[1]}"
        )
    if spec.kind == "linear":
        return X @ Y.T
    if spec.bandwidth is None:
        raise ValueError("RBF bandwidth unresolved; call resolve_bandwidth first")
    sq = cdist(X, Y, metric="sqeuclidean")
    return np.exp(-sq / (2.0 * spec.bandwidth**2))


def resolve_bandwidth(sample: np.ndarray | Sequence[Sequence[float]]) -> float:
    """Median heuristic: median pairwise Euclidean distance of the sample.

    Computed on an evenly spaced subsample of at most
    ``BANDWIDTH_SUBSAMPLE_CAP`` points. If the median distance is zero but
    distinct points exist, the median of the strictly positive distances is
    used so the bandwidth stays positive.
    """
    X = np.atleast_2d(np.asarray(sample, dtype=float))
    if X.shape[0] < 2:
        raise EmptySampleError("bandwidth resolution needs at least two points")
    if X.shape[0] > BANDWIDTH_SUBSAMPLE_CAP:
        idx = np.linspace(0, X.shape[0] - 1, BANDWIDTH_SUBSAMPLE_CAP).round().astype(int)
        X = X[idx]
    dists = pdist(X)
    if not np.any(dists > 0):
        raise AllPointsIdenticalError("all points identical; median distance is zero")
    med = float(np.median(dists))
    if med == 0.0:
        med = float(np.median(dists[dists > 0]))
    return med


def resolve_kernel(spec: KernelSpec, sample: np.ndarray) -> KernelSpec:
    """Fill in an unresolved RBF bandwidth from the sample; no-op otherwise."""
    if spec.resolved:
        return spec
    return KernelSpec(kind=spec.kind, bandwidth=resolve_bandwidth(sample))
