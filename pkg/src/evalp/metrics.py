"""Quantitative evaluation: MMD, a Frechet-Gaussian proxy for generation
quality, grid-quadrature oracles for unnormalized densities, PCA with
brute-force nearest neighbors, and density grids for visualization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .diffcore import Tensor, no_grad
from .errors import ShapeMismatchError
from .gauss import LOG_2PI
from .rng import Rng

logger = logging.getLogger(__name__)


@dataclass
class GridSpec:
    """Axis-aligned evaluation grid; quadrature supports dim <= 3."""

    lower: tuple
    upper: tuple
    points: int = 801

    def __post_init__(self):
        self.lower = tuple(float(v) for v in self.lower)
        self.upper = tuple(float(v) for v in self.upper)
        if len(self.lower) != len(self.upper):
            raise ValueError("lower and upper must have equal lengths")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ValueError(f"upper must exceed lower, got {self.lower} / {self.upper}")
        if self.points < 16:
            raise ValueError(f"need at least 16 points per dimension, got {self.points}")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(l, u, self.points) for l, u in zip(self.lower, self.upper)
        ]

    def mesh(self) -> np.ndarray:
        """All grid nodes as rows, row-major over the axes."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def log_trapezoid_weights(self) -> np.ndarray:
        """Log quadrature weight per node (product trapezoid rule)."""
        logw = np.zeros(1)
        for lo, hi in zip(self.lower, self.upper):
            h = (hi - lo) / (self.points - 1)
            w = np.full(self.points, h)
            w[0] = w[-1] = h / 2.0
            logw = (logw[:, None] + np.log(w)[None, :]).reshape(-1)
        return logw


def default_grid(dim: int, half_width: float = 8.0, points: int = 801) -> GridSpec:
    return GridSpec((-half_width,) * dim, (half_width,) * dim, points)


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples."""
    pooled = np.vstack([x, y])
    d = cdist(pooled, pooled)
    return float(np.median(d[np.triu_indices_from(d, k=1)]))


def rbf_kernel(x, y, bandwidth: float) -> np.ndarray:
    """Gaussian kernel matrix exp(-||x - y||^2 / (2 bw^2))."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * bandwidth**2))


def mmd_rbf(x, y, bandwidth=None) -> float:
    """Unbiased squared-MMD U-statistic with a Gaussian kernel.

    bandwidth defaults to the median pairwise distance of the pooled
    samples. The unbiased estimator can be slightly negative for
    matching distributions.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatchError(f"mmd: widths {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 2 or len(y) < 2:
        raise ValueError("mmd needs at least 2 samples per side")
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    m, n = len(x), len(y)
    kxx = rbf_kernel(x, x, bandwidth)
    kyy = rbf_kernel(y, y, bandwidth)
    kxy = rbf_kernel(x, y, bandwidth)
    a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    c = 2.0 * kxy.mean()
    return float(a + b - c)


def mmd_permutation_null(x, y, n_permutations: int = 500, seed=0, bandwidth=None) -> np.ndarray:
    """Null distribution of mmd_rbf under pooled label permutations.

    The bandwidth is fixed from the original pooling so permutations
    only shuffle labels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    pooled = np.vstack([x, y])
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    null = np.zeros(n_permutations)
    for i in range(n_permutations):
        perm = rng.permutation(len(pooled))
        null[i] = mmd_rbf(pooled[perm[: len(x)]], pooled[perm[len(x) :]], bandwidth)
    return null


# ---------------------------------------------------------------------------
# Frechet-Gaussian proxy
# ---------------------------------------------------------------------------


def _sqrtm_spd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(a)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(x, y) -> float:
    """Frechet distance between moment-matched Gaussians of two samples.

    ||mu_x - mu_y||^2 + tr(S_x + S_y - 2 (S_x S_y)^{1/2}), with the matrix
    square root taken through symmetric eigendecompositions. Rank-deficient
    covariances are regularized with 1e-6 * I (logged).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[1] != y.shape[1]:
        raise ShapeMismatchError(f"frechet: widths {x.shape[1]} vs {y.shape[1]}")
    dim = x.shape[1]
    if len(x) <= dim or len(y) <= dim:
        raise ValueError(f"need more than {dim} samples per side")
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.cov(x, rowvar=False).reshape(dim, dim)
    cov_y = np.cov(y, rowvar=False).reshape(dim, dim)
    for name, cov in (("x", cov_x), ("y", cov_y)):
        if np.linalg.eigvalsh(cov).min() < 1e-10:
            logger.warning("frechet_gaussian: regularizing rank-deficient %s covariance", name)
            cov += 1e-6 * np.eye(dim)
    root_x = _sqrtm_spd(cov_x)
    cross = _sqrtm_spd(root_x @ cov_y @ root_x)
    mean_term = float(((mu_x - mu_y) ** 2).sum())
    trace_term = float(np.trace(cov_x) + np.trace(cov_y) - 2.0 * np.trace(cross))
    return mean_term + trace_term


# ---------------------------------------------------------------------------
# Quadrature oracles
# ---------------------------------------------------------------------------


def as_energy_fn(f):
    """Adapt an energy model or plain callable to rows -> values."""
    if callable(f) and not hasattr(f, "parameters"):
        return lambda z: np.asarray(f(z), dtype=np.float64).reshape(len(z))

    def fn(z):
        with no_grad():
            return f(Tensor(z)).data.reshape(len(z))

    return fn


def _batched_values(fn, mesh: np.ndarray, batch: int = 65536) -> np.ndarray:
    out = np.empty(len(mesh))
    for start in range(0, len(mesh), batch):
        out[start : start + batch] = fn(mesh[start : start + batch])
    return out


def _log_standard_normal(mesh: np.ndarray) -> np.ndarray:
    return -0.5 * ((mesh**2).sum(axis=1) + mesh.shape[1] * LOG_2PI)


def quadrature_log_z(f, grid: GridSpec) -> float:
    """Trapezoid quadrature of log integral exp(-f(z)) N(z; 0, I) dz."""
    if grid.dim > 3:
        raise ValueError(f"quadrature supports dim <= 3, got {grid.dim}")
    mesh = grid.mesh()
    vals = -_batched_values(as_energy_fn(f), mesh) + _log_standard_normal(mesh)
    return float(logsumexp(vals + grid.log_trapezoid_weights()))


def quadrature_expectation(f, h, grid: GridSpec) -> np.ndarray:
    """E[h(z)] under the normalized tilted density exp(-f) p_0 / Z.

    ``h`` maps rows to (n,) or (n, k); returns a scalar or (k,) array.
    """
    if grid.dim > 3:
        raise ValueError(f"quadrature supports dim <= 3, got {grid.dim}")
    mesh = grid.mesh()
    log_un = -_batched_values(as_energy_fn(f), mesh) + _log_standard_normal(mesh)
    logw = log_un + grid.log_trapezoid_weights()
    w = np.exp(logw - logsumexp(logw))
    hv = np.asarray(h(mesh), dtype=np.float64)
    if hv.ndim == 1:
        return float((w * hv).sum())
    return (w[:, None] * hv).sum(axis=0)


def density_grid(log_density, grid: GridSpec):
    """Row-major 2-d grid of log-density values; returns (values, xs, ys)."""
    if grid.dim != 2:
        raise ValueError(f"density_grid needs dim == 2, got {grid.dim}")
    mesh = grid.mesh()
    vals = _batched_values(
        lambda z: np.asarray(log_density(z), dtype=np.float64).reshape(len(z)), mesh
    )
    xs, ys = grid.axes()
    return vals.reshape(grid.points, grid.points), xs, ys


# ---------------------------------------------------------------------------
# PCA and nearest neighbors
# ---------------------------------------------------------------------------


@dataclass
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (d, k), columns are principal directions

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return coords @ self.components.T + self.mean


def pca_fit(data: np.ndarray, k: int) -> PcaBasis:
    """Top-k principal directions via covariance eigendecomposition."""
    data = np.asarray(data, dtype=np.float64)
    d = data.shape[1]
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    mean = data.mean(axis=0)
    cov = np.cov(data - mean, rowvar=False).reshape(d, d)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return PcaBasis(mean=mean, components=vecs[:, order[:k]])


def nearest_neighbors(query, trainset, k_nn: int, basis: PcaBasis) -> list[int]:
    """Indices of the k nearest training rows to one query, by Euclidean
    distance in the projected space; brute force, ties broken by index."""
    trainset = np.asarray(trainset, dtype=np.float64)
    if k_nn > len(trainset):
        raise ValueError(f"k_nn {k_nn} exceeds trainset size {len(trainset)}")
    q = basis.project(np.asarray(query, dtype=np.float64).reshape(1, -1))
    t = basis.project(trainset)
    dist = np.sqrt(((t - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    return [int(i) for i in order[:k_nn]]
