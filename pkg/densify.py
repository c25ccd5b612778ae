"""
LiDAR intensity densification (LID).

Turns sparse, occluded per-pixel intensity into a dense map by minimizing

    sum_p m(p) (x(p) - x0(p))^2 + lambda_reg * sum_(i,j) w(i,j) (x(i) - x(j))^2

over the 4- (or 8-) connected pixel graph, with RGB-similarity edge weights
w(i,j) = exp(-|rgb_i - rgb_j|^2 / (2 sigma_rgb^2)). The normal equations
(M + lambda_reg * Lap) x = M x0 are solved by Jacobi-preconditioned conjugate
gradient.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from iid_errors import EmptyMask, NonConvergence, ShapeMismatch, ValidationError
from imagecore import GrayMap, ImageLike, check_same_shape, neighbor_offsets, pair_slices, rgb_array

logger = logging.getLogger(__name__)

# Keeps the Jacobi diagonal strictly positive when colour distances underflow
WEIGHT_FLOOR = 1e-300
# Recompute the true residual every this many CG iterations
CG_ROUNDOFF = 50


@dataclass(frozen=True, eq=False)
class SparseIntensity:
    """Per-pixel LiDAR intensity L plus its observation mask m_L."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask)
        if values.ndim != 2 or mask.shape != values.shape:
            raise ShapeMismatch(f"values {values.shape} and mask {mask.shape} must be equal H x W arrays")
        if not np.isin(mask, (0, 1)).all():
            raise ValidationError("mask values must be exactly 0 or 1")
        mask = mask.astype(bool)
        observed = values[mask]
        if not np.all(np.isfinite(observed)) or observed.min(initial=0.0) < 0.0 or observed.max(initial=0.0) > 1.0:
            raise ValidationError("observed intensity values must be finite and within [0, 1]")
        clean = np.where(mask, values, 0.0)
        clean.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, 'values', clean)
        object.__setattr__(self, 'mask', mask)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def observed_count(self) -> int:
        return int(self.mask.sum())

    @property
    def density(self) -> float:
        return self.observed_count / self.mask.size


@dataclass(frozen=True)
class DensifyParams:
    """Knobs of the edge-aware quadratic densifier."""

    lambda_reg: float = 1.0
    sigma_rgb: float = 0.1
    max_iters: int = 2000
    tol: float = 1e-8
    connectivity: int = 4

    def __post_init__(self):
        if not self.lambda_reg > 0:
            raise ValidationError(f"lambda_reg must be > 0, got {self.lambda_reg}")
        if not self.sigma_rgb > 0:
            raise ValidationError(f"sigma_rgb must be > 0, got {self.sigma_rgb}")
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be > 0, got {self.tol}")
        neighbor_offsets(self.connectivity)


@dataclass(frozen=True, eq=False)
class EdgeWeights:
    """Weights of every neighbour pair, one array per offset."""

    offsets: Tuple[Tuple[int, int], ...]
    weights: Tuple[np.ndarray, ...]
    shape: Tuple[int, int]


@dataclass(frozen=True, eq=False)
class DensifyResult:
    """Dense intensity plus the unchanged observation mask."""

    dense: GrayMap
    mask: np.ndarray
    raw: np.ndarray
    iterations: int
    residual: float


def affinity_weights(img: ImageLike, sigma_rgb: float, connectivity: int = 4) -> EdgeWeights:
    """
    RGB-similarity weights over neighbour pairs.

    Args:
        img: Guide image (linear RGB)
        sigma_rgb: Colour bandwidth
        connectivity: 4 or 8

    Returns:
        EdgeWeights with w = exp(-|drgb|^2 / (2 sigma_rgb^2)) per pair
    """
    rgb = rgb_array(img)
    offsets = neighbor_offsets(connectivity)
    weights = []
    for offset in offsets:
        a, b = pair_slices(offset)
        dist2 = np.sum((rgb[a] - rgb[b]) ** 2, axis=-1)
        weights.append(np.exp(-dist2 / (2.0 * sigma_rgb ** 2)))
    return EdgeWeights(offsets=offsets, weights=tuple(weights), shape=rgb.shape[:2])


def graph_laplacian(edges: EdgeWeights, floor: float = WEIGHT_FLOOR) -> sp.csr_matrix:
    """Weighted graph Laplacian D - W of the pixel graph (row-major pixel order)."""
    h, w = edges.shape
    index = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for offset, weight in zip(edges.offsets, edges.weights):
        a, b = pair_slices(offset)
        rows.append(index[a].ravel())
        cols.append(index[b].ravel())
        vals.append(np.maximum(weight, floor).ravel())
    i = np.concatenate(rows)
    j = np.concatenate(cols)
    v = np.concatenate(vals)
    adjacency = sp.coo_matrix((np.concatenate([v, v]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                              shape=(h * w, h * w)).tocsr()
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    return (sp.diags(degree) - adjacency).tocsr()


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray, diag: np.ndarray,
                       x0: Optional[np.ndarray] = None, max_iters: int = 2000,
                       tol: float = 1e-8) -> Tuple[np.ndarray, int, float]:
    """
    Jacobi-preconditioned conjugate gradient for an SPD system A x = b.

    Args:
        matvec: Function returning A @ x (must not modify its argument)
        b: Right-hand side
        diag: Diagonal of A (the preconditioner is its inverse)
        x0: Initial guess
        max_iters: Iteration cap
        tol: Target relative residual |b - A x| / |b|

    Returns:
        Tuple of (x, iterations, relative residual)
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b), 0, 0.0

    inv_diag = 1.0 / diag
    residual = b - matvec(x)
    rel = np.linalg.norm(residual) / b_norm
    if rel <= tol:
        return x, 0, rel

    searchdir = inv_diag * residual
    delta = residual @ searchdir
    for iteration in range(1, max_iters + 1):
        searchfwd = matvec(searchdir)
        alpha = delta / (searchdir @ searchfwd)
        x += alpha * searchdir
        if iteration % CG_ROUNDOFF == 0:
            residual = b - matvec(x)
        else:
            residual -= alpha * searchfwd
        rel = np.linalg.norm(residual) / b_norm
        if rel <= tol:
            return x, iteration, rel
        tsearchdir = inv_diag * residual
        tdelta = residual @ tsearchdir
        searchdir = tsearchdir + (tdelta / delta) * searchdir
        delta = tdelta
    return x, max_iters, rel


def densify(img: ImageLike, sparse: SparseIntensity, params: DensifyParams = DensifyParams()) -> DensifyResult:
    """
    Densify sparse LiDAR intensity guided by the RGB image.

    Args:
        img: Linear RGB guide image
        sparse: Observed intensity and mask
        params: Regularization and solver settings

    Returns:
        DensifyResult whose dense map is clamped to [0, 1]
    """
    rgb = rgb_array(img)
    check_same_shape(rgb, sparse.values, what="image and LiDAR intensity")
    if sparse.observed_count == 0:
        raise EmptyMask("no observed LiDAR pixels to densify")

    h, w = sparse.shape
    m = sparse.mask.ravel().astype(np.float64)
    x_obs = sparse.values.ravel()

    laplacian = graph_laplacian(affinity_weights(rgb, params.sigma_rgb, params.connectivity))
    system = (sp.diags(m) + params.lambda_reg * laplacian).tocsr()
    b = m * x_obs
    start = np.full(h * w, x_obs[m > 0].mean())

    x, iterations, residual = conjugate_gradient(system.dot, b, system.diagonal(), start,
                                                 params.max_iters, params.tol)
    if residual > params.tol:
        if residual > 10.0 * params.tol:
            raise NonConvergence("densification CG did not converge", residual, iterations)
        logger.warning(f"[Densify] Stopped at residual {residual:.2e} (tol {params.tol:.0e})")

    logger.info(f"[Densify] {sparse.observed_count}/{h * w} observed, CG {iterations} iterations, "
                f"residual {residual:.2e}")
    raw = x.reshape(h, w)
    raw.setflags(write=False)
    return DensifyResult(dense=GrayMap(np.clip(raw, 0.0, 1.0)), mask=sparse.mask, raw=raw,
                         iterations=iterations, residual=float(residual))


def subsample_mask(sparse: SparseIntensity, keep_fraction: float, seed: int) -> SparseIntensity:
    """
    Thin the observation mask: every observed pixel survives independently
    with probability keep_fraction under a seeded generator.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValidationError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    rng = np.random.default_rng(seed)
    keep = rng.random(sparse.shape) < keep_fraction
    mask = sparse.mask & keep
    return SparseIntensity(np.where(mask, sparse.values, 0.0), mask.astype(np.uint8))
