"""
Albedo/shade decomposition of a linear image guided by LiDAR intensity.

The solver works on u = log S. Every pixel's u is kept inside the box

    [log max_c I_c, log(min_c I_c / ALBEDO_FLOOR)]

so that R = I / exp(u) stays in [ALBEDO_FLOOR, 1] without clamping and the
physical term |I - R S| is zero by construction. The remaining objective

    E(u) = lambda6 * smooth(R) + lambda7 * intensity(R, S, L)

is minimized by projected gradient descent with Armijo backtracking,
alternating with a refit of the scale/bias parameters. The refit runs
reweighted least squares on the same smoothed L1 error the objective uses,
starting from the current parameters, so it never raises E. The first
alternation starts from the identity alignment (1, 0, 1, 0). L1 terms are
smoothed as sqrt(x^2 + delta^2) - delta.

Non-learned comparison methods live here too: Baseline R, Baseline S and
(color) Retinex.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.optimize import Bounds, minimize
from scipy.sparse.linalg import spsolve

from iid_errors import EmptyMask, NonFinite, ShapeMismatch, ValidationError
from imagecore import (REC709, GrayLike, GrayMap, ImageLike, LinearImage, chromaticity, gray_array,
                       pair_slices, rgb_array, rgb_to_gray)
from losses import RATIO_FLOOR, AffinityConfig, LossWeights, ScaleBias, fit_scale_bias, pair_affinities

logger = logging.getLogger(__name__)

ALBEDO_FLOOR = 1e-4
IMAGE_FLOOR = 1e-12
LOG_ALBEDO_FLOOR = float(np.log(ALBEDO_FLOOR))
TIKHONOV = 1e-8
REFIT_ROUNDS = 30

INIT_MODES = ('intensity', 'constant', 'luminance')
OPTIMIZERS = ('gradient', 'lbfgsb')


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Albedo R, single-channel shade S and the scale/bias used at the optimum."""

    albedo: LinearImage
    shade: GrayMap
    scale_bias: ScaleBias = field(default_factory=ScaleBias)
    objective: Optional[float] = None
    history: Tuple[float, ...] = ()
    iterations: int = 0

    def reconstruction(self) -> np.ndarray:
        return self.albedo.data * self.shade.data[..., None]

    def reconstruction_error(self, image: ImageLike) -> float:
        """max |I - R S| over pixels and channels."""
        return float(np.max(np.abs(rgb_array(image) - self.reconstruction())))


@dataclass(frozen=True)
class SolverConfig:
    """Objective weights and optimizer settings."""

    weights: LossWeights = field(default_factory=LossWeights)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)
    max_outer: int = 10
    max_inner: int = 200
    armijo: float = 1e-4
    grad_tol: float = 1e-6
    init: str = 'intensity'
    huber_delta: float = 1e-6
    optimizer: str = 'gradient'

    def __post_init__(self):
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValidationError(f"iteration counts must be >= 1, got {self.max_outer}/{self.max_inner}")
        if not 0.0 < self.armijo < 1.0:
            raise ValidationError(f"armijo must lie in (0, 1), got {self.armijo}")
        if not self.grad_tol > 0 or not self.huber_delta > 0:
            raise ValidationError("grad_tol and huber_delta must be > 0")
        if self.init not in INIT_MODES:
            raise ValidationError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True, eq=False)
class ObjectiveState:
    """Everything E(u) needs besides u itself."""

    log_image: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    pair_weights: list
    intensity: np.ndarray
    ratio: np.ndarray
    mask: np.ndarray
    sb: ScaleBias
    lambda_smooth: float
    lambda_int: float
    delta: float

    @property
    def pixel_count(self) -> int:
        return self.mask.size

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())


def prepare_state(I: ImageLike, L: GrayLike, mask, cfg: SolverConfig = SolverConfig(),
                  sb: ScaleBias = ScaleBias()) -> ObjectiveState:
    """Precompute logs, the feasible box and the pair affinities for E(u)."""
    rgb = rgb_array(I)
    lum = gray_array(L)
    if lum.shape != rgb.shape[:2]:
        raise ShapeMismatch(f"intensity {lum.shape} does not match image {rgb.shape[:2]}")
    m = np.asarray(mask).astype(bool)
    if m.shape != lum.shape:
        raise ShapeMismatch(f"mask {m.shape} does not match image {rgb.shape[:2]}")
    if not m.any() and cfg.weights.lambda7 > 0:
        raise EmptyMask("decomposition needs at least one pixel with LiDAR intensity")

    floored = np.maximum(rgb, IMAGE_FLOOR)
    log_image = np.log(floored)
    lower = log_image.max(axis=-1)
    # Channel ratios above 1/ALBEDO_FLOOR leave an empty box; pin to its lower end
    upper = np.maximum(log_image.min(axis=-1) - LOG_ALBEDO_FLOOR, lower)
    return ObjectiveState(
        log_image=log_image,
        lower=lower,
        upper=upper,
        pair_weights=pair_affinities(rgb, cfg.affinity),
        intensity=lum,
        ratio=rgb_to_gray(rgb) / np.maximum(lum, RATIO_FLOOR),
        mask=m,
        sb=sb,
        lambda_smooth=cfg.weights.lambda6,
        lambda_int=cfg.weights.lambda7,
        delta=cfg.huber_delta,
    )


def project(u: np.ndarray, state: ObjectiveState) -> np.ndarray:
    return np.clip(u, state.lower, state.upper)


def log_albedo(u: np.ndarray, state: ObjectiveState) -> Tuple[np.ndarray, np.ndarray]:
    """log R = clamp(log I - u, log ALBEDO_FLOOR, 0) and the mask of unclamped channels."""
    raw = state.log_image - u[..., None]
    active = (raw >= LOG_ALBEDO_FLOOR) & (raw <= 0.0)
    return np.clip(raw, LOG_ALBEDO_FLOOR, 0.0), active


def _huber(x: np.ndarray, delta: float) -> np.ndarray:
    return np.sqrt(x * x + delta * delta) - delta


def _huber_slope(x: np.ndarray, delta: float) -> np.ndarray:
    return x / np.sqrt(x * x + delta * delta)


def _evaluate(u: np.ndarray, state: ObjectiveState, with_grad: bool):
    lr, active = log_albedo(u, state)
    value = 0.0
    grad = np.zeros_like(u) if with_grad else None

    if state.lambda_smooth > 0:
        smooth = 0.0
        g_smooth = np.zeros_like(u) if with_grad else None
        for offset, v in state.pair_weights:
            a, b = pair_slices(offset)
            d = lr[a] - lr[b]
            smooth += float(np.sum(v[..., None] * _huber(d, state.delta)))
            if with_grad:
                slope = v[..., None] * _huber_slope(d, state.delta)
                g_smooth[a] -= np.sum(slope * active[a], axis=-1)
                g_smooth[b] += np.sum(slope * active[b], axis=-1)
        value += state.lambda_smooth * smooth / state.pixel_count
        if with_grad:
            grad += state.lambda_smooth * g_smooth / state.pixel_count

    if state.lambda_int > 0:
        sb = state.sb
        albedo = np.exp(lr)
        shade = np.exp(u)
        e1 = albedo @ REC709 - sb.s1 * state.intensity - sb.b1
        e2 = shade - sb.s2 * state.ratio - sb.b2
        m = state.mask
        intensity = float(np.sum(_huber(e1[m], state.delta) + _huber(e2[m], state.delta)))
        value += state.lambda_int * intensity / state.masked_count
        if with_grad:
            d_lum = -((albedo * active) @ REC709)
            g_int = np.where(m, _huber_slope(e1, state.delta) * d_lum + _huber_slope(e2, state.delta) * shade, 0.0)
            grad += state.lambda_int * g_int / state.masked_count

    if not np.isfinite(value):
        raise NonFinite(f"objective evaluated to {value}")
    return value, grad


def objective_value(u: np.ndarray, state: ObjectiveState) -> float:
    """E(u) with Huber-smoothed L1 terms."""
    value, _ = _evaluate(np.asarray(u, dtype=np.float64), state, with_grad=False)
    return value


def objective_gradient(u: np.ndarray, state: ObjectiveState) -> np.ndarray:
    """Analytic dE/du, same shape as u."""
    _, grad = _evaluate(np.asarray(u, dtype=np.float64), state, with_grad=True)
    return grad


def initial_log_shade(I: ImageLike, state: ObjectiveState, mode: str) -> np.ndarray:
    """
    intensity: S = s2 F(I)/L + b2 on the mask, where the intensity term vanishes;
        elsewhere F(I) shifted by the median log offset seen on the mask. Falls
        back to constant when the intensity term is off.
    constant: one global shade level (max of I), all structure starts in R.
    luminance: S = F(I), R starts as pure chromaticity.
    """
    rgb = rgb_array(I)
    log_lum = np.log(np.maximum(rgb_to_gray(rgb), IMAGE_FLOOR))
    if mode == 'intensity' and state.lambda_int > 0 and state.mask.any():
        m = state.mask
        target = np.log(np.maximum(state.sb.s2 * state.ratio + state.sb.b2, IMAGE_FLOOR))
        offset = float(np.median((target - log_lum)[m]))
        u = np.where(m, target, log_lum + offset)
    elif mode == 'luminance':
        u = log_lum
    else:
        u = np.full(state.lower.shape, np.log(max(rgb.max(), IMAGE_FLOOR)))
    return project(u, state)


def _robust_line(target: np.ndarray, source: np.ndarray, mask: np.ndarray, scale: float, bias: float,
                 delta: float) -> Tuple[float, float]:
    """
    Lower sum over the mask of sqrt(r^2 + delta^2), r = target - scale * source - bias,
    by reweighted least squares from (scale, bias). Each round minimizes a
    quadratic majorizer of that sum, so it never goes up.
    """
    t, x = target[mask], source[mask]
    constant_source = x.size < 2 or np.ptp(x) == 0.0
    for _ in range(REFIT_ROUNDS):
        residual = target - scale * source - bias
        weights = 1.0 / np.sqrt(residual * residual + delta * delta)
        if constant_source:
            new_scale, new_bias = scale, float(np.average(t - scale * x, weights=weights[mask]))
        else:
            new_scale, new_bias, _ = fit_scale_bias(target, source, mask, weights=np.where(mask, weights, 1.0))
        done = abs(new_scale - scale) + abs(new_bias - bias) <= 1e-14 * (1.0 + abs(scale) + abs(bias))
        scale, bias = new_scale, new_bias
        if done:
            break
    return scale, bias


def refit_scale_bias(u: np.ndarray, state: ObjectiveState) -> ScaleBias:
    """Robust (s1, b1) on F(R) ~ L and (s2, b2) on S ~ F(I)/L over the mask, starting from state.sb."""
    if state.lambda_int == 0:
        return state.sb
    lr, _ = log_albedo(u, state)
    sb = state.sb
    s1, b1 = _robust_line(np.exp(lr) @ REC709, state.intensity, state.mask, sb.s1, sb.b1, state.delta)
    s2, b2 = _robust_line(np.exp(u), state.ratio, state.mask, sb.s2, sb.b2, state.delta)
    return ScaleBias(s1, b1, s2, b2)


def _projected_descent(u: np.ndarray, energy: float, state: ObjectiveState,
                       cfg: SolverConfig) -> Tuple[np.ndarray, float, int]:
    """Armijo-backtracked projected gradient steps from u; energy never increases."""
    step = None
    taken = 0
    for _ in range(cfg.max_inner):
        grad = objective_gradient(u, state)
        if np.max(np.abs(u - project(u - grad, state))) <= cfg.grad_tol:
            break
        if step is None:
            step = 0.1 / max(float(np.max(np.abs(grad))), 1e-300)
        while step > 1e-20:
            candidate = project(u - step * grad, state)
            value = objective_value(candidate, state)
            if value <= energy + cfg.armijo * float(np.sum(grad * (candidate - u))):
                break
            step *= 0.5
        else:
            break
        u, energy = candidate, value
        taken += 1
        step *= 2.0
    return u, energy, taken


def _lbfgsb(u: np.ndarray, energy: float, state: ObjectiveState,
            cfg: SolverConfig) -> Tuple[np.ndarray, float, int]:
    shape = u.shape

    def fun(flat):
        value, grad = _evaluate(flat.reshape(shape), state, with_grad=True)
        return value, grad.ravel()

    result = minimize(fun, u.ravel(), jac=True, method='L-BFGS-B',
                      bounds=Bounds(state.lower.ravel(), state.upper.ravel()),
                      options={'maxiter': cfg.max_inner, 'gtol': cfg.grad_tol})
    candidate = project(result.x.reshape(shape), state)
    value = objective_value(candidate, state)
    if value <= energy:
        return candidate, value, int(result.nit)
    return u, energy, int(result.nit)


def decompose(I: ImageLike, L: GrayLike, mask, cfg: SolverConfig = SolverConfig()) -> Decomposition:
    """
    Split I into albedo and shade using LiDAR intensity L on the mask.

    Args:
        I: Linear RGB image
        L: Intensity map (densified or raw)
        mask: Pixels where L takes part in the intensity loss
        cfg: Weights and optimizer settings

    Returns:
        Decomposition of the lowest-objective iterate
    """
    rgb = rgb_array(I)
    state = prepare_state(rgb, L, mask, cfg)
    u = initial_log_shade(rgb, state, cfg.init)
    energy = objective_value(u, state)
    history: List[float] = [energy]
    inner_step = _lbfgsb if cfg.optimizer == 'lbfgsb' else _projected_descent
    total_steps = 0

    for outer in range(cfg.max_outer):
        u, energy, steps = inner_step(u, energy, state, cfg)
        total_steps += steps

        refit = replace(state, sb=refit_scale_bias(u, state))
        refit_energy = objective_value(u, refit)
        if refit_energy <= energy:
            state, energy = refit, refit_energy

        logger.debug(f"[Solver] outer {outer + 1}: E={energy:.6e} after {steps} steps")
        improvement = history[-1] - energy
        history.append(energy)
        if improvement <= cfg.grad_tol * max(1.0, abs(energy)):
            break

    lr, _ = log_albedo(u, state)
    logger.info(f"[Solver] E {history[0]:.4e} -> {energy:.4e} in {len(history) - 1} alternations, "
                f"{total_steps} steps ({cfg.optimizer})")
    return Decomposition(
        albedo=LinearImage(np.exp(lr)),
        shade=GrayMap(np.exp(u)),
        scale_bias=state.sb,
        objective=energy,
        history=tuple(history),
        iterations=total_steps,
    )


def baseline_r(I: ImageLike) -> Decomposition:
    """Baseline R: albedo all ones, shade = F(I)."""
    rgb = rgb_array(I)
    return Decomposition(albedo=LinearImage(np.ones_like(rgb)), shade=GrayMap(rgb_to_gray(rgb)))


def baseline_s(I: ImageLike) -> Decomposition:
    """Baseline S: shade all ones, albedo = I."""
    rgb = rgb_array(I)
    return Decomposition(albedo=LinearImage(rgb), shade=GrayMap(np.ones(rgb.shape[:2])))


def _difference_operators(h: int, w: int) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Forward differences along x (h * (w-1) rows) and y ((h-1) * w rows)."""
    def diff(n):
        return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))

    dx = sp.kron(sp.identity(h), diff(w)).tocsr()
    dy = sp.kron(diff(h), sp.identity(w)).tocsr()
    return dx, dy


def retinex(I: ImageLike, threshold: float = 0.1, use_color: bool = False,
            color_threshold: float = 0.02) -> Decomposition:
    """
    Classical (color) Retinex.

    Log-luminance gradients above threshold are albedo edges; with use_color
    a chromaticity jump above color_threshold also marks an albedo edge. log F(R)
    is reintegrated from the kept gradients by a Poisson solve and shifted
    so its maximum is 0.

    Args:
        I: Linear RGB image
        threshold: Log-gradient cutoff
        use_color: Also classify by chromaticity gradient
        color_threshold: Cutoff on the rg-gradient norm

    Returns:
        Decomposition with R = I F(R)/F(I) and S = F(I)/F(R)
    """
    if not threshold > 0:
        raise ValidationError(f"threshold must be > 0, got {threshold}")
    rgb = rgb_array(I)
    h, w = rgb.shape[:2]
    lum = np.maximum(rgb_to_gray(rgb), IMAGE_FLOOR)
    log_lum = np.log(lum)

    gx = np.diff(log_lum, axis=1)
    gy = np.diff(log_lum, axis=0)
    keep_x = np.abs(gx) > threshold
    keep_y = np.abs(gy) > threshold
    if use_color:
        chroma = chromaticity(rgb)
        keep_x |= np.linalg.norm(np.diff(chroma, axis=1), axis=-1) > color_threshold
        keep_y |= np.linalg.norm(np.diff(chroma, axis=0), axis=-1) > color_threshold

    dx, dy = _difference_operators(h, w)
    system = (dx.T @ dx + dy.T @ dy + TIKHONOV * sp.identity(h * w)).tocsc()
    rhs = dx.T @ np.where(keep_x, gx, 0.0).ravel() + dy.T @ np.where(keep_y, gy, 0.0).ravel()
    log_albedo_lum = spsolve(system, rhs).reshape(h, w)
    log_albedo_lum -= log_albedo_lum.max()

    albedo_lum = np.exp(log_albedo_lum)
    albedo = np.clip(rgb * (albedo_lum / lum)[..., None], 0.0, 1.0)
    logger.debug(f"[Retinex] {int(keep_x.sum() + keep_y.sum())} albedo edges (color={use_color})")
    return Decomposition(albedo=LinearImage(albedo), shade=GrayMap(lum / albedo_lum))


def shadow_step(albedo_lum: GrayLike, shadow_mask, band: int = 3,
                reference: Optional[GrayLike] = None) -> float:
    """
    Relative step of albedo luminance across a shadow boundary.

    Compares the median inside the shadow with the median outside it, both
    within `band` pixels of the boundary. With a reference (ground-truth albedo
    luminance) the ratio albedo/reference is compared instead, so regions of
    different true albedo do not register as a step.

    Returns:
        |median_in / median_out - 1|
    """
    lum = gray_array(albedo_lum)
    shadow = np.asarray(shadow_mask).astype(bool)
    if shadow.shape != lum.shape:
        raise ShapeMismatch(f"shadow mask {shadow.shape} does not match {lum.shape}")
    if band < 1:
        raise ValidationError(f"band must be >= 1, got {band}")
    values = lum if reference is None else lum / np.maximum(gray_array(reference), IMAGE_FLOOR)

    inner = shadow & ndimage.binary_dilation(~shadow, iterations=band)
    outer = ~shadow & ndimage.binary_dilation(shadow, iterations=band)
    if not inner.any() or not outer.any():
        raise EmptyMask("shadow mask has no boundary")
    return float(abs(np.median(values[inner]) / max(np.median(values[outer]), IMAGE_FLOOR) - 1.0))
