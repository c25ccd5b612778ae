"""
Loss terms of the decomposition objective as pure functions over arrays.

Image-measurable terms:
- physical_loss          |I - R * S|
- smooth_loss            affinity-weighted |log R_i - log R_j|_1
- intensity_consistency_loss
                         |F(R) - s1 L - b1| + |F(S) - s2 F(I)/L - b2| on the mask

Network terms (their encoder/generator/discriminator outputs are inputs here):
- content_loss, kl_loss, image_recon_loss, prior_recon_loss, adversarial_loss
- bundle_parts scores the terms a LatentBundle carries

All amplitude losses are means over pixels so the weights do not depend on
resolution. total_objective combines everything with LossWeights.
"""

import logging
from dataclasses import astuple, dataclass
from typing import List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from iid_errors import DegenerateFit, EmptyMask, ShapeMismatch, ValidationError
from imagecore import (GrayLike, ImageLike, chromaticity, gray_array, neighbor_offsets, pair_slices,
                       rgb_array, rgb_to_gray)

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-4
RATIO_FLOOR = 1e-3
SCORE_CLAMP = 1e-7
LOG_DENSITY_FIELDS = ('logp_R', 'logq_R', 'logp_S', 'logq_S')
SCORE_FIELDS = ('dR_fake', 'dR_real', 'dS_fake', 'dS_real')


@dataclass(frozen=True)
class LossWeights:
    """lambda1..lambda7 of the total objective."""

    lambda1: float = 10.0
    lambda2: float = 0.1
    lambda3: float = 10.0
    lambda4: float = 0.1
    lambda5: float = 5.0
    lambda6: float = 1.0
    lambda7: float = 20.0

    def __post_init__(self):
        for name, value in zip(('lambda1', 'lambda2', 'lambda3', 'lambda4', 'lambda5', 'lambda6', 'lambda7'),
                               astuple(self)):
            if not (np.isfinite(value) and value >= 0):
                raise ValidationError(f"{name} must be a non-negative number, got {value}")


@dataclass(frozen=True)
class AffinityConfig:
    """Neighbourhood and diagonal bandwidths of the smoothness affinity."""

    neighborhood: int = 4
    sigma_pos: float = 0.1
    sigma_lum: float = 0.1
    sigma_chroma: float = 0.05

    def __post_init__(self):
        neighbor_offsets(self.neighborhood)
        for name in ('sigma_pos', 'sigma_lum', 'sigma_chroma'):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")

    @property
    def bandwidths(self) -> np.ndarray:
        """Square roots of the diagonal of Sigma, ordered like FeatureVector."""
        return np.array([self.sigma_pos, self.sigma_pos, self.sigma_lum,
                         self.sigma_chroma, self.sigma_chroma])


@dataclass(frozen=True)
class FeatureVector:
    """Pixel feature: normalized position, intensity and rg chromaticity."""

    x: float
    y: float
    lum: float
    r: float
    g: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.lum, self.r, self.g], dtype=np.float64)


@dataclass(frozen=True)
class ScaleBias:
    """Affine alignment of LiDAR intensity to albedo and shade luminance."""

    s1: float = 1.0
    b1: float = 0.0
    s2: float = 1.0
    b2: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite(v) for v in astuple(self)):
            raise ValidationError(f"scale/bias must be finite, got {astuple(self)}")


@dataclass(frozen=True, eq=False)
class LatentBundle:
    """
    Outputs of the (external) encoders, generators and discriminators.

    Content codes are required. Prior codes, log-density samples and
    discriminator scores are optional; the loss terms they feed are zero in
    bundle_parts when they are absent. Scores must lie strictly inside (0, 1).
    """

    c_I: np.ndarray
    c_R: np.ndarray
    c_S: np.ndarray
    z: Optional[Mapping[str, np.ndarray]] = None
    z_recovered: Optional[Mapping[str, np.ndarray]] = None
    logp_R: Optional[np.ndarray] = None
    logq_R: Optional[np.ndarray] = None
    logp_S: Optional[np.ndarray] = None
    logq_S: Optional[np.ndarray] = None
    dR_fake: Optional[np.ndarray] = None
    dR_real: Optional[np.ndarray] = None
    dS_fake: Optional[np.ndarray] = None
    dS_real: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in SCORE_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            scores = np.asarray(value, dtype=np.float64)
            if scores.size == 0 or not np.all((scores > 0.0) & (scores < 1.0)):
                raise ValidationError(f"{name} must be non-empty with every score strictly inside (0, 1)")
        for group in (LOG_DENSITY_FIELDS, SCORE_FIELDS):
            present = [getattr(self, name) is not None for name in group]
            if any(present) and not all(present):
                raise ValidationError(f"{', '.join(group)} must be given together")
        if (self.z is None) != (self.z_recovered is None):
            raise ValidationError("z and z_recovered must be given together")


@dataclass(frozen=True)
class LossParts:
    """Scalar values of all eight terms of the total objective."""

    adv: float = 0.0
    cnt: float = 0.0
    kl: float = 0.0
    img: float = 0.0
    pri: float = 0.0
    phy: float = 0.0
    smooth: float = 0.0
    intensity: float = 0.0


class AffineFit(NamedTuple):
    scale: float
    bias: float
    degenerate: bool = False


def _same_shape(*arrays: np.ndarray, what: str) -> None:
    if len({a.shape for a in arrays}) > 1:
        raise ShapeMismatch(f"{what}: shapes {[a.shape for a in arrays]} differ")


def _mask_array(mask, shape: Tuple[int, ...]) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise ShapeMismatch(f"mask shape {m.shape} does not match {shape}")
    return m


def physical_loss(I: ImageLike, R: ImageLike, S: GrayLike) -> float:
    """Mean over pixels and channels of |I - R * S|, S broadcast over channels."""
    i, r, s = rgb_array(I), rgb_array(R), gray_array(S)
    _same_shape(i, r, what="physical_loss image/albedo")
    if s.shape != i.shape[:2]:
        raise ShapeMismatch(f"physical_loss shade {s.shape} vs image {i.shape[:2]}")
    return float(np.mean(np.abs(i - r * s[..., None])))


def feature_map(I: ImageLike) -> np.ndarray:
    """Per-pixel FeatureVector components as an H x W x 5 array."""
    rgb = rgb_array(I)
    h, w = rgb.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs /= max(w - 1, 1)
    ys /= max(h - 1, 1)
    return np.dstack([xs, ys, rgb_to_gray(rgb), chromaticity(rgb)])


def affinity(fi: FeatureVector, fj: FeatureVector, cfg: AffinityConfig = AffinityConfig()) -> float:
    """v_ij = exp(-1/2 (fi - fj)^T Sigma^-1 (fi - fj)) with diagonal Sigma."""
    z = (fi.as_array() - fj.as_array()) / cfg.bandwidths
    return float(np.exp(-0.5 * np.dot(z, z)))


def pair_affinities(I: ImageLike, cfg: AffinityConfig = AffinityConfig()) -> List[Tuple[Tuple[int, int], np.ndarray]]:
    """Affinity v_ij of every neighbour pair, grouped by offset."""
    scaled = feature_map(I) / cfg.bandwidths
    out = []
    for offset in neighbor_offsets(cfg.neighborhood):
        a, b = pair_slices(offset)
        diff = scaled[a] - scaled[b]
        out.append((offset, np.exp(-0.5 * np.sum(diff * diff, axis=-1))))
    return out


def smooth_loss_from_weights(R: ImageLike, pair_weights) -> float:
    """
    Sum over neighbour pairs of v_ij * |log R_i - log R_j|_1, divided by the
    pixel count. R is floored at LOG_FLOOR before the log.
    """
    log_r = np.log(np.maximum(rgb_array(R), LOG_FLOOR))
    total = 0.0
    for offset, weights in pair_weights:
        a, b = pair_slices(offset)
        total += float(np.sum(weights * np.sum(np.abs(log_r[a] - log_r[b]), axis=-1)))
    return total / (log_r.shape[0] * log_r.shape[1])


def smooth_loss(R: ImageLike, I: ImageLike, cfg: AffinityConfig = AffinityConfig()) -> float:
    """Edge-aware albedo smoothness with affinities computed from I."""
    r, i = rgb_array(R), rgb_array(I)
    _same_shape(r, i, what="smooth_loss albedo/image")
    return smooth_loss_from_weights(r, pair_affinities(i, cfg))


def intensity_ratio(I: ImageLike, L: GrayLike) -> np.ndarray:
    """F(I) / L with L floored at RATIO_FLOOR."""
    return rgb_to_gray(rgb_array(I)) / np.maximum(gray_array(L), RATIO_FLOOR)


def intensity_consistency_loss(I: ImageLike, R: ImageLike, S: GrayLike, L: GrayLike, mask,
                               sb: ScaleBias = ScaleBias()) -> float:
    """
    Mean over masked pixels of |F(R) - s1 L - b1| + |F(S) - s2 F(I)/L - b2|.

    F of the single-channel shade is the shade itself.
    """
    i, r = rgb_array(I), rgb_array(R)
    s, l = gray_array(S), gray_array(L)
    _same_shape(i, r, what="intensity loss image/albedo")
    _same_shape(s, l, i[..., 0], what="intensity loss shade/intensity/image")
    m = _mask_array(mask, l.shape)
    if not m.any():
        raise EmptyMask("intensity consistency loss needs at least one masked pixel")
    albedo_term = np.abs(rgb_to_gray(r) - sb.s1 * l - sb.b1)
    shade_term = np.abs(s - sb.s2 * intensity_ratio(i, l) - sb.b2)
    return float(np.mean((albedo_term + shade_term)[m]))


def fit_scale_bias(target: GrayLike, source: GrayLike, mask, strict: bool = False,
                   weights: Optional[GrayLike] = None) -> AffineFit:
    """
    Least-squares line target ~ s * source + b over the mask, with s >= 0.

    Args:
        target: Values to explain
        source: Regressor
        mask: Pixels taking part
        strict: Raise DegenerateFit instead of returning the flagged fallback
        weights: Optional positive per-pixel weights of the squared residuals

    Returns:
        AffineFit(scale, bias, degenerate)
    """
    t, x = gray_array(target), gray_array(source)
    _same_shape(t, x, what="fit_scale_bias target/source")
    m = _mask_array(mask, t.shape)
    if not m.any():
        raise EmptyMask("fit_scale_bias needs at least one masked pixel")
    if weights is None:
        w = np.ones(int(m.sum()))
    else:
        w_full = gray_array(weights)
        _same_shape(t, w_full, what="fit_scale_bias target/weights")
        w = w_full[m]
        if not np.all(np.isfinite(w) & (w > 0)):
            raise ValidationError("fit_scale_bias weights must be finite and > 0 on the mask")
    tm, xm = t[m], x[m]
    mean_target = float(np.average(tm, weights=w))
    if tm.size < 2 or np.ptp(xm) == 0.0:
        if strict:
            raise DegenerateFit("source is constant on the mask")
        logger.warning("[Losses] Degenerate scale/bias fit: constant source, using s=0")
        return AffineFit(0.0, mean_target, True)
    root = np.sqrt(w)
    design = np.column_stack([xm, np.ones_like(xm)]) * root[:, None]
    (scale, bias), *_ = np.linalg.lstsq(design, tm * root, rcond=None)
    if scale < 0.0:
        return AffineFit(0.0, mean_target, False)
    return AffineFit(float(scale), float(bias), False)


def content_loss(bundle: LatentBundle) -> float:
    """mean |c_R - c_I| + mean |c_S - c_I|."""
    c_i, c_r, c_s = (np.asarray(c, dtype=np.float64) for c in (bundle.c_I, bundle.c_R, bundle.c_S))
    _same_shape(c_i, c_r, c_s, what="content codes")
    return float(np.mean(np.abs(c_r - c_i)) + np.mean(np.abs(c_s - c_i)))


def kl_loss(logp_R, logq_R, logp_S, logq_S) -> float:
    """Monte-Carlo KL estimate: mean(logp_R - logq_R) + mean(logp_S - logq_S)."""
    pr, qr, ps, qs = (np.asarray(a, dtype=np.float64) for a in (logp_R, logq_R, logp_S, logq_S))
    _same_shape(pr, qr, what="albedo log-density samples")
    _same_shape(ps, qs, what="shade log-density samples")
    return float(np.mean(pr - qr) + np.mean(ps - qs))


def _domain_l1(recovered: Mapping[str, np.ndarray], original: Mapping[str, np.ndarray], what: str) -> float:
    domains = ('I', 'R', 'S')
    missing = [d for d in domains if d not in recovered or d not in original]
    if missing:
        raise ValidationError(f"{what}: missing domain(s) {missing}")
    total = 0.0
    for d in domains:
        rec = np.asarray(recovered[d], dtype=np.float64)
        orig = np.asarray(original[d], dtype=np.float64)
        _same_shape(rec, orig, what=f"{what} domain {d}")
        total += float(np.mean(np.abs(rec - orig)))
    return total


def image_recon_loss(reconstructed: Mapping[str, np.ndarray], original: Mapping[str, np.ndarray]) -> float:
    """Sum over domains I, R, S of mean |G(E_c(x), E_p(x)) - x|."""
    return _domain_l1(reconstructed, original, "image reconstruction")


def prior_recon_loss(recovered: Mapping[str, np.ndarray], original: Mapping[str, np.ndarray]) -> float:
    """Sum over domains I, R, S of mean |E_p(G(c_x, z_x)) - z_x|."""
    return _domain_l1(recovered, original, "prior reconstruction")


def adversarial_loss(dR_fake, dR_real, dS_fake, dS_real) -> float:
    """
    mean log(1 - D_R(fake)) + mean log D_R(real) + the same for D_S.
    Scores are clamped to [SCORE_CLAMP, 1 - SCORE_CLAMP].
    """
    def clamp(a):
        return np.clip(np.asarray(a, dtype=np.float64), SCORE_CLAMP, 1.0 - SCORE_CLAMP)

    rf, rr, sf, sr = clamp(dR_fake), clamp(dR_real), clamp(dS_fake), clamp(dS_real)
    return float(np.mean(np.log1p(-rf)) + np.mean(np.log(rr)) + np.mean(np.log1p(-sf)) + np.mean(np.log(sr)))


def bundle_parts(bundle: LatentBundle) -> LossParts:
    """Network terms a LatentBundle can score on its own: adv, cnt, kl and pri."""
    kl = pri = adv = 0.0
    if bundle.logp_R is not None:
        kl = kl_loss(bundle.logp_R, bundle.logq_R, bundle.logp_S, bundle.logq_S)
    if bundle.z is not None:
        pri = prior_recon_loss(bundle.z_recovered, bundle.z)
    if bundle.dR_fake is not None:
        adv = adversarial_loss(bundle.dR_fake, bundle.dR_real, bundle.dS_fake, bundle.dS_real)
    return LossParts(adv=adv, cnt=content_loss(bundle), kl=kl, pri=pri)


def total_objective(parts: LossParts, w: LossWeights = LossWeights()) -> float:
    """adv + lambda1 cnt + lambda2 KL + ... + lambda7 int."""
    values = np.array([parts.cnt, parts.kl, parts.img, parts.pri, parts.phy, parts.smooth, parts.intensity])
    if not (np.all(np.isfinite(values)) and np.isfinite(parts.adv)):
        raise ValidationError(f"loss parts must be finite, got {parts}")
    return float(parts.adv + values @ np.array(astuple(w)))


def main():
    """Print a worked example on a tiny synthetic decomposition."""
    rng = np.random.default_rng(0)
    albedo = rng.uniform(0.2, 0.8, size=(4, 4, 3))
    shade = rng.uniform(0.3, 1.0, size=(4, 4))
    image = albedo * shade[..., None]
    lidar = rgb_to_gray(albedo)
    mask = np.ones((4, 4), dtype=bool)

    parts = LossParts(
        phy=physical_loss(image, albedo, shade),
        smooth=smooth_loss(albedo, image),
        intensity=intensity_consistency_loss(image, albedo, shade, lidar, mask),
    )
    print("=== Loss terms on an exact decomposition ===")
    for name, value in vars(parts).items():
        print(f"  {name:10s} {value:.6f}")
    print(f"  total      {total_objective(parts):.6f}")


if __name__ == "__main__":
    main()
