"""
Synthetic scenes with known albedo and shade.

Albedo is a seeded Voronoi partition with one colour per region, shade is a
smooth field built from three low-frequency cosines (optionally darkened by a
half-plane cast shadow), and LiDAR intensity is the albedo luminance with
multiplicative noise on a random subset of pixels. LiDAR never sees the shade.
"""

import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from annotation_handler import AnnotationPair, save_annotations
from dataset_handler import Sample, write_image, write_lidar_png, write_manifest, write_png
from densify import SparseIntensity
from iid_errors import ValidationError
from imagecore import GammaConfig, GrayMap, LinearImage, rgb_to_gray

logger = logging.getLogger(__name__)

SHADOW_FACTOR = 0.35
SHADE_RANGE = (0.2, 1.0)
ALBEDO_RANGE = (0.1, 0.9)
N_BUMPS = 3


@dataclass(frozen=True)
class SynthConfig:
    n_regions: int = 8
    shade_smoothness: float = 1.0
    shadow: bool = False
    noise_sigma: float = 0.02
    lidar_density: float = 0.3

    def __post_init__(self):
        if self.n_regions < 1:
            raise ValidationError(f"n_regions must be >= 1, got {self.n_regions}")
        if not self.shade_smoothness > 0:
            raise ValidationError(f"shade_smoothness must be > 0, got {self.shade_smoothness}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 < self.lidar_density <= 1.0:
            raise ValidationError(f"lidar_density must lie in (0, 1], got {self.lidar_density}")


@dataclass(frozen=True, eq=False)
class SynthScene:
    """Image, ground truth and LiDAR of one generated scene."""

    image: LinearImage
    albedo: LinearImage
    shade: GrayMap
    lidar: SparseIntensity
    seed: int
    shadow_mask: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.image.shape


def _albedo(rng: np.random.Generator, width: int, height: int, n_regions: int) -> np.ndarray:
    sites = rng.uniform((0.0, 0.0), (width, height), size=(n_regions, 2))
    colors = rng.uniform(*ALBEDO_RANGE, size=(n_regions, 3))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dist2 = (xs[..., None] - sites[:, 0]) ** 2 + (ys[..., None] - sites[:, 1]) ** 2
    return colors[np.argmin(dist2, axis=-1)]


def _shade(rng: np.random.Generator, width: int, height: int, smoothness: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    xs /= max(width - 1, 1)
    ys /= max(height - 1, 1)
    field = np.zeros((height, width))
    for _ in range(N_BUMPS):
        amplitude = rng.uniform(0.5, 1.0)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        frequency = rng.uniform(0.5, 1.5) / smoothness
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += amplitude * np.cos(2.0 * np.pi * frequency * (np.cos(angle) * xs + np.sin(angle) * ys) + phase)
    lo, hi = SHADE_RANGE
    span = field.max() - field.min()
    if span == 0.0:
        return np.full((height, width), hi)
    return lo + (hi - lo) * (field - field.min()) / span


def _shadow_mask(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Half-plane through a point near the centre, random orientation."""
    cx = rng.uniform(0.35, 0.65) * width
    cy = rng.uniform(0.35, 0.65) * height
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle) > 0.0


def synth_scene(seed: int, width: int = 128, height: int = 128, cfg: SynthConfig = SynthConfig()) -> SynthScene:
    """
    Generate a scene; everything is drawn from one generator seeded with seed.

    Args:
        seed: RNG seed
        width, height: Size in pixels (>= 2)
        cfg: Scene options

    Returns:
        SynthScene with I = R* S* and L = F(R*) (1 + noise) on the LiDAR mask
    """
    if width < 2 or height < 2:
        raise ValidationError(f"scene must be at least 2x2, got {width}x{height}")
    rng = np.random.default_rng(seed)
    albedo = _albedo(rng, width, height, cfg.n_regions)
    shade = _shade(rng, width, height, cfg.shade_smoothness)
    shadow = None
    if cfg.shadow:
        shadow = _shadow_mask(rng, width, height)
        shade = np.where(shadow, SHADOW_FACTOR * shade, shade)

    image = np.clip(albedo * shade[..., None], 0.0, 1.0)
    mask = rng.random((height, width)) < cfg.lidar_density
    noise = rng.normal(0.0, cfg.noise_sigma, size=(height, width))
    intensity = np.clip(rgb_to_gray(albedo) * (1.0 + noise), 0.0, 1.0)

    logger.debug(f"[Synth] seed {seed}: {width}x{height}, {cfg.n_regions} regions, "
                 f"{int(mask.sum())} LiDAR pixels, shadow={cfg.shadow}")
    return SynthScene(
        image=LinearImage(image),
        albedo=LinearImage(albedo),
        shade=GrayMap(shade),
        lidar=SparseIntensity(np.where(mask, intensity, 0.0), mask.astype(np.uint8)),
        seed=seed,
        shadow_mask=shadow,
    )


def scene_fingerprint(scene: SynthScene) -> str:
    """sha256 over the scene arrays."""
    digest = hashlib.sha256()
    for arr in (scene.image.data, scene.albedo.data, scene.shade.data, scene.lidar.values, scene.lidar.mask):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def scene_id(seed: int) -> str:
    return f"scene_{seed:04d}"


def save_scene(scene: SynthScene, out_dir: str, sample_id: Optional[str] = None,
               gamma: GammaConfig = GammaConfig()) -> Sample:
    """
    Write a scene as 16-bit PNGs and return its manifest entry.

    Files: <id>_image.png (gamma-encoded), <id>_albedo.png (gamma-encoded),
    <id>_shade.png (linear), <id>_lidar.png + <id>_lidar_mask.png, and
    <id>_shadow.png when the scene has a cast shadow.
    """
    sample_id = sample_id or scene_id(scene.seed)
    os.makedirs(out_dir, exist_ok=True)
    names = {key: f"{sample_id}_{key}.png" for key in ('image', 'albedo', 'shade', 'lidar', 'lidar_mask', 'shadow')}

    def path(key):
        return os.path.join(out_dir, names[key])

    write_image(path('image'), scene.image, gamma)
    write_image(path('albedo'), scene.albedo, gamma)
    write_png(path('shade'), scene.shade.data, 16)
    write_lidar_png(path('lidar'), path('lidar_mask'), scene.lidar)
    if scene.shadow_mask is not None:
        write_png(path('shadow'), scene.shadow_mask.astype(np.float64), 8)
    return Sample(id=sample_id, image=names['image'], lidar=names['lidar'],
                  lidar_mask=names['lidar_mask'], albedo=names['albedo'])


def save_scenes(scenes, out_dir: str, gamma: GammaConfig = GammaConfig(),
                annotations: Optional[Sequence[Sequence[AnnotationPair]]] = None) -> str:
    """
    Save several scenes and a manifest.json next to them.

    Args:
        scenes: SynthScenes to write
        out_dir: Target directory
        gamma: Encoding of the image and albedo PNGs
        annotations: Optional judged pairs per scene, written as <id>_pairs.jsonl

    Returns:
        Path of the manifest
    """
    if annotations is not None and len(annotations) != len(scenes):
        raise ValidationError(f"{len(annotations)} annotation lists for {len(scenes)} scenes")
    samples = []
    for index, scene in enumerate(scenes):
        sample = save_scene(scene, out_dir, gamma=gamma)
        if annotations is not None:
            sample.annotations = f"{sample.id}_pairs.jsonl"
            save_annotations(os.path.join(out_dir, sample.annotations), annotations[index])
        samples.append(sample)
    manifest = os.path.join(out_dir, 'manifest.json')
    write_manifest(manifest, samples)
    logger.info(f"[Synth] Wrote {len(samples)} scene(s) to {out_dir}")
    return manifest
