"""
Dataset I/O for the LiDAR intrinsic-decomposition toolkit.

This module handles everything that touches files or the network:
- PNG images (8/16-bit, gray or RGB) via OpenCV
- sparse LiDAR intensity as 16-bit PNG + mask PNG, or CSV rows "u,v,intensity"
- manifests (JSON array of samples, paths relative to the manifest)
- availability check of the released dataset URL
"""

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np
import requests

from annotation_handler import AnnotationPair, load_annotations
from densify import SparseIntensity
from iid_errors import (CoordinateRangeError, DatasetError, MalformedRowError, MissingFileError,
                        ShapeMismatch, ValidationError)
from imagecore import GammaConfig, ImageLike, LinearImage, apply_gamma, inverse_gamma
from pipeline_config import config

logger = logging.getLogger(__name__)

PNG_PARAMS = [cv2.IMWRITE_PNG_COMPRESSION, 3]
CSV_HEADER = ['u', 'v', 'intensity']
DTYPE_SCALE = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}


@dataclass
class Sample:
    """One manifest entry; paths are relative to the manifest directory."""

    id: str
    image: str
    lidar: str
    lidar_mask: Optional[str] = None
    annotations: Optional[str] = None
    albedo: Optional[str] = None
    intensity_divisor: float = 1.0

    def resolve(self, base_dir: str) -> 'Sample':
        def full(path):
            return path if path is None or os.path.isabs(path) else os.path.join(base_dir, path)

        return Sample(self.id, full(self.image), full(self.lidar), full(self.lidar_mask),
                      full(self.annotations), full(self.albedo), self.intensity_divisor)


def _require(path: str) -> None:
    if not path or not os.path.exists(path):
        raise MissingFileError(f"file not found: {path}")


def read_png(path: str) -> np.ndarray:
    """Read an 8/16-bit PNG as float64 in [0, 1]; colour comes back as RGB."""
    _require(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"could not decode image: {path}")
    scale = DTYPE_SCALE.get(raw.dtype)
    if scale is None:
        raise DatasetError(f"unsupported pixel type {raw.dtype} in {path}")
    arr = raw.astype(np.float64) / scale
    if arr.ndim == 3:
        arr = arr[..., :3][..., ::-1]
    return np.ascontiguousarray(arr)


def write_png(path: str, values: np.ndarray, bit_depth: int = 16) -> None:
    """Quantize [0, 1] values to an 8/16-bit PNG (RGB input is stored as BGR)."""
    if bit_depth not in (8, 16):
        raise ValidationError(f"bit_depth must be 8 or 16, got {bit_depth}")
    dtype = np.uint16 if bit_depth == 16 else np.uint8
    scale = DTYPE_SCALE[np.dtype(dtype)]
    arr = np.asarray(values, dtype=np.float64)
    quantized = np.round(np.clip(arr, 0.0, 1.0) * scale).astype(dtype)
    if quantized.ndim == 3:
        quantized = np.ascontiguousarray(quantized[..., ::-1])
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if not cv2.imwrite(path, quantized, PNG_PARAMS):
        raise DatasetError(f"could not write image: {path}")


def read_image(path: str, gamma: GammaConfig = GammaConfig()) -> LinearImage:
    """Decode an sRGB-encoded PNG and linearize it."""
    arr = read_png(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return inverse_gamma(arr, gamma)


def write_image(path: str, img: ImageLike, gamma: GammaConfig = GammaConfig(), bit_depth: int = 16) -> None:
    """Gamma-encode a linear image (or gray map) and write it as PNG."""
    write_png(path, apply_gamma(img, gamma), bit_depth)


def read_lidar_png(values_path: str, mask_path: Optional[str] = None, divisor: float = 1.0) -> SparseIntensity:
    """16-bit gray intensity PNG plus an 8-bit mask PNG (nonzero = observed)."""
    values = read_png(values_path)
    if values.ndim != 2:
        raise DatasetError(f"LiDAR intensity must be single-channel: {values_path}")
    if mask_path:
        mask = read_png(mask_path)
        if mask.ndim != 2:
            raise DatasetError(f"LiDAR mask must be single-channel: {mask_path}")
        if mask.shape != values.shape:
            raise ShapeMismatch(f"mask {mask.shape} and intensity {values.shape} differ")
        mask = mask > 0
    else:
        mask = values > 0
    return SparseIntensity(np.where(mask, values / divisor, 0.0), mask.astype(np.uint8))


def write_lidar_png(values_path: str, mask_path: str, sparse: SparseIntensity) -> None:
    write_png(values_path, sparse.values, 16)
    write_png(mask_path, sparse.mask.astype(np.float64), 8)


def read_lidar_csv(path: str, width: int, height: int, divisor: float = 1.0) -> SparseIntensity:
    """
    Load CSV rows "u,v,intensity" into a SparseIntensity.

    Args:
        path: CSV file with header u,v,intensity
        width, height: Image size the coordinates must fall into
        divisor: Raw intensity is divided by this to land in [0, 1]

    Returns:
        SparseIntensity (possibly with an empty mask)
    """
    _require(path)
    if not divisor > 0:
        raise ValidationError(f"intensity divisor must be > 0, got {divisor}")
    values = np.zeros((height, width))
    mask = np.zeros((height, width), dtype=np.uint8)
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise MalformedRowError(f"expected header {','.join(CSV_HEADER)}, got {header}", 0, path)
        for row_number, row in enumerate(reader, start=1):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise MalformedRowError(f"expected 3 fields, got {len(row)}", row_number, path)
            try:
                u, v = int(row[0]), int(row[1])
                intensity = float(row[2]) / divisor
            except ValueError as e:
                raise MalformedRowError(str(e), row_number, path) from e
            if not (0 <= u < width and 0 <= v < height):
                raise CoordinateRangeError(f"({u}, {v}) outside {width}x{height} image", row_number, path)
            if not (np.isfinite(intensity) and 0.0 <= intensity <= 1.0):
                raise MalformedRowError(f"intensity {row[2]} not in [0, {divisor}]", row_number, path)
            values[v, u] = intensity
            mask[v, u] = 1
    return SparseIntensity(values, mask)


def write_lidar_csv(path: str, sparse: SparseIntensity) -> int:
    """Write observed pixels in row-major order; returns the row count."""
    vs, us = np.nonzero(sparse.mask)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for u, v in zip(us, vs):
            writer.writerow([int(u), int(v), repr(float(sparse.values[v, u]))])
    return len(us)


def read_lidar(path: str, shape: Tuple[int, int], mask_path: Optional[str] = None,
               divisor: float = 1.0) -> SparseIntensity:
    """Dispatch on extension: .csv rows or PNG intensity (+ mask)."""
    height, width = shape
    if path.lower().endswith('.csv'):
        sparse = read_lidar_csv(path, width, height, divisor)
    else:
        sparse = read_lidar_png(path, mask_path, divisor)
    if sparse.shape != (height, width):
        raise ShapeMismatch(f"LiDAR {sparse.shape} does not match image {(height, width)}")
    return sparse


def load_manifest(path: str) -> List[Sample]:
    """Read a manifest and resolve its paths against the manifest directory."""
    _require(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            records = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(records, list):
        raise DatasetError("manifest must be a JSON array of samples")
    if not records:
        raise ValidationError(f"manifest {path} lists no samples")

    base_dir = os.path.dirname(os.path.abspath(path))
    samples, seen = [], set()
    for index, record in enumerate(records):
        try:
            sample = Sample(**record)
        except TypeError as e:
            raise DatasetError(f"manifest entry {index}: {e}") from e
        if sample.id in seen:
            raise DatasetError(f"duplicate sample id {sample.id!r}")
        seen.add(sample.id)
        samples.append(sample.resolve(base_dir))
    return samples


def write_manifest(path: str, samples: List[Sample]) -> None:
    records = [{k: v for k, v in asdict(s).items() if v is not None} for s in samples]
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(records, f, indent=2)
        f.write('\n')


def load_sample(sample: Sample, gamma: GammaConfig = GammaConfig(),
                field_map: Optional[Dict[str, str]] = None,
                judgement_map: Optional[Dict[str, str]] = None
                ) -> Tuple[LinearImage, SparseIntensity, Optional[List[AnnotationPair]]]:
    """
    Load one sample.

    Returns:
        (linear image, sparse intensity, annotations or None)
    """
    image = read_image(sample.image, gamma)
    lidar = read_lidar(sample.lidar, image.shape, sample.lidar_mask, sample.intensity_divisor)
    annotations = None
    if sample.annotations:
        annotations = load_annotations(sample.annotations, field_map, judgement_map,
                                       width=image.width, height=image.height)
    logger.debug(f"[Dataset] Loaded {sample.id}: {image.width}x{image.height}, "
                 f"{lidar.observed_count} LiDAR pixels")
    return image, lidar, annotations


class DatasetHandler:
    """Availability check for the released dataset."""

    def __init__(self, url: str = None, retries: int = None, timeout: int = None):
        """
        Args:
            url: Dataset landing page or archive URL
            retries: Attempts before giving up
            timeout: Per-request timeout in seconds
        """
        self.url = url or config.DATASET_URL
        self.retries = retries or config.HTTP_RETRIES
        self.timeout = timeout or config.HTTP_TIMEOUT
        if not self.url:
            raise ValidationError("IID_DATASET_URL is not configured")

    def _make_request(self, method: str) -> Optional[int]:
        """Status code of a request with exponential backoff; None after the last failure."""
        for attempt in range(self.retries):
            try:
                # Only the status is read; stream=True leaves the body unfetched
                with requests.request(method, self.url, timeout=self.timeout, allow_redirects=True,
                                      stream=True) as response:
                    status = response.status_code
                if status < 400:
                    return status
                # Retrying cannot fix these
                if status in (404, 405, 410):
                    logger.warning(f"[Dataset] {method} {self.url} answered {status}")
                    return status
                logger.warning(f"[Dataset] {method} failed with status {status}")
            except requests.exceptions.Timeout:
                logger.warning(f"[Dataset] Request timeout (attempt {attempt + 1}/{self.retries})")
            except requests.exceptions.RequestException as e:
                logger.warning(f"[Dataset] Request error (attempt {attempt + 1}/{self.retries}): {e}")

            if attempt < self.retries - 1:
                wait_time = 2 ** attempt
                logger.info(f"[Dataset] Retrying in {wait_time} seconds...")
                time.sleep(wait_time)
        return None

    def is_available(self) -> bool:
        status = self._make_request('HEAD')
        if status == 405:
            status = self._make_request('GET')
        available = status is not None and status < 400
        logger.info(f"[Dataset] {self.url} {'available' if available else 'unavailable'}")
        return available


def check_dataset_url(url: str = None, retries: int = None, timeout: int = None) -> bool:
    """True if the dataset URL answers with a non-error status."""
    return DatasetHandler(url, retries, timeout).is_available()
