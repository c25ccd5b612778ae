"""
Annotation pairs: sampling, aggregation, simulation and file I/O.

Sampling follows the human-judgement protocol:
    Poisson-disk points -> drop saturated / near-edge points -> Delaunay edges

Each edge becomes a question "do these two points have the same albedo, and
if not, which is darker?". Five answers per pair are aggregated into a
judgement J in {E, D, L} with a confidence weight w.

Orientation: D means the first endpoint is darker, L means the first endpoint
is lighter (the second is darker).

Usage:
    python annotation_handler.py --image scene.png --seed 0 --mode sparse
"""

import argparse
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from iid_errors import AnnotationFormatError, DegenerateGeometry, MissingFileError, ValidationError
from imagecore import ImageLike, rgb_array, rgb_to_gray

logger = logging.getLogger(__name__)

JUDGEMENTS = ('E', 'D', 'L')
CONFIDENCE = {'definitely': 1.0, 'probably': 0.8, 'guessing': 0.3}
RADIUS_FRACTION = {'sparse': 0.07, 'dense': 0.03}
SIZE_MODES = ('min_side', 'sum_sides')
ANSWERS_PER_PAIR = 5
BRIDSON_ATTEMPTS = 30
LUM_FLOOR = 1e-6

Point = Tuple[float, float]
Pixel = Tuple[int, int]


@dataclass(frozen=True)
class AnnotationPair:
    """Two pixel sites (x, y), aggregated judgement and its weight."""

    p1: Pixel
    p2: Pixel
    judgement: str
    weight: float = 1.0
    image_id: str = ""

    def __post_init__(self):
        for name in ('p1', 'p2'):
            point = getattr(self, name)
            if len(point) != 2 or min(point) < 0:
                raise ValidationError(f"{name} must be a non-negative (x, y) pixel, got {point}")
            object.__setattr__(self, name, (int(point[0]), int(point[1])))
        if self.p1 == self.p2:
            raise ValidationError(f"pair endpoints coincide at {self.p1}")
        if self.judgement not in JUDGEMENTS:
            raise ValidationError(f"judgement must be one of {JUDGEMENTS}, got {self.judgement!r}")
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise ValidationError(f"weight must be > 0, got {self.weight}")

    def check_bounds(self, width: int, height: int) -> None:
        for point in (self.p1, self.p2):
            if point[0] >= width or point[1] >= height:
                raise ValidationError(f"point {point} outside {width}x{height} image")

    def to_record(self) -> Dict:
        return {'image_id': self.image_id, 'p1': list(self.p1), 'p2': list(self.p2),
                'J': self.judgement, 'w': self.weight}


@dataclass(frozen=True)
class AnnotatorAnswer:
    """
    One annotator's answers for one pair.

    same_albedo: +1 yes, -1 no
    first_darker: +1 first point darker, -1 second darker, 0 not asked
    confidence: 1.0 definitely, 0.8 probably, 0.3 guessing
    """

    same_albedo: int
    first_darker: int
    confidence: float

    def __post_init__(self):
        if self.same_albedo not in (1, -1):
            raise ValidationError(f"same_albedo must be +1 or -1, got {self.same_albedo}")
        if self.first_darker not in (1, -1, 0):
            raise ValidationError(f"first_darker must be +1, -1 or 0, got {self.first_darker}")
        if self.confidence not in CONFIDENCE.values():
            raise ValidationError(f"confidence must be one of {sorted(CONFIDENCE.values())}, got {self.confidence}")


@dataclass(frozen=True)
class AnnotationConfig:
    """
    Sampling density and the saturation/edge filter thresholds.

    edge_threshold is in luminance per pixel: the Sobel response of F(I) is
    divided by 8, the sum of the absolute kernel weights, so a ramp of slope g
    reads g and a unit step reads 0.5.
    """

    mode: str = 'sparse'
    size_mode: str = 'sum_sides'
    lum_lo: float = 0.02
    lum_hi: float = 0.98
    edge_threshold: float = 0.1
    edge_radius: int = 3

    def __post_init__(self):
        if self.mode not in RADIUS_FRACTION:
            raise ValidationError(f"mode must be one of {sorted(RADIUS_FRACTION)}, got {self.mode!r}")
        if self.size_mode not in SIZE_MODES:
            raise ValidationError(f"size_mode must be one of {SIZE_MODES}, got {self.size_mode!r}")
        if not 0.0 <= self.lum_lo < self.lum_hi <= 1.0:
            raise ValidationError(f"need 0 <= lum_lo < lum_hi <= 1, got {self.lum_lo}, {self.lum_hi}")
        if self.edge_threshold < 0 or self.edge_radius < 0:
            raise ValidationError("edge_threshold and edge_radius must be non-negative")

    @property
    def r_frac(self) -> float:
        return RADIUS_FRACTION[self.mode]


def image_size(width: int, height: int, size_mode: str = 'min_side') -> float:
    if size_mode == 'min_side':
        return float(min(width, height))
    if size_mode == 'sum_sides':
        return float(width + height)
    raise ValidationError(f"size_mode must be one of {SIZE_MODES}, got {size_mode!r}")


def poisson_disk(width: int, height: int, r_frac: float, seed: int,
                 size_mode: str = 'min_side') -> List[Point]:
    """
    Bridson dart throwing over [0, width) x [0, height).

    Args:
        width, height: Image size in pixels
        r_frac: Minimum distance as a fraction of the image size
        seed: RNG seed
        size_mode: 'min_side' or 'sum_sides' reading of image size

    Returns:
        Points (x, y) with all pairwise distances >= r_frac * size
    """
    if not 0.0 < r_frac < 0.5:
        raise ValidationError(f"r_frac must lie in (0, 0.5), got {r_frac}")
    if width < 1 or height < 1:
        raise ValidationError(f"image must be non-empty, got {width}x{height}")
    radius = r_frac * image_size(width, height, size_mode)
    rng = np.random.default_rng(seed)

    cell = radius / math.sqrt(2.0)
    cols, rows = int(math.ceil(width / cell)), int(math.ceil(height / cell))
    grid = -np.ones((rows, cols), dtype=int)
    points: List[Point] = []

    def cell_of(p: Point) -> Tuple[int, int]:
        return int(p[1] // cell), int(p[0] // cell)

    def fits(p: Point) -> bool:
        if not (0.0 <= p[0] < width and 0.0 <= p[1] < height):
            return False
        row, col = cell_of(p)
        for r in range(max(row - 2, 0), min(row + 3, rows)):
            for c in range(max(col - 2, 0), min(col + 3, cols)):
                k = grid[r, c]
                if k >= 0 and math.hypot(points[k][0] - p[0], points[k][1] - p[1]) < radius:
                    return False
        return True

    def insert(p: Point) -> None:
        grid[cell_of(p)] = len(points)
        points.append(p)

    insert((float(rng.uniform(0, width)), float(rng.uniform(0, height))))
    active = [0]
    while active:
        slot = int(rng.integers(len(active)))
        base = points[active[slot]]
        for _ in range(BRIDSON_ATTEMPTS):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(radius, 2.0 * radius)
            candidate = (base[0] + dist * math.cos(angle), base[1] + dist * math.sin(angle))
            if fits(candidate):
                insert(candidate)
                active.append(len(points) - 1)
                break
        else:
            active.pop(slot)
    return points


def to_pixel(point: Point, width: int, height: int) -> Pixel:
    return min(int(point[0]), width - 1), min(int(point[1]), height - 1)


def edge_map(img: ImageLike, threshold: float = 0.1, radius: int = 3) -> np.ndarray:
    """Pixels within radius of a Sobel edge of F(I) (magnitude / 8 above threshold)."""
    lum = rgb_to_gray(rgb_array(img))
    magnitude = np.hypot(ndimage.sobel(lum, axis=1), ndimage.sobel(lum, axis=0)) / 8.0
    edges = magnitude > threshold
    if radius > 0 and edges.any():
        yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        edges = ndimage.binary_dilation(edges, structure=(xx * xx + yy * yy) <= radius * radius)
    return edges


def filter_points(points: Sequence[Point], img: ImageLike, cfg: AnnotationConfig = AnnotationConfig()) -> List[Point]:
    """Drop under-/over-saturated points and points near image edges; order preserved."""
    rgb = rgb_array(img)
    height, width = rgb.shape[:2]
    lum = rgb_to_gray(rgb)
    near_edge = edge_map(rgb, cfg.edge_threshold, cfg.edge_radius)
    kept = []
    for point in points:
        x, y = to_pixel(point, width, height)
        if cfg.lum_lo <= lum[y, x] <= cfg.lum_hi and not near_edge[y, x]:
            kept.append(point)
    logger.debug(f"[Annotate] filter kept {len(kept)}/{len(points)} points")
    return kept


def _circumcircle(a, b, c) -> Tuple[float, float, float]:
    d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    if d == 0.0:
        return 0.0, 0.0, math.inf
    a2, b2, c2 = a[0] ** 2 + a[1] ** 2, b[0] ** 2 + b[1] ** 2, c[0] ** 2 + c[1] ** 2
    ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d
    uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d
    return ux, uy, (a[0] - ux) ** 2 + (a[1] - uy) ** 2


def _is_collinear(pts: np.ndarray) -> bool:
    centered = pts - pts.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    return singular[-1] <= 1e-9 * max(singular[0], 1.0)


def _path_pairs(pts: np.ndarray) -> List[Tuple[int, int]]:
    """Consecutive links along the main direction of (near-)collinear points."""
    centered = pts - pts.mean(axis=0)
    direction = np.linalg.svd(centered)[2][0]
    order = np.argsort(centered @ direction, kind='stable')
    return sorted(tuple(sorted((int(i), int(j)))) for i, j in zip(order[:-1], order[1:]))


def delaunay_triangles(points: Sequence[Point]) -> List[Tuple[int, int, int]]:
    """
    Bowyer-Watson triangulation.

    Returns:
        Triangles as sorted index triples; empty for fewer than 3 or collinear points
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 3 or _is_collinear(pts):
        return []

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    span = 100.0 * max(float(np.max(hi - lo)), 1.0)
    vertices = [tuple(p) for p in pts] + [
        (center[0] - 2.0 * span, center[1] - span),
        (center[0] + 2.0 * span, center[1] - span),
        (center[0], center[1] + 2.0 * span),
    ]
    triangles = {(n, n + 1, n + 2): _circumcircle(*vertices[n:n + 3])}

    for k in range(n):
        px, py = vertices[k]
        bad = [tri for tri, (cx, cy, r2) in triangles.items()
               if (px - cx) ** 2 + (py - cy) ** 2 < r2 * (1.0 + 1e-12)]
        edge_count: Dict[Tuple[int, int], int] = {}
        for tri in bad:
            for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[0], tri[2])):
                edge_count[e] = edge_count.get(e, 0) + 1
            del triangles[tri]
        for (i, j), count in edge_count.items():
            if count == 1:
                tri = tuple(sorted((i, j, k)))
                triangles[tri] = _circumcircle(*(vertices[v] for v in tri))

    return sorted(tri for tri in triangles if max(tri) < n)


def delaunay_pairs(points: Sequence[Point]) -> List[Tuple[int, int]]:
    """Undirected Delaunay edges (i < j), each once; a path for collinear input."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise DegenerateGeometry(f"need at least 2 points to build pairs, got {len(pts)}")
    triangles = delaunay_triangles(pts)
    if not triangles:
        return _path_pairs(pts)
    edges = set()
    for a, b, c in triangles:
        edges.update({(a, b), (b, c), (a, c)})
    return sorted(edges)


def aggregate(answers: Sequence[AnnotatorAnswer]) -> Tuple[str, float]:
    """
    Combine five answers into (J, w).

    A1 = sum(same_albedo * confidence), A2 = sum(first_darker * confidence);
    E with A1 if A1 > 0, else D with A2 if A2 > 0, else L with -A2.
    """
    if len(answers) != ANSWERS_PER_PAIR:
        raise ValidationError(f"need exactly {ANSWERS_PER_PAIR} answers, got {len(answers)}")
    a1 = sum(a.same_albedo * a.confidence for a in answers)
    a2 = sum(a.first_darker * a.confidence for a in answers)
    if a1 > 0:
        return 'E', a1
    if a2 > 0:
        return 'D', a2
    return 'L', -a2


def aggregate_pairs(pairs: Sequence[Tuple[Pixel, Pixel]], answer_sets: Sequence[Sequence[AnnotatorAnswer]],
                    image_id: str = "") -> Tuple[List[AnnotationPair], int]:
    """Aggregate every pair; zero-weight results are dropped and counted."""
    if len(pairs) != len(answer_sets):
        raise ValidationError(f"{len(pairs)} pairs but {len(answer_sets)} answer sets")
    kept, dropped = [], 0
    for (p1, p2), answers in zip(pairs, answer_sets):
        judgement, weight = aggregate(answers)
        if weight <= 0:
            dropped += 1
            continue
        kept.append(AnnotationPair(p1, p2, judgement, weight, image_id))
    if dropped:
        logger.info(f"[Annotate] Dropped {dropped} zero-weight pair(s)")
    return kept, dropped


def judge_luminances(lum1: float, lum2: float, delta: float) -> str:
    """Ratio rule: D if lum2/lum1 > 1 + delta, L if lum1/lum2 > 1 + delta, else E."""
    if not delta > 0:
        raise ValidationError(f"delta must be > 0, got {delta}")
    l1, l2 = max(lum1, LUM_FLOOR), max(lum2, LUM_FLOOR)
    if l2 / l1 > 1.0 + delta:
        return 'D'
    if l1 / l2 > 1.0 + delta:
        return 'L'
    return 'E'


def simulate_judgements(gt_albedo: ImageLike, pairs: Iterable[Tuple[int, int]], points: Sequence[Point],
                        delta: float = 0.1, image_id: str = "") -> List[AnnotationPair]:
    """Oracle annotator: judge each pair on ground-truth albedo luminance with weight 1."""
    rgb = rgb_array(gt_albedo)
    height, width = rgb.shape[:2]
    lum = rgb_to_gray(rgb)
    out = []
    for i, j in pairs:
        p1, p2 = to_pixel(points[i], width, height), to_pixel(points[j], width, height)
        if p1 == p2:
            continue
        judgement = judge_luminances(lum[p1[1], p1[0]], lum[p2[1], p2[0]], delta)
        out.append(AnnotationPair(p1, p2, judgement, 1.0, image_id))
    return out


def sample_annotation_pairs(img: ImageLike, seed: int,
                            cfg: AnnotationConfig = AnnotationConfig()) -> Tuple[List[Point], List[Tuple[int, int]]]:
    """Poisson-disk sampling, filtering, then Delaunay edges over the surviving points."""
    rgb = rgb_array(img)
    height, width = rgb.shape[:2]
    raw = poisson_disk(width, height, cfg.r_frac, seed, cfg.size_mode)
    points = filter_points(raw, rgb, cfg)
    if len(points) < 2:
        logger.warning(f"[Annotate] Only {len(points)} of {len(raw)} points survived filtering; no pairs")
        return points, []
    pairs = delaunay_pairs(points)
    logger.info(f"[Annotate] {cfg.mode}: {len(raw)} points, {len(points)} kept, {len(pairs)} pairs")
    return points, pairs


def _parse_pixel(value) -> Pixel:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValueError(f"expected [x, y], got {value!r}")
    coords = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or float(v) != int(v):
            raise ValueError(f"pixel coordinates must be integers, got {value!r}")
        coords.append(int(v))
    return coords[0], coords[1]


def load_annotations(path: str, field_map: Optional[Dict[str, str]] = None,
                     judgement_map: Optional[Dict[str, str]] = None,
                     width: Optional[int] = None, height: Optional[int] = None) -> List[AnnotationPair]:
    """
    Load JSON-lines annotations.

    Args:
        path: File with one {image_id, p1, p2, J, w} object per line
        field_map: Canonical field name -> name used in the file
        judgement_map: Judgement value in the file -> E/D/L
        width, height: Optional image size for bounds checking

    Returns:
        List of AnnotationPair

    Raises:
        AnnotationFormatError listing every malformed line
    """
    if not os.path.exists(path):
        raise MissingFileError(f"annotation file not found: {path}")
    names = {key: key for key in ('image_id', 'p1', 'p2', 'J', 'w')}
    names.update(field_map or {})

    pairs, problems = [], []
    with open(path, 'rb') as f:
        for number, raw in enumerate(f, start=1):
            try:
                line = raw.decode('utf-8')
                if not line.strip():
                    continue
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("expected a JSON object")
                judgement = record[names['J']]
                if judgement_map:
                    judgement = judgement_map.get(str(judgement), judgement)
                pair = AnnotationPair(
                    p1=_parse_pixel(record[names['p1']]),
                    p2=_parse_pixel(record[names['p2']]),
                    judgement=judgement,
                    weight=float(record.get(names['w'], 1.0)),
                    image_id=str(record.get(names['image_id'], "")),
                )
                if width is not None and height is not None:
                    pair.check_bounds(width, height)
                pairs.append(pair)
            except KeyError as e:
                problems.append((number, f"missing field {e}"))
            except (ValueError, TypeError) as e:
                problems.append((number, str(e)))
    if problems:
        raise AnnotationFormatError(problems, path)
    return pairs


def save_annotations(path: str, pairs: Iterable[AnnotationPair]) -> int:
    """Write pairs as JSON lines; returns the number written."""
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_record()) + '\n')
            count += 1
    return count


def main():
    """Sample annotation pairs on an image and print their count."""
    from dataset_handler import read_image

    parser = argparse.ArgumentParser(description='Sample annotation pairs on an image')
    parser.add_argument('--image', required=True, help='sRGB PNG')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--mode', choices=sorted(RADIUS_FRACTION), default='sparse')
    args = parser.parse_args()

    img = read_image(args.image)
    points, pairs = sample_annotation_pairs(img, args.seed, AnnotationConfig(mode=args.mode))
    print(f"{len(points)} points, {len(pairs)} pairs")


if __name__ == "__main__":
    main()
