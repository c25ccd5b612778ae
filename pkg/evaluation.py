"""
Scoring decompositions against pairwise albedo judgements.

- classify_pair / whdr / whdr_split: weighted human disagreement rate
- prf: weighted macro precision, recall and F-score
- balanced_subsample: equal class counts per judgement
- intensity_correlation: LiDAR intensity vs image luminance
"""

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from annotation_handler import JUDGEMENTS, AnnotationPair, judge_luminances
from densify import SparseIntensity
from iid_errors import DegenerateVariance, EmptyAnnotations, EmptyMask, MissingClass, ShapeMismatch, ValidationError
from imagecore import ImageLike, rgb_array, rgb_to_gray

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 64
PRF_DEFINITION = ("weighted per-class P_c = sum w[pred=c, J=c] / sum w[pred=c], "
                  "R_c = sum w[pred=c, J=c] / sum w[J=c]; macro average over classes present in J; "
                  "F = 2PR / (P + R)")


@dataclass
class EvalReport:
    """Scores of one method on one annotation set."""

    whdr: float
    precision: float
    recall: float
    f_score: float
    counts: Dict[str, int]
    delta: float
    method: str = ""
    dataset: str = ""
    whdr_equal: Optional[float] = None
    whdr_unequal: Optional[float] = None
    metadata: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


def _albedo_luminance(R: ImageLike) -> np.ndarray:
    return rgb_to_gray(rgb_array(R))


def _classify(lum: np.ndarray, pair: AnnotationPair, delta: float) -> str:
    height, width = lum.shape
    pair.check_bounds(width, height)
    (x1, y1), (x2, y2) = pair.p1, pair.p2
    return judge_luminances(lum[y1, x1], lum[y2, x2], delta)


def classify_pair(R: ImageLike, pair: AnnotationPair, delta: float = 0.1) -> str:
    """Predicted judgement of a pair from albedo luminance F(R)."""
    return _classify(_albedo_luminance(R), pair, delta)


def predict(R: ImageLike, annotations: Sequence[AnnotationPair], delta: float = 0.1) -> List[str]:
    lum = _albedo_luminance(R)
    return [_classify(lum, pair, delta) for pair in annotations]


def _check_weights(annotations: Sequence[AnnotationPair]) -> np.ndarray:
    weights = np.array([a.weight for a in annotations], dtype=np.float64)
    if weights.size == 0 or weights.sum() <= 0:
        raise EmptyAnnotations("no annotation with positive weight")
    return weights


def whdr(annotations: Sequence[AnnotationPair], R: ImageLike, delta: float = 0.1) -> float:
    """sum w * [J != prediction] / sum w."""
    weights = _check_weights(annotations)
    predicted = predict(R, annotations, delta)
    wrong = np.array([p != a.judgement for p, a in zip(predicted, annotations)])
    return float(weights[wrong].sum() / weights.sum())


def whdr_split(annotations: Sequence[AnnotationPair], R: ImageLike,
               delta: float = 0.1) -> Tuple[Optional[float], Optional[float]]:
    """WHDR over E pairs and over D/L pairs; None where a split is empty."""
    equal = [a for a in annotations if a.judgement == 'E']
    unequal = [a for a in annotations if a.judgement != 'E']
    return (whdr(equal, R, delta) if equal else None,
            whdr(unequal, R, delta) if unequal else None)


def prf(annotations: Sequence[AnnotationPair], R: ImageLike, delta: float = 0.1) -> Tuple[float, float, float]:
    """Weighted macro (precision, recall, F-score) over the classes present in J."""
    weights = _check_weights(annotations)
    truth = np.array([a.judgement for a in annotations])
    predicted = np.array(predict(R, annotations, delta))

    precisions, recalls = [], []
    for c in JUDGEMENTS:
        in_truth = truth == c
        if not in_truth.any():
            continue
        hit = weights[in_truth & (predicted == c)].sum()
        predicted_weight = weights[predicted == c].sum()
        precisions.append(hit / predicted_weight if predicted_weight > 0 else 0.0)
        recalls.append(hit / weights[in_truth].sum())
    precision, recall = float(np.mean(precisions)), float(np.mean(recalls))
    f_score = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, float(f_score)


def class_counts(annotations: Sequence[AnnotationPair]) -> Dict[str, int]:
    counts = Counter(a.judgement for a in annotations)
    return {c: counts.get(c, 0) for c in JUDGEMENTS}


def balanced_subsample(annotations: Sequence[AnnotationPair], seed: int) -> List[AnnotationPair]:
    """
    Keep min-class-count pairs of every class, drawn without replacement.

    Survivors keep their input order.
    """
    counts = class_counts(annotations)
    missing = [c for c, n in counts.items() if n == 0]
    if missing:
        raise MissingClass(f"class(es) {missing} absent; counts {counts}")
    m = min(counts.values())
    rng = np.random.default_rng(seed)
    keep = []
    for c in JUDGEMENTS:
        members = np.array([i for i, a in enumerate(annotations) if a.judgement == c])
        keep.extend(rng.choice(members, size=m, replace=False).tolist())
    return [annotations[i] for i in sorted(keep)]


def intensity_correlation(img: ImageLike, sparse: SparseIntensity) -> Tuple[float, np.ndarray]:
    """
    Pearson correlation of F(I) and L over the observed pixels.

    Returns:
        (coefficient, 64 x 64 joint histogram over [0, 1]^2, rows = F(I))
    """
    lum = rgb_to_gray(rgb_array(img))
    if lum.shape != sparse.shape:
        raise ShapeMismatch(f"image {lum.shape} and intensity {sparse.shape} differ")
    if sparse.observed_count < 2:
        raise EmptyMask(f"need at least 2 observed pixels, got {sparse.observed_count}")
    x, y = lum[sparse.mask], sparse.values[sparse.mask]
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise DegenerateVariance("luminance or intensity is constant on the mask")
    coefficient = float(np.corrcoef(x, y)[0, 1])
    histogram, _, _ = np.histogram2d(x, y, bins=HISTOGRAM_BINS, range=[[0.0, 1.0], [0.0, 1.0]])
    return coefficient, histogram


def evaluate(annotations: Sequence[AnnotationPair], R: ImageLike, delta: float = 0.1,
             method: str = "", dataset: str = "") -> EvalReport:
    """Full report: WHDR, split WHDR, PRF and class counts."""
    if not delta > 0:
        raise ValidationError(f"delta must be > 0, got {delta}")
    whdr_equal, whdr_unequal = whdr_split(annotations, R, delta)
    precision, recall, f_score = prf(annotations, R, delta)
    report = EvalReport(
        whdr=whdr(annotations, R, delta),
        precision=precision,
        recall=recall,
        f_score=f_score,
        counts=class_counts(annotations),
        delta=delta,
        method=method,
        dataset=dataset,
        whdr_equal=whdr_equal,
        whdr_unequal=whdr_unequal,
        metadata={'prf': PRF_DEFINITION},
    )
    logger.debug(f"[Eval] {method or '-'}: WHDR {report.whdr:.4f} on {len(annotations)} pairs")
    return report
