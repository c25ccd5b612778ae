"""
Experiment runner for the decomposition comparison and density ablation.

For every sample x seed x method x density it:
- thins the LiDAR mask to the requested density
- densifies it (ours) or passes the raw mask (ours_no_lid)
- decomposes the image (or runs a baseline)
- scores the albedo under the full and the balanced annotation protocol
- writes albedo/shade PNGs and a per-run JSON report

Failures of single runs are logged and collected; the batch carries on.
Run durations go to the metrics file, never into the reports.
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np

from annotation_handler import AnnotationConfig, AnnotationPair, sample_annotation_pairs, simulate_judgements
from dataset_handler import load_manifest, load_sample, read_image, write_image
from densify import DensifyParams, SparseIntensity, densify, subsample_mask
from evaluation import balanced_subsample, evaluate
from iid_errors import IIDError, MissingClass, ValidationError
from imagecore import GammaConfig, LinearImage, rgb_to_gray
from pipeline_config import PipelineConfig
from report_formatter import ReportFormatter, method_sort_key
from solver import Decomposition, SolverConfig, baseline_r, baseline_s, decompose, retinex, shadow_step
from synth_scene import SynthConfig, synth_scene

logger = logging.getLogger(__name__)

METHODS = ('ours', 'ours_no_lid', 'ours_no_int', 'baseline_r', 'baseline_s', 'retinex', 'color_retinex')
KEEP_RUNS = 30
SHADOW_BAND = 3


@dataclass(frozen=True)
class ExperimentConfig:
    """What to run and where to write it. Without a manifest, synthetic scenes are generated per seed."""

    out_dir: str
    manifest: Optional[str] = None
    methods: Tuple[str, ...] = METHODS
    densities: Tuple[float, ...] = (1.0, 0.5, 0.1, 0.01)
    delta: float = 0.1
    seeds: Tuple[int, ...] = (0,)
    jobs: int = 1
    balanced: bool = True
    size: int = 128
    retinex_threshold: float = 0.1
    color_threshold: float = 0.02
    save_images: bool = True
    metrics_path: Optional[str] = None
    gamma: GammaConfig = field(default_factory=GammaConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    densify: DensifyParams = field(default_factory=DensifyParams)
    synth: SynthConfig = field(default_factory=SynthConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)

    def __post_init__(self):
        object.__setattr__(self, 'methods', tuple(self.methods))
        object.__setattr__(self, 'densities', tuple(float(d) for d in self.densities))
        object.__setattr__(self, 'seeds', tuple(int(s) for s in self.seeds))
        if not self.methods:
            raise ValidationError("methods must not be empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValidationError(f"unknown method(s) {unknown}; choose from {', '.join(METHODS)}")
        if not self.densities or any(not 0.0 < d <= 1.0 for d in self.densities):
            raise ValidationError(f"densities must be non-empty and within (0, 1], got {self.densities}")
        if not self.seeds:
            raise ValidationError("seeds must not be empty")
        if not self.delta > 0:
            raise ValidationError(f"delta must be > 0, got {self.delta}")
        if self.jobs < 1:
            raise ValidationError(f"jobs must be >= 1, got {self.jobs}")
        if self.size < 2:
            raise ValidationError(f"size must be >= 2, got {self.size}")


@dataclass(frozen=True, eq=False)
class PreparedSample:
    """A loaded (or generated) sample with the annotations it is scored on."""

    id: str
    image: LinearImage
    lidar: SparseIntensity
    annotations: List[AnnotationPair]
    albedo: Optional[LinearImage] = None
    shadow_mask: Optional[np.ndarray] = None


@dataclass
class ExperimentResult:
    rows: List[Dict]
    runs: List[Dict]
    failures: List[Dict]
    report_path: str = ""
    table_path: str = ""

    @property
    def ok(self) -> bool:
        return not self.failures


@dataclass(frozen=True)
class RunRecord:
    """One experiment run as logged in the metrics file."""

    out_dir: str
    methods: Tuple[str, ...]
    densities: Tuple[float, ...]
    samples: int
    tasks: int
    completed: int
    failures: int
    duration: float
    error: Optional[str] = None

    @property
    def success(self) -> bool:
        return self.failures == 0


def run_method(method: str, image: LinearImage, lidar: SparseIntensity,
               cfg: ExperimentConfig) -> Decomposition:
    """Decompose one image with one method."""
    if method == 'baseline_r':
        return baseline_r(image)
    if method == 'baseline_s':
        return baseline_s(image)
    if method == 'retinex':
        return retinex(image, cfg.retinex_threshold)
    if method == 'color_retinex':
        return retinex(image, cfg.retinex_threshold, use_color=True, color_threshold=cfg.color_threshold)
    if method == 'ours_no_lid':
        return decompose(image, lidar.values, lidar.mask, cfg.solver)
    if method == 'ours_no_int':
        solver_cfg = replace(cfg.solver, weights=replace(cfg.solver.weights, lambda7=0.0))
        return decompose(image, lidar.values, lidar.mask, solver_cfg)
    if method == 'ours':
        dense = densify(image, lidar, cfg.densify)
        return decompose(image, dense.dense, np.ones(lidar.shape, dtype=bool), cfg.solver)
    raise ValidationError(f"unknown method {method!r}")


def simulated_annotations(image: LinearImage, albedo: LinearImage, seed: int, cfg: ExperimentConfig,
                          sample_id: str = "") -> List[AnnotationPair]:
    """Sample pairs on the image, judge them on ground-truth albedo."""
    points, pairs = sample_annotation_pairs(image, seed, cfg.annotation)
    return simulate_judgements(albedo, pairs, points, cfg.delta, sample_id)


def prepare_samples(cfg: ExperimentConfig) -> Tuple[List[Tuple[PreparedSample, Tuple[int, ...]]], List[Dict]]:
    """
    Samples paired with the seeds they run under.

    Synthetic scenes run under their own seed only; manifest samples run under
    every seed.
    """
    prepared, failures = [], []
    if cfg.manifest is None:
        for seed in cfg.seeds:
            scene = synth_scene(seed, cfg.size, cfg.size, cfg.synth)
            sample_id = f"scene_{seed:04d}"
            annotations = simulated_annotations(scene.image, scene.albedo, seed, cfg, sample_id)
            prepared.append((PreparedSample(sample_id, scene.image, scene.lidar, annotations,
                                            scene.albedo, scene.shadow_mask), (seed,)))
        return prepared, failures

    for sample in load_manifest(cfg.manifest):
        try:
            image, lidar, annotations = load_sample(sample, cfg.gamma)
            albedo = read_image(sample.albedo, cfg.gamma) if sample.albedo else None
            if annotations is None:
                if albedo is None:
                    raise ValidationError("sample has neither annotations nor a ground-truth albedo")
                annotations = simulated_annotations(image, albedo, cfg.seeds[0], cfg, sample.id)
            prepared.append((PreparedSample(sample.id, image, lidar, annotations, albedo), cfg.seeds))
        except IIDError as e:
            logger.error(f"[Experiment] Could not load sample {sample.id}: {e}")
            failures.append({"sample": sample.id, "stage": "load", "error": str(e)})
    return prepared, failures


def _score(sample: PreparedSample, decomposition: Decomposition, method: str, seed: int,
           cfg: ExperimentConfig) -> Dict[str, Optional[Dict]]:
    protocols: Dict[str, Optional[Dict]] = {
        "all": evaluate(sample.annotations, decomposition.albedo, cfg.delta, method, sample.id).to_dict()
    }
    if cfg.balanced:
        try:
            subset = balanced_subsample(sample.annotations, seed)
            protocols["balanced"] = evaluate(subset, decomposition.albedo, cfg.delta, method, sample.id).to_dict()
        except MissingClass as e:
            logger.warning(f"[Experiment] {sample.id}: balanced protocol skipped ({e})")
            protocols["balanced"] = None
    return protocols


def run_task(sample: PreparedSample, method: str, density: float, seed: int, cfg: ExperimentConfig) -> Dict:
    """One method on one sample at one density; returns the per-run report."""
    lidar = sample.lidar if density >= 1.0 else subsample_mask(sample.lidar, density, seed)
    decomposition = run_method(method, sample.image, lidar, cfg)
    report = {
        "sample": sample.id,
        "method": method,
        "density": density,
        "seed": seed,
        "lidar_pixels": lidar.observed_count,
        "objective": decomposition.objective,
        "iterations": decomposition.iterations,
        "protocols": _score(sample, decomposition, method, seed, cfg),
    }
    if sample.shadow_mask is not None and sample.shadow_mask.any() and not sample.shadow_mask.all():
        report["shadow_step"] = shadow_step(rgb_to_gray(decomposition.albedo.data), sample.shadow_mask,
                                            SHADOW_BAND, reference=rgb_to_gray(sample.albedo.data))

    run_dir = os.path.join(cfg.out_dir, 'runs', sample.id)
    os.makedirs(run_dir, exist_ok=True)
    stem = f"{method}_d{density:g}_s{seed}"
    if cfg.save_images:
        write_image(os.path.join(run_dir, f"{stem}_albedo.png"), decomposition.albedo, cfg.gamma)
        write_image(os.path.join(run_dir, f"{stem}_shade.png"), decomposition.shade, cfg.gamma)
    with open(os.path.join(run_dir, f"{stem}.json"), 'w', encoding='utf-8', newline='\n') as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write('\n')
    return report


def flatten_runs(reports: List[Dict]) -> List[Dict]:
    """One row per (run, protocol) for the report formatter."""
    rows = []
    for report in reports:
        for protocol, scores in report["protocols"].items():
            if scores is None:
                continue
            row = {key: report[key] for key in ("sample", "method", "density", "seed")}
            row.update(protocol=protocol, n=sum(scores["counts"].values()),
                       **{key: scores[key] for key in ("whdr", "precision", "recall", "f_score")})
            if "shadow_step" in report:
                row["shadow_step"] = report["shadow_step"]
            rows.append(row)
    return rows


def update_metrics(run: RunRecord, metrics_path: str = None) -> None:
    """
    Append a run to the metrics file (last KEEP_RUNS runs kept) and update the totals.

    Args:
        run: Summary of the finished run
        metrics_path: Defaults to the configured metrics file
    """
    if metrics_path is None:
        PipelineConfig.ensure_log_directory()
        metrics_path = PipelineConfig.get_metrics_path()

    try:
        if os.path.exists(metrics_path):
            with open(metrics_path, 'r') as f:
                metrics = json.load(f)
        else:
            metrics = {"total_runs": 0, "successful_runs": 0, "failed_runs": 0,
                       "total_tasks": 0, "total_failures": 0, "runs": []}

        metrics["total_runs"] += 1
        metrics["successful_runs" if run.success else "failed_runs"] += 1
        metrics["total_tasks"] = metrics.get("total_tasks", 0) + run.tasks
        metrics["total_failures"] = metrics.get("total_failures", 0) + run.failures

        metrics["runs"].append({
            "timestamp": datetime.now().isoformat(),
            "out_dir": run.out_dir,
            "methods": list(run.methods),
            "densities": list(run.densities),
            "samples": run.samples,
            "tasks": run.tasks,
            "completed": run.completed,
            "failures": run.failures,
            "duration_seconds": round(run.duration, 2),
            "error": run.error,
        })
        metrics["runs"] = metrics["runs"][-KEEP_RUNS:]

        with open(metrics_path, 'w') as f:
            json.dump(metrics, f, indent=2)

        logger.info(f"[Experiment] Metrics updated: {metrics['successful_runs']}/{metrics['total_runs']} runs, "
                    f"{metrics['total_failures']} failure(s) over {metrics['total_tasks']} task(s)")
    except (OSError, ValueError) as e:
        logger.error(f"[Experiment] Error updating metrics: {e}")


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """
    Run every sample x seed x method x density task and write the reports.

    Returns:
        ExperimentResult with aggregate rows, per-run rows and failures
    """
    start_time = time.time()
    logger.info("=" * 60)
    logger.info(f"[Experiment] methods={','.join(cfg.methods)} densities={list(cfg.densities)} "
                f"seeds={list(cfg.seeds)} jobs={cfg.jobs}")
    logger.info("=" * 60)

    samples, failures = prepare_samples(cfg)
    tasks = [(sample, method, density, seed)
             for sample, seeds in samples for seed in seeds
             for method in cfg.methods for density in cfg.densities]
    logger.info(f"[Experiment] {len(samples)} sample(s), {len(tasks)} task(s)")
    os.makedirs(cfg.out_dir, exist_ok=True)

    def guarded(task):
        sample, method, density, seed = task
        try:
            return run_task(sample, method, density, seed, cfg), None
        except Exception as e:
            logger.error(f"[Experiment] {sample.id} {method} d={density:g} s={seed} failed: {e}")
            return None, {"sample": sample.id, "method": method, "density": density, "seed": seed,
                          "stage": "run", "error": f"{type(e).__name__}: {e}"}

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        outcomes = list(pool.map(guarded, tasks))

    reports = [report for report, _ in outcomes if report is not None]
    failures.extend(failure for _, failure in outcomes if failure is not None)
    reports.sort(key=lambda r: (r["sample"], method_sort_key(r["method"]), -r["density"], r["seed"]))

    formatter = ReportFormatter(flatten_runs(reports))
    report_path = os.path.join(cfg.out_dir, 'report.json')
    table_path = os.path.join(cfg.out_dir, 'report.txt')
    formatter.write(table_path, report_path, extra={"failures": failures, "delta": cfg.delta})

    duration = time.time() - start_time
    first_error = failures[0]["error"][:200] if failures else None
    update_metrics(RunRecord(cfg.out_dir, cfg.methods, cfg.densities, len(samples), len(tasks), len(reports),
                             len(failures), duration, first_error), cfg.metrics_path)
    logger.info(f"[Experiment] {len(reports)} run(s) done, {len(failures)} failure(s) in {duration:.1f}s")
    return ExperimentResult(formatter.aggregate(), formatter.runs, failures, report_path, table_path)
