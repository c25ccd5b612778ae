"""
Configuration for the LiDAR intrinsic-decomposition toolkit.

This module contains the environment-driven settings (logging, defaults,
dataset location) and the flat key=value config-file reader used by the CLI
``--config`` flag. All environment values can be overridden in a ``.env``
file next to the working directory.
"""

import io
import logging
import os
import sys
from dataclasses import fields, replace
from typing import Any, Dict, Iterable, Optional

from dotenv import dotenv_values, load_dotenv
from dotenv.parser import parse_stream

from iid_errors import ConfigError

# Load environment variables
load_dotenv()


class PipelineConfig:
    """Configuration settings for the toolkit and its experiment runner."""

    # Logging configuration
    LOG_DIRECTORY = os.getenv('IID_LOG_DIRECTORY', 'logs')
    LOG_FILE = os.getenv('IID_LOG_FILE', 'lidar_iid.log')
    LOG_LEVEL = os.getenv('IID_LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

    # Metrics file for tracking experiment runs
    METRICS_FILE = os.getenv('IID_METRICS_FILE', 'metrics.json')

    # Defaults shared by every subcommand
    DEFAULT_SEED = int(os.getenv('IID_DEFAULT_SEED', '0'))
    JOBS = int(os.getenv('IID_JOBS', '1'))
    DELTA = float(os.getenv('IID_DELTA', '0.1'))
    GAMMA = float(os.getenv('IID_GAMMA', '2.2'))

    # Released dataset (optional reproduction run)
    DATASET_URL = os.getenv('IID_DATASET_URL', '')
    DATASET_MANIFEST = os.getenv('IID_DATASET_MANIFEST', '')
    HTTP_RETRIES = int(os.getenv('IID_HTTP_RETRIES', '3'))
    HTTP_TIMEOUT = int(os.getenv('IID_HTTP_TIMEOUT', '30'))

    @classmethod
    def get_log_path(cls) -> str:
        """Get the full path to the log file."""
        return os.path.join(cls.LOG_DIRECTORY, cls.LOG_FILE)

    @classmethod
    def get_metrics_path(cls) -> str:
        """Get the full path to the metrics file."""
        return os.path.join(cls.LOG_DIRECTORY, cls.METRICS_FILE)

    @classmethod
    def ensure_log_directory(cls) -> None:
        """Create the log directory if it doesn't exist."""
        if not os.path.exists(cls.LOG_DIRECTORY):
            os.makedirs(cls.LOG_DIRECTORY)

    @classmethod
    def configure_logging(cls, level: Optional[str] = None, to_file: bool = True) -> None:
        """
        Configure root logging the same way for every entry point.

        Stream output goes to stderr so stdout stays free for JSON summaries.

        Args:
            level: Level name overriding IID_LOG_LEVEL
            to_file: Also append to the log file under LOG_DIRECTORY
        """
        handlers = [logging.StreamHandler(sys.stderr)]
        if to_file:
            cls.ensure_log_directory()
            handlers.append(logging.FileHandler(cls.get_log_path()))
        logging.basicConfig(
            level=getattr(logging, (level or cls.LOG_LEVEL).upper(), logging.INFO),
            format=cls.LOG_FORMAT,
            handlers=handlers,
            force=True,
        )


# Keys accepted in --config files, grouped by the parameter object they feed
SOLVER_KEYS = {'max_outer', 'max_inner', 'armijo', 'grad_tol', 'init', 'huber_delta', 'optimizer'}
WEIGHT_KEYS = {f'lambda{i}' for i in range(1, 8)}
AFFINITY_KEYS = {'neighborhood', 'sigma_pos', 'sigma_lum', 'sigma_chroma'}
DENSIFY_KEYS = {'lambda_reg', 'sigma_rgb', 'max_iters', 'tol', 'connectivity'}
SYNTH_KEYS = {'n_regions', 'shadow', 'noise_sigma', 'lidar_density', 'shade_smoothness'}
ANNOTATION_KEYS = {'annotation_mode', 'size_mode', 'lum_lo', 'lum_hi', 'edge_threshold', 'edge_radius'}
EXPERIMENT_KEYS = {'gamma', 'delta', 'methods', 'densities', 'seeds', 'jobs', 'balanced',
                   'retinex_threshold', 'color_threshold', 'scenes', 'size'}
KNOWN_KEYS = (SOLVER_KEYS | WEIGHT_KEYS | AFFINITY_KEYS | DENSIFY_KEYS | SYNTH_KEYS
              | ANNOTATION_KEYS | EXPERIMENT_KEYS)


def coerce_value(raw: str) -> Any:
    """Turn a config string into bool, int, float, list or str."""
    text = raw.strip()
    lowered = text.lower()
    if lowered in ('true', 'yes', 'on'):
        return True
    if lowered in ('false', 'no', 'off'):
        return False
    if ',' in text:
        return [coerce_value(part) for part in text.split(',') if part.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _binding_line(binding) -> int:
    """Line of the key itself, past any blank lines dotenv folds into the binding."""
    original = binding.original.string
    leading = original[:len(original) - len(original.lstrip())]
    return binding.original.line + leading.count('\n')


def parse_config_text(text: str, known: Iterable[str] = KNOWN_KEYS) -> Dict[str, Any]:
    """
    Parse flat key=value text with python-dotenv and coerce the values.

    Args:
        text: File contents
        known: Accepted keys

    Returns:
        Mapping of key to coerced value
    """
    known = set(known)
    for binding in parse_stream(io.StringIO(text)):
        line = _binding_line(binding)
        if binding.error:
            raise ConfigError(f"expected key=value, got {binding.original.string.strip()!r}", line=line)
        if binding.key is None:
            continue
        if binding.value is None:
            raise ConfigError(f"expected key=value, got {binding.key!r}", line=line)
        if binding.key not in known:
            raise ConfigError(f"unknown key {binding.key!r}; accepted keys: {', '.join(sorted(known))}",
                              line=line)
    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    return {key: coerce_value(value) for key, value in values.items()}


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Read a key=value config file; an empty path yields no options."""
    if not path:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return parse_config_text(f.read())


def _pick(options: Dict[str, Any], keys: Iterable[str], rename: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    rename = rename or {}
    return {rename.get(k, k): options[k] for k in keys if k in options}


def _replace_checked(obj, updates: Dict[str, Any]):
    """dataclasses.replace that turns type/invariant failures into ConfigError."""
    if not updates:
        return obj
    valid = {f.name for f in fields(obj)}
    unknown = set(updates) - valid
    if unknown:
        raise ConfigError(f"unsupported option(s) for {type(obj).__name__}: {sorted(unknown)}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def build_solver_config(options: Dict[str, Any], base=None):
    """Apply solver, loss-weight and affinity options to a SolverConfig."""
    from solver import SolverConfig

    base = base or SolverConfig()
    weights = _replace_checked(base.weights, _pick(options, WEIGHT_KEYS))
    affinity = _replace_checked(base.affinity, _pick(options, AFFINITY_KEYS))
    updates = _pick(options, SOLVER_KEYS)
    updates.update(weights=weights, affinity=affinity)
    return _replace_checked(base, updates)


def build_densify_params(options: Dict[str, Any], base=None):
    """Apply densification options to DensifyParams."""
    from densify import DensifyParams

    return _replace_checked(base or DensifyParams(), _pick(options, DENSIFY_KEYS))


def build_synth_config(options: Dict[str, Any], base=None):
    """Apply synthetic-scene options to SynthConfig."""
    from synth_scene import SynthConfig

    return _replace_checked(base or SynthConfig(), _pick(options, SYNTH_KEYS))


def build_annotation_config(options: Dict[str, Any], base=None):
    """Apply annotation-sampling options to AnnotationConfig."""
    from annotation_handler import AnnotationConfig

    picked = _pick(options, ANNOTATION_KEYS, rename={'annotation_mode': 'mode'})
    return _replace_checked(base or AnnotationConfig(), picked)


# Create a singleton instance
config = PipelineConfig()
