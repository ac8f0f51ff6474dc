"""
Argument parsing shared by the management commands. Everything here raises
ConfigError; the commands map it to an exit code.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.conf import settings

from core.exceptions import ConfigError
from harness.trackers import check_filter_names
from scenarios.config import load_scenario

logger = logging.getLogger(__name__)

DEFAULT_OUT = "results"


def parse_name_list(text):
    names = tuple(part.strip() for part in text.split(",") if part.strip())
    if not names:
        raise ConfigError(f"expected a comma-separated list of names, got '{text}'")
    return names


def parse_float_list(text, size=None, label="value"):
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse {label} '{text}': {e}") from e
    if not values:
        raise ConfigError(f"{label} is empty")
    if size is not None and len(values) != size:
        raise ConfigError(f"{label} needs {size} numbers, got {len(values)}")
    if not np.all(np.isfinite(values)):
        raise ConfigError(f"{label} must be finite, got '{text}'")
    return values


def parse_factor(text, dim):
    """
    Upper-triangular factor U (Sigma = U^T U) as rows separated by ';'.
    A single row of `dim` numbers is read as the diagonal.
    """
    if text is None:
        return np.eye(dim)
    rows = [r for r in text.split(";") if r.strip()]
    if len(rows) == 1:
        return np.diag(parse_float_list(rows[0], dim, "factor diagonal"))
    if len(rows) != dim:
        raise ConfigError(f"factor needs {dim} rows, got {len(rows)}")
    factor = np.array([parse_float_list(r, dim, "factor row") for r in rows])
    if not np.allclose(factor, np.triu(factor)):
        raise ConfigError("factor must be upper triangular")
    return factor


def parse_disc(text):
    cx, cy, radius = parse_float_list(text, 3, "disc")
    if radius <= 0:
        raise ConfigError(f"disc radius must be > 0, got {radius}")
    return (cx, cy), radius


def check_alpha(alpha):
    if not 0.6 < alpha < 1.0:
        raise ConfigError(f"alpha must satisfy 0.6 < alpha < 1, got {alpha}")
    return alpha


@dataclass
class RunConfig:
    scenario: Path
    filters: tuple | None = None
    overrides: dict = field(default_factory=dict)
    out: Path = Path(DEFAULT_OUT)
    workers: int = 1
    dump_truth: bool = False

    def load(self):
        """Scenario file with the command-line overrides applied and validated."""
        config = load_scenario(self.scenario).with_overrides(filters=self.filters, **self.overrides)
        check_filter_names(config.filters)
        return config


def resolve_run_config(scenario, filters=None, trials=None, steps=None, seed=None, alpha=None,
                       epsilon=None, out=None, threads=None, dump_truth=False) -> RunConfig:
    if not scenario:
        raise ConfigError("--scenario is required")
    path = Path(scenario)
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    if alpha is not None:
        check_alpha(alpha)
    if epsilon is not None and epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    for label, value in (("trials", trials), ("steps", steps), ("threads", threads)):
        if value is not None and value < 1:
            raise ConfigError(f"--{label} must be >= 1, got {value}")

    names = check_filter_names(parse_name_list(filters)) if filters else None

    env_out = getattr(settings, "NLOS_TRACK_OUT", None)
    if env_out:
        if out and Path(out) != Path(env_out):
            logger.info(f"NLOS_TRACK_OUT overrides --out ({out} -> {env_out})")
        out = env_out

    return RunConfig(
        scenario=path,
        filters=names,
        overrides={"trials": trials, "steps": steps, "seed": seed, "alpha": alpha, "epsilon": epsilon},
        out=Path(out or DEFAULT_OUT),
        workers=threads or getattr(settings, "TRACKING_WORKERS", 1),
        dump_truth=dump_truth,
    )
