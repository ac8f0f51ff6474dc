"""
Monte-Carlo runner and metrics.

Each trial draws its own trajectory and measurement stream from named
sub-streams of the run seed; every configured filter consumes the same
frames. Metrics are folded over records sorted by trial id, so the result
does not depend on the order in which workers finish.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from core.exceptions import TrackingError
from harness.trackers import check_filter_names, make_tracker
from scenarios.logic import (
    STATE_DIM,
    STREAM_BIAS,
    STREAM_ESTIMATOR,
    STREAM_NOISE,
    STREAM_TRAJECTORY,
    corrupt_labels,
    draw_initial_state,
    measure_frame,
    simulate_trajectory,
    trial_rng,
    write_truth_csv,
)
from srukf.logic import FilterDiagnostics, FilterState, checked_eta

logger = logging.getLogger(__name__)

SIGMA00_DIAG = (1e4, 1e4, 1e2, 1e2)


class AllDiverged(TrackingError):
    pass


@dataclass
class TrialRecord:
    trial: int
    truth: NDArray[np.float64]
    estimates: dict = field(default_factory=dict)
    diverged: dict = field(default_factory=dict)
    projected: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    step_time: dict = field(default_factory=dict)

    @property
    def epochs(self):
        return len(self.truth)

    @property
    def filters(self):
        return tuple(self.estimates)

    def position_errors(self, name):
        """Per-epoch Euclidean position error of one filter."""
        return np.linalg.norm(self.estimates[name][:, :2] - self.truth[:, :2], axis=1)


@dataclass(frozen=True)
class EmpiricalCdf:
    samples: NDArray[np.float64] = field(compare=False)
    domain: str = "squared"

    def __call__(self, x):
        """Fraction of samples <= x."""
        if len(self.samples) == 0:
            return np.zeros_like(np.asarray(x, dtype=float))
        return np.searchsorted(self.samples, x, side="right") / len(self.samples)

    def quantile(self, q):
        return float(np.quantile(self.samples, q))


@dataclass
class MetricsBundle:
    name: str
    rmse_by_epoch: NDArray[np.float64]
    cdf: EmpiricalCdf
    distance_cdf: EmpiricalCdf
    steady_state_rmse: float
    trials: int
    diverged: int
    mean_step_time: float = 0.0
    mean_projected_per_epoch: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def summary(self):
        return {
            "steady_state_rmse": self.steady_state_rmse,
            "diverged": self.diverged,
            "trials": self.trials,
            "mean_step_time": self.mean_step_time,
            "mean_projected_per_epoch": self.mean_projected_per_epoch,
        }


def initialize_estimator(s0, seed, sigma00=SIGMA00_DIAG) -> FilterState:
    """Initial estimate drawn around the true state: mean ~ N(s0, diag(sigma00)), factor diag(sqrt(sigma00))."""
    std = np.sqrt(np.asarray(sigma00, dtype=float))
    rng = np.random.default_rng(seed)
    mean = np.asarray(s0, dtype=float) + std * rng.standard_normal(STATE_DIM)
    return FilterState(mean, np.diag(std))


def simulate_trial(config, trial, model):
    """Truth states s_0..s_K and the K (label-corrupted) frames of one trial."""
    rng = trial_rng(config.seed, trial, STREAM_TRAJECTORY)
    s0 = draw_initial_state(config.anchors, rng)
    trajectory = simulate_trajectory(model, s0, config.steps + 1, rng)
    noise_rng = trial_rng(config.seed, trial, STREAM_NOISE)
    bias_rng = trial_rng(config.seed, trial, STREAM_BIAS)
    frames = []
    for k in range(1, config.steps + 1):
        frame = measure_frame(
            trajectory.states[k], config.anchors, config.nlos_ids, config.sigma_n,
            config.bias, noise_rng, bias_rng, epoch=k,
        )
        frames.append(corrupt_labels(frame, config.fa_ids, config.md_ids))
    return trajectory, frames


def run_trial(config, trial, filters=None, dump_dir=None) -> TrialRecord:
    filters = check_filter_names(filters or config.filters)
    model = config.motion
    eta_alpha = checked_eta(config.alpha, STATE_DIM)
    trajectory, frames = simulate_trial(config, trial, model)
    if dump_dir is not None:
        write_truth_csv(Path(dump_dir) / f"truth_trial_{trial}.csv", trajectory, frames)

    start = initialize_estimator(trajectory.s0, trial_rng(config.seed, trial, STREAM_ESTIMATOR))
    truth = trajectory.states[1:]
    record = TrialRecord(trial=trial, truth=truth)
    for name in filters:
        tracker = make_tracker(name, config, model, eta_alpha, start)
        estimates = np.empty((len(frames), STATE_DIM))
        for k, frame in enumerate(frames):
            estimates[k] = tracker.advance(frame, truth[k])
        record.estimates[name] = estimates
        record.diverged[name] = tracker.diverged
        record.projected[name] = np.asarray(tracker.projected, dtype=int)
        record.skipped[name] = np.asarray(tracker.skipped, dtype=int)
        record.diagnostics[name] = tracker.diagnostics
        record.step_time[name] = tracker.mean_step_time
    return record


def _run_trial_args(args):
    return run_trial(*args)


def run_experiment(config, filters=None, workers=1, dump_dir=None) -> list[TrialRecord]:
    """All trials of a scenario, sorted by trial id."""
    filters = check_filter_names(filters or config.filters)
    checked_eta(config.alpha, STATE_DIM)
    logger.info(
        f"Running '{config.name}': {config.trials} trials x {config.steps} epochs, "
        f"filters {list(filters)}, seed {config.seed}, workers {workers}"
    )
    jobs = [(config, t, filters, dump_dir) for t in range(config.trials)]
    if workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.trials)) as pool:
            records = list(pool.map(_run_trial_args, jobs))
    else:
        records = []
        for job in jobs:
            records.append(run_trial(*job))
            logger.debug(f"Trial {job[1]} done")
    records.sort(key=lambda r: r.trial)
    logger.info(f"Finished '{config.name}' ({len(records)} trials)")
    return records


def _usable(records, name):
    return [r for r in records if not r.diverged[name]]


def rmse(records, name) -> NDArray[np.float64]:
    """Per-epoch position RMSE over the non-diverged trials."""
    usable = _usable(records, name)
    if not usable:
        raise AllDiverged(f"every trial diverged for filter '{name}'")
    sq = np.stack([r.position_errors(name) ** 2 for r in usable])
    if not np.all(np.isfinite(sq)):
        raise AllDiverged(f"filter '{name}' has non-finite errors in non-diverged trials")
    return np.sqrt(sq.mean(axis=0))


def error_cdf(records, name, domain="squared") -> EmpiricalCdf:
    """Empirical CDF of the squared (or, with domain="distance", plain) position error pooled over trials and epochs."""
    usable = _usable(records, name)
    if not usable:
        raise AllDiverged(f"every trial diverged for filter '{name}'")
    errors = np.concatenate([r.position_errors(name) for r in usable])
    samples = errors ** 2 if domain == "squared" else errors
    return EmpiricalCdf(np.sort(samples), domain)


def steady_state_rmse(rmse_by_epoch, fraction=0.2) -> float:
    """Mean RMSE over the last `fraction` of the epochs (at least one epoch)."""
    rmse_by_epoch = np.asarray(rmse_by_epoch, dtype=float)
    n = max(1, math.ceil(fraction * len(rmse_by_epoch)))
    return float(rmse_by_epoch[-n:].mean())


def compute_metrics(records, filters=None, steady_fraction=0.2) -> dict[str, MetricsBundle]:
    records = sorted(records, key=lambda r: r.trial)
    filters = tuple(filters or records[0].filters)
    epochs = records[0].epochs
    out = {}
    for name in filters:
        diagnostics = FilterDiagnostics()
        for r in records:
            if name in r.diagnostics:
                diagnostics.merge(r.diagnostics[name])
        diverged = sum(1 for r in records if r.diverged[name])
        step_time = float(np.mean([r.step_time.get(name, 0.0) for r in records]))
        projected = float(np.mean([r.projected[name].mean() for r in records]))
        try:
            by_epoch = rmse(records, name)
            cdf = error_cdf(records, name)
            dist = error_cdf(records, name, domain="distance")
            steady = steady_state_rmse(by_epoch, steady_fraction)
        except AllDiverged as e:
            logger.warning(f"{e}; metrics for '{name}' are NaN")
            by_epoch = np.full(epochs, np.nan)
            cdf = EmpiricalCdf(np.empty(0), "squared")
            dist = EmpiricalCdf(np.empty(0), "distance")
            steady = float("nan")
        out[name] = MetricsBundle(
            name=name,
            rmse_by_epoch=by_epoch,
            cdf=cdf,
            distance_cdf=dist,
            steady_state_rmse=steady,
            trials=len(records),
            diverged=diverged,
            mean_step_time=step_time,
            mean_projected_per_epoch=projected,
            diagnostics=diagnostics.as_dict(),
        )
    return out
