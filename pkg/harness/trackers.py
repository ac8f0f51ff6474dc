"""
Filter registry: one tracker object per (trial, filter), holding the running
estimate, the divergence flag, numerical diagnostics and step timing.
"""
import logging
import time

import numpy as np

from baselines.logic import BaselineConfig, BaselineKind, RangeSmootherState, ekf_step, smooth_ranges
from core.exceptions import ConfigError, TrackingError
from projection.logic import csrukf_step
from srukf.logic import FilterDiagnostics, step_unconstrained

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e9


class Tracker:
    name = None

    def __init__(self, config, model, eta_alpha, start):
        self.config = config
        self.model = model
        self.eta_alpha = eta_alpha
        self.state = start
        self.diagnostics = FilterDiagnostics()
        self.diverged = False
        self.failed = False
        self.elapsed = 0.0
        self.steps = 0
        self.projected = []
        self.skipped = []

    def _step(self, frame):
        raise NotImplementedError

    def advance(self, frame, truth=None):
        """Steps the filter; returns the position/velocity estimate (NaN once the filter has failed)."""
        if self.failed:
            self.projected.append(0)
            self.skipped.append(0)
            return np.full(4, np.nan)

        projected, skipped = self.diagnostics.projected_points, self.diagnostics.infeasible_skips
        start = time.perf_counter()
        try:
            self.state = self._step(frame)
        except ConfigError:
            raise
        except (TrackingError, np.linalg.LinAlgError, FloatingPointError) as e:
            logger.warning(f"{self.name}: step failed at epoch {frame.epoch} ({e}); flagging as diverged")
            self._fail()
        self.elapsed += time.perf_counter() - start
        self.steps += 1
        self.projected.append(self.diagnostics.projected_points - projected)
        self.skipped.append(self.diagnostics.infeasible_skips - skipped)

        if self.failed:
            return np.full(4, np.nan)
        if not self.state.is_finite() or np.linalg.norm(self.state.mean) > DIVERGENCE_NORM:
            logger.warning(f"{self.name}: estimate left the finite range at epoch {frame.epoch}")
            self._fail()
            return np.full(4, np.nan)
        if truth is not None and not self.diverged and self.steps > self.config.divergence_burn_in:
            error = float(np.linalg.norm(self.state.position - np.asarray(truth)[:2]))
            if error > self.config.divergence_error:
                logger.warning(f"{self.name}: position error {error:.1f} m at epoch {frame.epoch}; flagging as diverged")
                self.diverged = True
        return self.state.mean.copy()

    def _fail(self):
        self.failed = True
        self.diverged = True

    @property
    def mean_step_time(self):
        return self.elapsed / self.steps if self.steps else 0.0


class CsrukfTracker(Tracker):
    name = "csrukf"

    def _step(self, frame):
        return csrukf_step(self.state, self.model, frame, self.eta_alpha, self.config.epsilon, self.diagnostics)


class SrukfTracker(Tracker):
    name = "srukf"

    def _step(self, frame):
        return step_unconstrained(self.state, self.model, frame, self.eta_alpha, self.diagnostics)


class BaselineTracker(Tracker):
    kind = None

    def __init__(self, config, model, eta_alpha, start):
        super().__init__(config, model, eta_alpha, start)
        self.baseline = BaselineConfig.from_scenario(config, self.kind)

    def _step(self, frame):
        return ekf_step(
            self.state, self.model, frame, self.baseline,
            eta_alpha=self.eta_alpha, epsilon=self.config.epsilon, diagnostics=self.diagnostics,
        )


class PkfTracker(BaselineTracker):
    name = "pkf"
    kind = BaselineKind.PKF


class EkfOrTracker(BaselineTracker):
    name = "ekf_or"
    kind = BaselineKind.EKF_OR


class BekfTracker(BaselineTracker):
    name = "bekf"
    kind = BaselineKind.BEKF


class SekfTracker(BaselineTracker):
    name = "sekf"
    kind = BaselineKind.SEKF

    def __init__(self, config, model, eta_alpha, start):
        super().__init__(config, model, eta_alpha, start)
        self.smoother = RangeSmootherState.empty(len(config.anchors))

    def _step(self, frame):
        self.smoother = smooth_ranges(
            self.smoother, frame.ranges, frame.sigma_n, self.baseline.process_var(frame.sigma_n)
        )
        return ekf_step(
            self.state, self.model, frame, self.baseline, smoothed=self.smoother, diagnostics=self.diagnostics
        )


FILTER_REGISTRY = {
    cls.name: cls
    for cls in (CsrukfTracker, SrukfTracker, PkfTracker, SekfTracker, BekfTracker, EkfOrTracker)
}


def check_filter_names(names):
    unknown = [n for n in names if n not in FILTER_REGISTRY]
    if unknown:
        raise ConfigError(f"unknown filters {unknown}; choose from {sorted(FILTER_REGISTRY)}")
    if len(set(names)) != len(names):
        raise ConfigError(f"filter list has duplicates: {list(names)}")
    return tuple(names)


def make_tracker(name, config, model, eta_alpha, start) -> Tracker:
    check_filter_names([name])
    return FILTER_REGISTRY[name](config, model, eta_alpha, start)
