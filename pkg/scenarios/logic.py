"""
Ground truth and measurement generation for TOA tracking under NLOS.

The motion model is a 2-D random walk in velocity; ranges to fixed anchors are
perturbed with Gaussian noise and, on NLOS links, a non-negative bias.
"""
import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.stats import truncnorm

from core.exceptions import ConfigError

logger = logging.getLogger(__name__)

STATE_DIM = 4

# Named random streams per trial; a purpose never shifts another purpose's draws.
STREAM_TRAJECTORY = 0
STREAM_NOISE = 1
STREAM_BIAS = 2
STREAM_ESTIMATOR = 3


class Label(str, enum.Enum):
    LOS = "LOS"
    NLOS = "NLOS"


class BiasKind(str, enum.Enum):
    EXPONENTIAL = "exponential"
    SHIFTED_GAUSSIAN = "shifted_gaussian"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class MotionModel:
    dt: float
    sigma_w2: float
    F: NDArray[np.float64] = field(repr=False, compare=False)
    G: NDArray[np.float64] = field(repr=False, compare=False)
    Q: NDArray[np.float64] = field(repr=False, compare=False)

    @property
    def sqrt_q(self):
        # Q is diagonal, so its square root is elementwise.
        return np.sqrt(np.diag(self.Q))


@dataclass(frozen=True)
class Anchor:
    id: int
    position: tuple[float, float]

    @property
    def xy(self):
        return np.asarray(self.position, dtype=float)


@dataclass(frozen=True)
class BiasModel:
    kind: BiasKind
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", BiasKind(self.kind))
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})
        p = self.params
        required = {
            BiasKind.EXPONENTIAL: ("mean",),
            BiasKind.SHIFTED_GAUSSIAN: ("mean", "std"),
            BiasKind.UNIFORM: ("lower", "upper"),
        }[self.kind]
        missing = [name for name in required if name not in p]
        if missing:
            raise ConfigError(f"bias model '{self.kind.value}' is missing parameters {missing}")
        if self.kind is BiasKind.EXPONENTIAL and p["mean"] < 0:
            raise ConfigError("exponential bias mean must be >= 0")
        if self.kind is BiasKind.SHIFTED_GAUSSIAN and p["std"] <= 0:
            raise ConfigError("shifted gaussian bias std must be > 0")
        if self.kind is BiasKind.UNIFORM and not 0 <= p["lower"] <= p["upper"]:
            raise ConfigError("uniform bias needs 0 <= lower <= upper")

    @classmethod
    def exponential(cls, gamma):
        return cls(BiasKind.EXPONENTIAL, {"mean": gamma})

    def sample(self, rng, size):
        p = self.params
        if self.kind is BiasKind.EXPONENTIAL:
            return rng.exponential(p["mean"], size)
        if self.kind is BiasKind.UNIFORM:
            return rng.uniform(p["lower"], p["upper"], size)

        # Shifted gaussian: reject negative draws and resample them.
        out = rng.normal(p["mean"], p["std"], size)
        bad = out < 0.0
        while np.any(bad):
            out[bad] = rng.normal(p["mean"], p["std"], int(bad.sum()))
            bad = out < 0.0
        return out

    def _truncated(self):
        p = self.params
        return truncnorm(-p["mean"] / p["std"], np.inf, loc=p["mean"], scale=p["std"])

    def mean(self):
        p = self.params
        if self.kind is BiasKind.EXPONENTIAL:
            return p["mean"]
        if self.kind is BiasKind.UNIFORM:
            return 0.5 * (p["lower"] + p["upper"])
        return float(self._truncated().mean())

    def variance(self):
        p = self.params
        if self.kind is BiasKind.EXPONENTIAL:
            return p["mean"] ** 2
        if self.kind is BiasKind.UNIFORM:
            return (p["upper"] - p["lower"]) ** 2 / 12.0
        return float(self._truncated().var())


@dataclass(frozen=True)
class MeasurementFrame:
    epoch: int
    anchors: tuple[Anchor, ...]
    ranges: NDArray[np.float64] = field(compare=False)
    true_labels: tuple[Label, ...]
    reported_labels: tuple[Label, ...]
    sigma_n: float

    def _indices(self, label):
        return [i for i, lab in enumerate(self.reported_labels) if lab is label]

    @property
    def los_indices(self):
        return self._indices(Label.LOS)

    @property
    def nlos_indices(self):
        return self._indices(Label.NLOS)

    @property
    def los_anchors(self):
        return [self.anchors[i] for i in self.los_indices]

    @property
    def los_ranges(self):
        return self.ranges[self.los_indices]

    @property
    def anchor_ids(self):
        return [a.id for a in self.anchors]


@dataclass(frozen=True)
class TruthTrajectory:
    states: NDArray[np.float64] = field(compare=False)
    seed: object
    s0: NDArray[np.float64] = field(compare=False)

    def __len__(self):
        return len(self.states)

    @property
    def positions(self):
        return self.states[:, :2]


def trial_rng(seed, trial, purpose):
    """Independent generator for one (trial, purpose) pair under a run seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(trial), int(purpose))))


def make_motion(dt, sigma_w2) -> MotionModel:
    if not dt > 0:
        raise ConfigError(f"dt must be > 0, got {dt}")
    if not sigma_w2 > 0:
        raise ConfigError(f"sigma_w2 must be > 0, got {sigma_w2}")

    dt = float(dt)
    F = np.eye(STATE_DIM)
    F[0, 2] = F[1, 3] = dt
    G = np.array([
        [dt * dt / 2.0, 0.0],
        [0.0, dt * dt / 2.0],
        [dt, 0.0],
        [0.0, dt],
    ])
    Q = float(sigma_w2) * np.eye(2)
    return MotionModel(dt=dt, sigma_w2=float(sigma_w2), F=F, G=G, Q=Q)


def simulate_trajectory(model, s0, K, seed) -> TruthTrajectory:
    """
    K states of s_k = F s_{k-1} + G w_{k-1}, w ~ N(0, Q), starting at states[0] = s0.
    `seed` may be an int or a numpy Generator.
    """
    if K < 1:
        raise ConfigError(f"trajectory length must be >= 1, got {K}")
    rng = np.random.default_rng(seed)
    s0 = np.asarray(s0, dtype=float)

    states = np.empty((K, STATE_DIM))
    states[0] = s0
    if K > 1:
        w = rng.standard_normal((K - 1, 2)) * model.sqrt_q
        for k in range(1, K):
            states[k] = model.F @ states[k - 1] + model.G @ w[k - 1]
    return TruthTrajectory(states=states, seed=seed, s0=s0)


def draw_initial_state(anchors, rng):
    """Position uniform over the anchor bounding box, velocity N(0, I) m/s."""
    xy = np.array([a.position for a in anchors], dtype=float)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    return np.concatenate([rng.uniform(lo, hi), rng.standard_normal(2)])


def range_truth(x, a) -> float:
    anchor_xy = a.xy if isinstance(a, Anchor) else np.asarray(a, dtype=float)
    return float(np.linalg.norm(np.asarray(x, dtype=float)[:2] - anchor_xy))


def measure_frame(x, anchors, nlos_ids, sigma_n, bias, noise_rng, bias_rng=None, epoch=0) -> MeasurementFrame:
    """
    r^i = h^i + n^i on LOS links and h^i + b^i + n^i on NLOS links.
    Noise and bias are drawn for every anchor so the streams stay aligned
    whatever the NLOS subset is.
    """
    anchors = tuple(anchors)
    ids = {a.id for a in anchors}
    nlos_ids = set(nlos_ids)
    if not nlos_ids <= ids:
        raise ConfigError(f"NLOS ids {sorted(nlos_ids - ids)} are not anchor ids")

    noise_rng = np.random.default_rng(noise_rng)
    bias_rng = noise_rng if bias_rng is None else np.random.default_rng(bias_rng)

    truth = np.array([range_truth(x, a) for a in anchors])
    noise = sigma_n * noise_rng.standard_normal(len(anchors))
    biases = bias.sample(bias_rng, len(anchors))
    is_nlos = np.array([a.id in nlos_ids for a in anchors])

    ranges = truth + noise + np.where(is_nlos, biases, 0.0)
    ranges = np.maximum(ranges, 0.0)
    labels = tuple(Label.NLOS if flag else Label.LOS for flag in is_nlos)
    return MeasurementFrame(
        epoch=epoch,
        anchors=anchors,
        ranges=ranges,
        true_labels=labels,
        reported_labels=labels,
        sigma_n=float(sigma_n),
    )


def corrupt_labels(frame, fa_ids=(), md_ids=()) -> MeasurementFrame:
    """
    False alarms report true-LOS links as NLOS; missed detections report
    true-NLOS links as LOS. True labels are untouched.
    """
    fa_ids, md_ids = set(fa_ids), set(md_ids)
    if not fa_ids and not md_ids:
        return frame

    by_id = {a.id: i for i, a in enumerate(frame.anchors)}
    for aid in fa_ids | md_ids:
        if aid not in by_id:
            raise ConfigError(f"anchor id {aid} is not part of the frame")
    for aid in fa_ids:
        if frame.true_labels[by_id[aid]] is not Label.LOS:
            raise ConfigError(f"false alarm id {aid} is not a true LOS link")
    for aid in md_ids:
        if frame.true_labels[by_id[aid]] is not Label.NLOS:
            raise ConfigError(f"missed detection id {aid} is not a true NLOS link")

    reported = list(frame.reported_labels)
    for aid in fa_ids:
        reported[by_id[aid]] = Label.NLOS
    for aid in md_ids:
        reported[by_id[aid]] = Label.LOS
    return replace(frame, reported_labels=tuple(reported))


def write_truth_csv(path, trajectory, frames):
    """One row per epoch: k, x, y, vx, vy, r_1..r_M, true and reported labels."""
    path = Path(path)
    anchors = frames[0].anchors if frames else ()
    header = ["k", "x", "y", "vx", "vy"]
    header += [f"r_{a.id}" for a in anchors]
    header += [f"true_{a.id}" for a in anchors]
    header += [f"reported_{a.id}" for a in anchors]

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for frame in frames:
            s = trajectory.states[frame.epoch]
            row = [frame.epoch] + [repr(float(v)) for v in s]
            row += [repr(float(r)) for r in frame.ranges]
            row += [lab.value for lab in frame.true_labels]
            row += [lab.value for lab in frame.reported_labels]
            writer.writerow(row)
    logger.info(f"Wrote truth/measurement dump {path}")
    return path
