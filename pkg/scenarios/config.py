"""
Scenario files (TOML).

    name = "small_noise_los1"
    seed = 2024
    steps = 500
    trials = 100

    [motion]
    dt = 0.2
    sigma_w2 = 0.04

    [measurement]
    sigma_n = 10.0
    nlos_ids = [1, 2, 3]
    fa_ids = []
    md_ids = []

    [bias]
    kind = "exponential"

    [bias.params]
    mean = 500.0

    [filters]
    names = ["csrukf", "pkf", "sekf", "bekf", "ekf_or"]
    alpha = 0.7
    epsilon = 3.0
    sekf_scale = 1.5
    steady_fraction = 0.2
    divergence_error = 1000.0
    divergence_burn_in = 50

    [[anchors]]
    id = 1
    position = [0.0, 0.0]

`sekf_process_var` under [filters] is optional; it defaults to (sigma_n / 2)^2.
"""
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli_w

from core.exceptions import ConfigError
from scenarios.logic import Anchor, BiasModel, make_motion

logger = logging.getLogger(__name__)

DEFAULT_FILTERS = ("csrukf", "pkf", "sekf", "bekf", "ekf_or")

SQUARE_ANCHORS = (
    Anchor(1, (0.0, 0.0)),
    Anchor(2, (0.0, 1000.0)),
    Anchor(3, (1000.0, 1000.0)),
    Anchor(4, (1000.0, 0.0)),
)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    anchors: tuple[Anchor, ...] = SQUARE_ANCHORS
    dt: float = 0.2
    sigma_w2: float = 0.04
    sigma_n: float = 10.0
    bias: BiasModel = field(default_factory=lambda: BiasModel.exponential(500.0))
    steps: int = 500
    trials: int = 100
    nlos_ids: tuple[int, ...] = ()
    fa_ids: tuple[int, ...] = ()
    md_ids: tuple[int, ...] = ()
    seed: int = 2024
    filters: tuple[str, ...] = DEFAULT_FILTERS
    alpha: float = 0.7
    epsilon: float = 3.0
    sekf_scale: float = 1.5
    sekf_process_var: float | None = None
    steady_fraction: float = 0.2
    divergence_error: float = 1000.0
    divergence_burn_in: int = 50

    def __post_init__(self):
        self.validate()

    @property
    def motion(self):
        return make_motion(self.dt, self.sigma_w2)

    @property
    def anchor_ids(self):
        return tuple(a.id for a in self.anchors)

    def with_overrides(self, **overrides):
        """Copy with the non-None overrides applied (and validated)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **changes) if changes else self

    def validate(self):
        ids = self.anchor_ids
        if not ids:
            raise ConfigError("scenario needs at least one anchor")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"anchor ids must be unique, got {list(ids)}")
        if self.dt <= 0 or self.sigma_w2 <= 0:
            raise ConfigError("motion.dt and motion.sigma_w2 must be > 0")
        if self.sigma_n < 0:
            raise ConfigError("measurement.sigma_n must be >= 0")
        if self.steps < 1 or self.trials < 1:
            raise ConfigError("steps and trials must be >= 1")
        for key in ("nlos_ids", "fa_ids", "md_ids"):
            unknown = set(getattr(self, key)) - set(ids)
            if unknown:
                raise ConfigError(f"measurement.{key} references unknown anchors {sorted(unknown)}")
        if set(self.fa_ids) & set(self.nlos_ids):
            raise ConfigError("measurement.fa_ids must be true-LOS anchors (not in nlos_ids)")
        if not set(self.md_ids) <= set(self.nlos_ids):
            raise ConfigError("measurement.md_ids must be true-NLOS anchors (in nlos_ids)")
        if not 0.6 < self.alpha < 1.0:
            raise ConfigError(f"filters.alpha must satisfy 0.6 < alpha < 1, got {self.alpha}")
        if self.epsilon < 0:
            raise ConfigError(f"filters.epsilon must be >= 0, got {self.epsilon}")
        if self.sekf_scale < 1:
            raise ConfigError(f"filters.sekf_scale must be >= 1, got {self.sekf_scale}")
        if self.sekf_process_var is not None and self.sekf_process_var <= 0:
            raise ConfigError("filters.sekf_process_var must be > 0")
        if not 0 < self.steady_fraction <= 1:
            raise ConfigError("filters.steady_fraction must lie in (0, 1]")
        if not self.divergence_error > 0:
            raise ConfigError("filters.divergence_error must be > 0")
        if self.divergence_burn_in < 0:
            raise ConfigError("filters.divergence_burn_in must be >= 0")
        if not self.filters:
            raise ConfigError("filters.names must not be empty")


def scenario_from_dict(data) -> ScenarioConfig:
    try:
        motion = data.get("motion", {})
        meas = data.get("measurement", {})
        bias = data.get("bias", {"kind": "exponential", "params": {"mean": 500.0}})
        filt = data.get("filters", {})
        anchors = tuple(
            Anchor(int(a["id"]), (float(a["position"][0]), float(a["position"][1])))
            for a in data.get("anchors", [])
        ) or SQUARE_ANCHORS
        process_var = filt.get("sekf_process_var")

        return ScenarioConfig(
            name=str(data["name"]),
            anchors=anchors,
            dt=float(motion.get("dt", 0.2)),
            sigma_w2=float(motion.get("sigma_w2", 0.04)),
            sigma_n=float(meas.get("sigma_n", 10.0)),
            bias=BiasModel(bias["kind"], dict(bias.get("params", {}))),
            steps=int(data.get("steps", 500)),
            trials=int(data.get("trials", 100)),
            nlos_ids=tuple(int(i) for i in meas.get("nlos_ids", ())),
            fa_ids=tuple(int(i) for i in meas.get("fa_ids", ())),
            md_ids=tuple(int(i) for i in meas.get("md_ids", ())),
            seed=int(data.get("seed", 2024)),
            filters=tuple(str(n) for n in filt.get("names", DEFAULT_FILTERS)),
            alpha=float(filt.get("alpha", 0.7)),
            epsilon=float(filt.get("epsilon", 3.0)),
            sekf_scale=float(filt.get("sekf_scale", 1.5)),
            sekf_process_var=None if process_var is None else float(process_var),
            steady_fraction=float(filt.get("steady_fraction", 0.2)),
            divergence_error=float(filt.get("divergence_error", 1000.0)),
            divergence_burn_in=int(filt.get("divergence_burn_in", 50)),
        )
    except KeyError as e:
        raise ConfigError(f"scenario is missing required key {e}") from e
    except (TypeError, ValueError, IndexError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"scenario has a malformed value: {e}") from e


def scenario_to_dict(config) -> dict:
    filters = {
        "names": list(config.filters),
        "alpha": config.alpha,
        "epsilon": config.epsilon,
        "sekf_scale": config.sekf_scale,
        "steady_fraction": config.steady_fraction,
        "divergence_error": config.divergence_error,
        "divergence_burn_in": config.divergence_burn_in,
    }
    if config.sekf_process_var is not None:
        filters["sekf_process_var"] = config.sekf_process_var

    return {
        "name": config.name,
        "seed": config.seed,
        "steps": config.steps,
        "trials": config.trials,
        "motion": {"dt": config.dt, "sigma_w2": config.sigma_w2},
        "measurement": {
            "sigma_n": config.sigma_n,
            "nlos_ids": list(config.nlos_ids),
            "fa_ids": list(config.fa_ids),
            "md_ids": list(config.md_ids),
        },
        "bias": {"kind": config.bias.kind.value, "params": dict(config.bias.params)},
        "filters": filters,
        "anchors": [{"id": a.id, "position": list(a.position)} for a in config.anchors],
    }


def parse_scenario(text) -> ScenarioConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"scenario is not valid TOML: {e}") from e
    return scenario_from_dict(data)


def emit_scenario(config) -> str:
    return tomli_w.dumps(scenario_to_dict(config))


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    config = parse_scenario(path.read_text(encoding="utf-8"))
    logger.info(f"Loaded scenario '{config.name}' from {path}")
    return config


def save_scenario(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(emit_scenario(config), encoding="utf-8")
    return path


def reference_scenarios(steps=500, trials=100, seed=2024) -> list[ScenarioConfig]:
    """
    The six exponential-bias scenarios (sigma_n in {10, 100} m x |L_k| in {0, 1, 2}),
    the false-alarm scenario and the missed-detection scenario. NLOS links are the
    lowest anchor ids.
    """
    scenarios = []
    for label, sigma_n in (("small", 10.0), ("large", 100.0)):
        for n_los in (2, 1, 0):
            nlos = tuple(range(1, 5 - n_los))
            scenarios.append(ScenarioConfig(
                name=f"{label}_noise_los{n_los}",
                sigma_n=sigma_n,
                nlos_ids=nlos,
                steps=steps,
                trials=trials,
                seed=seed,
            ))
    # One LOS link (anchor 4), wrongly reported as NLOS.
    scenarios.append(ScenarioConfig(
        name="small_noise_los1_fa",
        sigma_n=10.0,
        nlos_ids=(1, 2, 3),
        fa_ids=(4,),
        steps=steps,
        trials=trials,
        seed=seed,
    ))
    # NLOS anchor 1 wrongly reported as LOS.
    scenarios.append(ScenarioConfig(
        name="small_noise_los1_md",
        sigma_n=10.0,
        nlos_ids=(1, 2, 3),
        md_ids=(1,),
        steps=steps,
        trials=trials,
        seed=seed,
    ))
    return scenarios
