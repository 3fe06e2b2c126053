import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping

from dotenv import dotenv_values

from errors import ConfigError
from learners import LearnerSpec, learner_spec_from_config
from load_env import env_seed, env_threads
from mc_sim import ESTIMATOR_NAMES, PRESETS
from weak_iv import VARIANCE_MODES

COMMANDS = ("estimate", "simulate", "tune", "shift-share")
SECTIONS = ("data", "estimate", "simulate", "learner", "tune", "shift_share")
OUTPUT_FORMATS = ("table", "kv", "csv", "json")
NUISANCE_TARGETS = ("l", "r", "m")

DEFAULTS = {
    "estimate.folds": "3",
    "estimate.level": "0.95",
    "estimate.theta0": "0",
    "estimate.seed": "0",
    "estimate.threads": "1",
    "estimate.variance": "null_imposed",
    "estimate.compare_2sls": "false",
    "estimate.format": "table",
    "simulate.preset": "strong",
    "simulate.n_units": "100",
    "simulate.periods": "10",
    "simulate.replications": "100",
    "simulate.estimators": "dml-lasso",
    "simulate.boosting_rounds": "100",
    "tune.target": "l",
    "tune.candidates": "5",
    "tune.evaluations": "5",
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    data: str | None = None
    unit: str | None = None
    time: str | None = None
    y: str | None = None
    d: str | None = None
    z: tuple[str, ...] = ()
    x: tuple[str, ...] = ()
    cluster: str | None = None
    folds: int = 3
    spec_l: LearnerSpec = field(default_factory=LearnerSpec)
    spec_r: LearnerSpec = field(default_factory=LearnerSpec)
    spec_m: LearnerSpec = field(default_factory=LearnerSpec)
    level: float = 0.95
    theta0: float = 0.0
    seed: int = 0
    threads: int = 1
    variance: str = "null_imposed"
    compare_2sls: bool = False
    out: str | None = None
    format: str = "table"
    preset: str = "strong"
    n_units: int = 100
    periods: int = 10
    replications: int = 100
    estimators: tuple[str, ...] = ("dml-lasso",)
    boosting_rounds: int = 100
    target: str = "l"
    tune_candidates: int = 5
    tune_evaluations: int = 5
    shares: str | None = None
    shifts: str | None = None
    population: str | None = None
    values: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.folds < 2:
            raise ConfigError("K ≥ 2 required")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.format not in OUTPUT_FORMATS:
            raise ConfigError(f"unknown format {self.format!r}")
        if self.variance not in VARIANCE_MODES:
            raise ConfigError(f"unknown AR variance mode {self.variance!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.target not in NUISANCE_TARGETS:
            raise ConfigError(f"unknown tuning target {self.target!r}")
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ConfigError(f"unknown estimator {name!r}")
        if self.replications < 1:
            raise ConfigError("at least one replication is required")

    def require_roles(self):
        missing = [
            role
            for role, value in (
                ("data", self.data),
                ("unit", self.unit),
                ("time", self.time),
                ("y", self.y),
                ("d", self.d),
            )
            if not value
        ]
        if not self.z:
            missing.append("z")
        if missing:
            raise ConfigError(f"missing required settings: {', '.join(missing)}")

    def spec_for(self, target: str) -> LearnerSpec:
        return {"l": self.spec_l, "r": self.spec_r, "m": self.spec_m}[target]


def read_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")

    values = {key: value for key, value in dotenv_values(path).items() if value is not None}
    for key in values:
        section = key.split(".", 1)[0]
        if "." not in key or section not in SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
    return values


def merge_values(
    file_values: Mapping[str, str],
    cli_values: Mapping[str, str | None],
    environ: Mapping[str, str] | None = None,
) -> dict[str, str]:
    """defaults < config file < environment < command line."""
    merged = dict(DEFAULTS)
    merged.update(file_values)

    seed = env_seed(environ)
    threads = env_threads(environ)

    if seed is not None:
        merged["estimate.seed"] = str(seed)
    if threads is not None:
        merged["estimate.threads"] = str(threads)

    merged.update({key: value for key, value in cli_values.items() if value is not None})
    return merged


def _split(text: str | None) -> tuple[str, ...]:
    return tuple(part.strip() for part in (text or "").split(",") if part.strip())


def _typed(values: Mapping[str, str], key: str, kind):
    raw_value = values.get(key)
    try:
        if kind is bool:
            return str(raw_value).strip().lower() in ("true", "1", "yes")
        return kind(raw_value)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid value for {key}: {raw_value!r}") from error


def build_run_config(command: str, values: Mapping[str, str]) -> RunConfig:
    seed = _typed(values, "estimate.seed", int)
    # lasso on user data fits the extended dictionary unless learner.dictionary=false
    base = learner_spec_from_config(values, "learner", LearnerSpec(dictionary=True, seed=seed))
    specs = {
        target: learner_spec_from_config(values, f"learner.{target}", base)
        for target in NUISANCE_TARGETS
    }

    return RunConfig(
        command=command,
        data=values.get("data.path"),
        unit=values.get("data.unit"),
        time=values.get("data.time"),
        y=values.get("data.y"),
        d=values.get("data.d"),
        z=_split(values.get("data.z")),
        x=_split(values.get("data.x")),
        cluster=values.get("data.cluster") or None,
        folds=_typed(values, "estimate.folds", int),
        spec_l=specs["l"],
        spec_r=specs["r"],
        spec_m=specs["m"],
        level=_typed(values, "estimate.level", float),
        theta0=_typed(values, "estimate.theta0", float),
        seed=seed,
        threads=_typed(values, "estimate.threads", int),
        variance=values["estimate.variance"],
        compare_2sls=_typed(values, "estimate.compare_2sls", bool),
        out=values.get("estimate.out") or None,
        format=values["estimate.format"],
        preset=values["simulate.preset"],
        n_units=_typed(values, "simulate.n_units", int),
        periods=_typed(values, "simulate.periods", int),
        replications=_typed(values, "simulate.replications", int),
        estimators=_split(values.get("simulate.estimators")),
        boosting_rounds=_typed(values, "simulate.boosting_rounds", int),
        target=values["tune.target"],
        tune_candidates=_typed(values, "tune.candidates", int),
        tune_evaluations=_typed(values, "tune.evaluations", int),
        shares=values.get("shift_share.shares"),
        shifts=values.get("shift_share.shifts"),
        population=values.get("shift_share.population"),
        values=tuple(sorted(values.items())),
    )


def config_hash(cfg: RunConfig) -> str:
    payload = asdict(cfg)
    payload.pop("values")
    for key in ("threads", "out", "format"):
        payload.pop(key)
    encoded = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()
