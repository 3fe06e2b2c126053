import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm

from baseline_2sls import estimate_2sls_fd
from dml_core import DmlEstimate, PanelIvDml
from errors import ConfigError, ReplicationError
from learners import LearnerSpec, learner_spec_from_config
from panel_data import DifferencedSample, PanelDataset, first_difference
from weak_iv import ArConfidenceSet, CsRegime, WeakIvReport, weak_iv_report

logger = logging.getLogger("mc_sim")

MAX_FAILURE_SHARE = 0.05
ESTIMATOR_NAMES = (
    "2sls",
    "2sls-controls",
    "dml-lasso",
    "dml-boosting",
    "dml-mlp",
    "dml-linear",
)

# 2sls is the plain differenced IV benchmark; 2sls-controls partials out (X_t, X_{t-1})
TSLS_CONTROLS = {"2sls": (), "2sls-controls": None}


@dataclass(frozen=True)
class DgpConfig:
    n_units: int = 100
    n_periods: int = 10
    n_covariates: int = 30
    theta: float = 0.5
    pi: float = 0.8
    rho: float = 0.9
    sigma_ur: float = 0.6
    var_v: float = 0.25
    coef_l: float = 0.5
    coef_r: float = 0.5
    coef_m: float = 0.5
    alpha_in_d: float = 0.5
    gamma_mean: float = 3.0
    gamma_var: float = 9.0
    fe_z_var: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.n_periods < 2:
            raise ConfigError("the simulated panel needs T ≥ 2")
        if self.n_units < 1:
            raise ConfigError("the simulated panel needs at least one unit")
        if self.n_covariates < 3:
            raise ConfigError("the nuisance design uses x1 and x3, so p ≥ 3")
        if not -1 <= self.rho <= 1 or not -1 <= self.sigma_ur <= 1:
            raise ConfigError("rho and sigma_ur must lie in [-1, 1]")


PRESETS = {
    "strong": DgpConfig(pi=0.8),
    "weak": DgpConfig(pi=0.001),
}


def preset_config(name: str, **overrides) -> DgpConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def dgp_truth(cfg: DgpConfig, x: np.ndarray, target: str = "l") -> np.ndarray:
    coef = {"l": cfg.coef_l, "r": cfg.coef_r, "m": cfg.coef_m}[target]
    x1 = x[..., 0]
    x3 = x[..., 2]
    return coef * x1 + coef * x3 + coef * x1 * (x1 > 0)


def dgp_generate(cfg: DgpConfig) -> PanelDataset:
    rng = np.random.default_rng(cfg.seed)
    n, t, p = cfg.n_units, cfg.n_periods, cfg.n_covariates

    gamma_x = rng.normal(cfg.gamma_mean, np.sqrt(cfg.gamma_var), n)
    a = rng.normal(0.0, 1.0, n)
    alpha = cfg.rho * gamma_x + np.sqrt(1.0 - cfg.rho**2) * a
    gamma_z = rng.normal(0.0, np.sqrt(cfg.fe_z_var), n)

    x = gamma_x[:, None, None] + rng.normal(0.0, 1.0, (n, t, p))
    covariance = np.array(
        [
            [1.0, cfg.sigma_ur, 0.0],
            [cfg.sigma_ur, 1.0, 0.0],
            [0.0, 0.0, cfg.var_v],
        ]
    )
    errors = rng.multivariate_normal(np.zeros(3), covariance, (n, t))
    u, r, v = errors[..., 0], errors[..., 1], errors[..., 2]

    z = dgp_truth(cfg, x, "m") + gamma_z[:, None] + v
    d = z * cfg.pi + dgp_truth(cfg, x, "r") + cfg.alpha_in_d * alpha[:, None] + r
    y = d * cfg.theta + dgp_truth(cfg, x, "l") + alpha[:, None] + u

    units = np.repeat(np.arange(n), t)
    return PanelDataset(
        units=units,
        times=np.tile(np.arange(1, t + 1), n),
        y=y.ravel(),
        d=d.ravel(),
        z=z.reshape(-1, 1),
        x=x.reshape(n * t, p),
        cluster=units,
        z_names=("z",),
        x_names=tuple(f"x{j + 1}" for j in range(p)),
    )


@dataclass(frozen=True)
class ReplicationResult:
    theta: float
    se: float
    rmse_l: float
    rmse_r: float
    rmse_m: float
    f_stat: float
    ar_pvalue: float
    cs: ArConfidenceSet

    @classmethod
    def from_estimate(cls, estimate: DmlEstimate, report: WeakIvReport):
        return cls(
            theta=estimate.theta,
            se=estimate.se_theta,
            rmse_l=estimate.rmse_l,
            rmse_r=estimate.rmse_r,
            rmse_m=estimate.rmse_m,
            f_stat=report.f_stat,
            ar_pvalue=report.ar_pvalue,
            cs=report.cs,
        )


Estimator = Callable[[DifferencedSample, int, logging.Logger], ReplicationResult]


def learner_specs(
    name: str, boosting_rounds: int = 100, learner_values: Mapping[str, str] | None = None
) -> dict[str, LearnerSpec]:
    """Per-nuisance specs of a DML estimator with learner.* overrides applied."""
    base_specs = {
        "dml-lasso": LearnerSpec(kind="lasso", dictionary=True, interactions=False),
        "dml-boosting": LearnerSpec(kind="boosting", nrounds=boosting_rounds),
        "dml-mlp": LearnerSpec(kind="mlp", size=5, decay=0.1),
        "dml-linear": LearnerSpec(kind="linear"),
    }
    if name not in base_specs:
        raise ConfigError(
            f"unknown estimator {name!r}; expected one of {', '.join(ESTIMATOR_NAMES)}"
        )

    learner_values = dict(learner_values or {})
    kind_keys = sorted(key for key in learner_values if key.rsplit(".", 1)[-1] == "kind")
    if kind_keys:
        raise ConfigError(
            f"simulate takes the learner from the estimator name, not {', '.join(kind_keys)}"
        )

    base = learner_spec_from_config(learner_values, "learner", base_specs[name])
    return {
        target: learner_spec_from_config(learner_values, f"learner.{target}", base)
        for target in ("l", "r", "m")
    }


def make_estimator(
    name: str,
    n_folds: int = 3,
    boosting_rounds: int = 100,
    n_jobs: int = 1,
    theta0: float = 0.0,
    level: float = 0.95,
    learner_values: Mapping[str, str] | None = None,
) -> Estimator:
    if name in TSLS_CONTROLS:
        controls = TSLS_CONTROLS[name]

        def run_2sls(fd, seed, logger):
            estimate = estimate_2sls_fd(
                fd, controls=controls, theta0=theta0, level=level, logger=logger
            )
            return ReplicationResult.from_estimate(estimate, estimate.weak_iv)

        return run_2sls

    specs = learner_specs(name, boosting_rounds, learner_values)

    def run_dml(fd, seed, logger):
        seeded = {target: replace(spec, seed=seed) for target, spec in specs.items()}
        model = PanelIvDml(
            seeded["l"],
            seeded["r"],
            seeded["m"],
            n_folds=n_folds,
            seed=seed,
            n_jobs=n_jobs,
            logger=logger,
        )
        estimate = model.fit(fd)
        report = weak_iv_report(estimate, theta0=theta0, level=level, logger=logger)
        return ReplicationResult.from_estimate(estimate, report)

    return run_dml


@dataclass(frozen=True)
class McRow:
    estimator: str
    replications: int
    failures: int
    bias: float
    rmse: float
    se_sd: float
    mean_se: float
    coverage: float
    rmse_l: float
    rmse_r: float
    rmse_m: float
    mean_f: float
    freq_f_16_3: float
    freq_f_104_7: float
    freq_ar_reject: float
    freq_bounded: float
    freq_real_line: float
    freq_disjoint: float
    freq_includes_zero: float


@dataclass(frozen=True)
class McReport:
    dgp: DgpConfig
    replications: int
    n_folds: int
    seed: int
    rows: tuple[McRow, ...]

    def row(self, estimator: str) -> McRow:
        for row in self.rows:
            if row.estimator == estimator:
                return row
        raise KeyError(estimator)


def summarize_replications(
    estimator: str, theta0: float, results: Sequence[ReplicationResult], failures: int = 0
) -> McRow:
    thetas = np.array([result.theta for result in results])
    ses = np.array([result.se for result in results])
    critical = norm.ppf(0.975)

    spread = np.std(thetas, ddof=1) if len(thetas) > 1 else float("nan")
    mean_se = float(np.mean(ses))
    se_sd = mean_se / spread if spread > 0 else float("nan")

    def share(flags) -> float:
        return float(np.mean(flags))

    return McRow(
        estimator=estimator,
        replications=len(results),
        failures=failures,
        bias=float(np.mean(thetas) - theta0),
        rmse=float(np.sqrt(np.mean((thetas - theta0) ** 2))),
        se_sd=float(se_sd),
        mean_se=mean_se,
        coverage=share(np.abs(thetas - theta0) <= critical * ses),
        rmse_l=float(np.mean([result.rmse_l for result in results])),
        rmse_r=float(np.mean([result.rmse_r for result in results])),
        rmse_m=float(np.mean([result.rmse_m for result in results])),
        mean_f=float(np.mean([result.f_stat for result in results])),
        freq_f_16_3=share([result.f_stat > 16.3 for result in results]),
        freq_f_104_7=share([result.f_stat > 104.7 for result in results]),
        freq_ar_reject=share([result.ar_pvalue < 0.05 for result in results]),
        freq_bounded=share([result.cs.regime == CsRegime.BOUNDED for result in results]),
        freq_real_line=share([result.cs.regime == CsRegime.REAL_LINE for result in results]),
        freq_disjoint=share([result.cs.regime == CsRegime.DISJOINT for result in results]),
        freq_includes_zero=share([result.cs.includes_zero for result in results]),
    )


def run_replications(
    cfg: DgpConfig,
    replications: int,
    estimators: Mapping[str, Estimator] | Sequence[str],
    n_folds: int = 3,
    seed: int | None = None,
    n_jobs: int = 1,
    boosting_rounds: int = 100,
    logger: logging.Logger = logger,
) -> McReport:
    if replications < 1:
        raise ConfigError("at least one replication is required")

    if not isinstance(estimators, Mapping):
        estimators = {
            name: make_estimator(name, n_folds=n_folds, boosting_rounds=boosting_rounds)
            for name in estimators
        }

    base_seed = cfg.seed if seed is None else seed
    logger.info(
        "Running %s replications of N=%s, T=%s, pi=%s with %s",
        replications,
        cfg.n_units,
        cfg.n_periods,
        cfg.pi,
        ", ".join(estimators),
    )

    def run_one(index: int) -> dict[str, ReplicationResult | None]:
        rep_logger = logger.getChild(f"rep_{index}")
        rep_seed = base_seed + index
        fd = first_difference(dgp_generate(replace(cfg, seed=rep_seed)), logger=rep_logger)

        outcomes = {}
        for name, estimator in estimators.items():
            try:
                outcomes[name] = estimator(fd, rep_seed, rep_logger)
            except Exception as error:
                rep_logger.error("Estimator %s failed: %s", name, error)
                outcomes[name] = None
        return outcomes

    outcomes = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(run_one)(index) for index in range(replications)
    )

    rows = []
    for name in estimators:
        results = [outcome[name] for outcome in outcomes if outcome[name] is not None]
        failures = replications - len(results)
        if failures / replications >= MAX_FAILURE_SHARE:
            raise ReplicationError(
                f"{name}: {failures} of {replications} replications failed"
            )
        if failures:
            logger.warning("%s: excluded %s failed replications", name, failures)
        rows.append(summarize_replications(name, cfg.theta, results, failures))

    return McReport(
        dgp=cfg,
        replications=replications,
        n_folds=n_folds,
        seed=base_seed,
        rows=tuple(rows),
    )
