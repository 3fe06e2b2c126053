import argparse
import logging
import os
import platform
import sys

import joblib
import numpy as np
import pandas as pd
import scipy
import sklearn

import load_env
from baseline_2sls import estimate_2sls_fd
from config import (
    NUISANCE_TARGETS,
    RunConfig,
    build_run_config,
    config_hash,
    merge_values,
    read_config_file,
)
from dml_core import PanelIvDml
from errors import ConfigError, NumericalError, PanelDataError, ReplicationError
from learners import LEARNER_KINDS, learner_spec_to_config
from mc_sim import ESTIMATOR_NAMES, PRESETS, make_estimator, preset_config, run_replications
from panel_data import PanelSchema, first_difference, load_panel, shift_share_frame
from report_store import (
    ReportStore,
    estimate_to_dict,
    mc_report_to_dict,
    render_estimate_table,
    render_kv,
    render_mc_csv,
    render_mc_table,
)
from run_outcome import RunOutcome
from tuning import tune_learner
from weak_iv import VARIANCE_MODES, weak_iv_report

load_env.load()


def configure_logging():
    logging.basicConfig(
        level=logging.DEBUG if os.getenv("LOG_LEVEL") == "DEBUG" else logging.INFO,
        format="\n%(name)s → %(levelname)s: %(message)s\n",
    )


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value run configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--out", help="output path; stdout when omitted")
    parser.add_argument("--format", choices=("table", "kv", "csv", "json"))


def _add_data(parser: argparse.ArgumentParser):
    parser.add_argument("--data", help="panel CSV with a header row")
    parser.add_argument("--unit")
    parser.add_argument("--time")
    parser.add_argument("--y")
    parser.add_argument("--d")
    parser.add_argument("--z", action="append", help="instrument column (repeatable)")
    parser.add_argument("--x", action="append", help="covariate column (repeatable)")
    parser.add_argument("--cluster")


def _add_learner(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--learner",
        choices=LEARNER_KINDS,
        help="learner for every nuisance; lasso uses the extended dictionary",
    )
    parser.add_argument("--tune", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pivdml",
        description="Panel IV double machine learning with weak-instrument diagnostics",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    estimate = subparsers.add_parser("estimate", help="estimate on panel data")
    _add_common(estimate)
    _add_data(estimate)
    _add_learner(estimate)
    estimate.add_argument("--folds", type=int)
    estimate.add_argument("--level", type=float)
    estimate.add_argument("--theta0", type=float)
    estimate.add_argument("--variance", choices=VARIANCE_MODES)
    estimate.add_argument("--compare-2sls", action="store_true", default=None)

    simulate = subparsers.add_parser("simulate", help="run a Monte Carlo preset")
    _add_common(simulate)
    simulate.add_argument("--preset", choices=tuple(PRESETS))
    simulate.add_argument("--n-units", type=int)
    simulate.add_argument("--periods", type=int)
    simulate.add_argument("--replications", type=int)
    simulate.add_argument("--estimator", action="append", choices=ESTIMATOR_NAMES)
    simulate.add_argument("--boosting-rounds", type=int)
    simulate.add_argument("--folds", type=int)
    simulate.add_argument("--level", type=float)
    simulate.add_argument("--theta0", type=float, help="null value for the AR test")

    tune = subparsers.add_parser("tune", help="grid-search a nuisance learner")
    _add_common(tune)
    _add_data(tune)
    _add_learner(tune)
    tune.add_argument("--target", choices=NUISANCE_TARGETS)
    tune.add_argument("--candidates", type=int, help="values drawn per hyperparameter")
    tune.add_argument("--evaluations", type=int, help="candidates evaluated")

    shift_share = subparsers.add_parser("shift-share", help="build a shift-share instrument")
    _add_common(shift_share)
    shift_share.add_argument("--shares")
    shift_share.add_argument("--shifts")
    shift_share.add_argument("--population")

    return parser


def _joined(values: list[str] | None) -> str | None:
    return ",".join(values) if values else None


def _text(value) -> str | None:
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def cli_values(args: argparse.Namespace) -> dict[str, str | None]:
    option = lambda name: getattr(args, name, None)  # noqa: E731
    values = {
        "data.path": option("data"),
        "data.unit": option("unit"),
        "data.time": option("time"),
        "data.y": option("y"),
        "data.d": option("d"),
        "data.z": _joined(option("z")),
        "data.x": _joined(option("x")),
        "data.cluster": option("cluster"),
        "estimate.folds": option("folds"),
        "estimate.level": option("level"),
        "estimate.theta0": option("theta0"),
        "estimate.seed": option("seed"),
        "estimate.threads": option("threads"),
        "estimate.variance": option("variance"),
        "estimate.compare_2sls": option("compare_2sls"),
        "estimate.out": option("out"),
        "estimate.format": option("format"),
        "learner.kind": option("learner"),
        "learner.tune": option("tune"),
        "simulate.preset": option("preset"),
        "simulate.n_units": option("n_units"),
        "simulate.periods": option("periods"),
        "simulate.replications": option("replications"),
        "simulate.estimators": _joined(option("estimator")),
        "simulate.boosting_rounds": option("boosting_rounds"),
        "tune.target": option("target"),
        "tune.candidates": option("candidates"),
        "tune.evaluations": option("evaluations"),
        "shift_share.shares": option("shares"),
        "shift_share.shifts": option("shifts"),
        "shift_share.population": option("population"),
    }
    return {key: _text(value) for key, value in values.items()}


def log_run_info(cfg: RunConfig, logger: logging.Logger):
    logger.info("Command %s, seed %s, config hash %s", cfg.command, cfg.seed, config_hash(cfg))
    logger.info(
        "Versions: python %s, numpy %s, pandas %s, scipy %s, scikit-learn %s, joblib %s",
        platform.python_version(),
        np.__version__,
        pd.__version__,
        scipy.__version__,
        sklearn.__version__,
        joblib.__version__,
    )


def load_differenced(cfg: RunConfig):
    cfg.require_roles()
    schema = PanelSchema(
        unit=cfg.unit,
        time=cfg.time,
        y=cfg.y,
        d=cfg.d,
        z=cfg.z,
        x=cfg.x,
        cluster=cfg.cluster,
    )
    data = load_panel(cfg.data, schema, logger=logging.getLogger("panel_data"))
    return first_difference(data, logger=logging.getLogger("panel_data"))


def cmd_estimate(cfg: RunConfig, logger: logging.Logger) -> RunOutcome:
    if cfg.format == "csv":
        raise ConfigError("csv output is only available for simulate")

    fd = load_differenced(cfg)
    model = PanelIvDml(
        cfg.spec_l,
        cfg.spec_r,
        cfg.spec_m,
        n_folds=cfg.folds,
        seed=cfg.seed,
        n_jobs=cfg.threads,
        logger=logging.getLogger("dml"),
    )
    estimate = model.fit(fd)
    report = weak_iv_report(
        estimate,
        theta0=cfg.theta0,
        level=cfg.level,
        variance=cfg.variance,
        logger=logging.getLogger("weak_iv"),
    )

    comparison = None
    if cfg.compare_2sls:
        comparison = estimate_2sls_fd(
            fd, theta0=cfg.theta0, level=cfg.level, variance=cfg.variance
        )

    store = ReportStore(cfg.out, logging.getLogger("report_store"))
    if cfg.format == "table":
        text = render_estimate_table(estimate, report, fd.z_names)
        if comparison is not None:
            text += "\n" + render_estimate_table(comparison, comparison.weak_iv, fd.z_names)
        store.write_text(text)
    else:
        payload = estimate_to_dict(estimate, report)
        if comparison is not None:
            payload["comparison"] = estimate_to_dict(comparison, comparison.weak_iv)
        payload["run"] = {"seed": cfg.seed, "config_hash": config_hash(cfg)}
        if cfg.format == "kv":
            store.write_text(render_kv(payload))
        else:
            store.write_json(payload)

    logger.info("Estimate finished: theta %.6g, CS %s", estimate.theta, report.cs.regime.value)
    return RunOutcome.SUCCESS


def cmd_simulate(cfg: RunConfig, logger: logging.Logger) -> RunOutcome:
    dgp = preset_config(cfg.preset, n_units=cfg.n_units, n_periods=cfg.periods, seed=cfg.seed)
    learner_values = {key: value for key, value in cfg.values if key.startswith("learner.")}
    estimators = {
        name: make_estimator(
            name,
            n_folds=cfg.folds,
            boosting_rounds=cfg.boosting_rounds,
            theta0=cfg.theta0,
            level=cfg.level,
            learner_values=learner_values,
        )
        for name in cfg.estimators
    }
    report = run_replications(
        dgp,
        cfg.replications,
        estimators,
        n_folds=cfg.folds,
        seed=cfg.seed,
        n_jobs=cfg.threads,
        logger=logging.getLogger("mc_sim"),
    )

    store = ReportStore(cfg.out, logging.getLogger("report_store"))
    if cfg.format == "table":
        store.write_text(render_mc_table(report))
    elif cfg.format == "csv":
        store.write_text(render_mc_csv(report))
    else:
        payload = mc_report_to_dict(report)
        payload["run"] = {"seed": cfg.seed, "config_hash": config_hash(cfg)}
        if cfg.format == "kv":
            store.write_text(render_kv(payload))
        else:
            store.write_json(payload)

    logger.info("Simulation finished: %s estimators, %s replications", len(estimators), cfg.replications)
    return RunOutcome.SUCCESS


def cmd_tune(cfg: RunConfig, logger: logging.Logger) -> RunOutcome:
    if cfg.format == "csv":
        raise ConfigError("csv output is only available for simulate")

    fd = load_differenced(cfg)
    targets = {"l": fd.ytilde, "r": fd.dtilde, "m": fd.ztilde[:, 0]}
    if cfg.target == "m" and fd.n_instruments > 1:
        logger.info("Tuning m on the first instrument %s", fd.z_names[0])

    spec = cfg.spec_for(cfg.target)
    result = tune_learner(
        spec,
        fd.xpair,
        targets[cfg.target],
        n_candidates_per_hp=cfg.tune_candidates,
        n_evaluations=cfg.tune_evaluations,
        cv_folds=spec.cv_folds,
        seed=cfg.seed,
        logger=logging.getLogger("tuning"),
    )

    store = ReportStore(cfg.out, logging.getLogger("report_store"))
    selected = learner_spec_to_config(result.spec, prefix=f"learner.{cfg.target}")
    if cfg.format == "json":
        store.write_json(
            {
                "target": cfg.target,
                "selected": selected,
                "evaluations": [
                    {"params": score.params, "cv_mse": score.cv_mse}
                    for score in result.evaluations
                ],
            }
        )
    else:
        lines = [
            f"# candidate {score.params or 'defaults'}: CV MSE {score.cv_mse:.6g}"
            for score in result.evaluations
        ]
        lines += [f"{key}={value}" for key, value in selected.items()]
        store.write_text("\n".join(lines) + "\n")

    return RunOutcome.SUCCESS


def cmd_shift_share(cfg: RunConfig, logger: logging.Logger) -> RunOutcome:
    if not (cfg.shares and cfg.shifts and cfg.population):
        raise ConfigError("shift-share needs --shares, --shifts and --population")

    frame = shift_share_frame(cfg.shares, cfg.shifts, cfg.population)
    ReportStore(cfg.out, logging.getLogger("report_store")).write_text(
        frame.to_csv(index=False, lineterminator="\n")
    )
    logger.info("Built shift-share instrument for %s region-periods", len(frame))
    return RunOutcome.SUCCESS


COMMAND_HANDLERS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "tune": cmd_tune,
    "shift-share": cmd_shift_share,
}


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    logger = logging.getLogger("cli")
    args = build_parser().parse_args(argv)

    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = build_run_config(args.command, merge_values(file_values, cli_values(args)))
        log_run_info(cfg, logger)
        outcome = COMMAND_HANDLERS[cfg.command](cfg, logger)
    except (PanelDataError, ConfigError) as error:
        logger.error("%s failed with invalid input: %s", args.command, error)
        outcome = RunOutcome.DATA_ERROR
    except (NumericalError, ReplicationError, np.linalg.LinAlgError) as error:
        logger.error("%s failed numerically: %s", args.command, error)
        outcome = RunOutcome.NUMERICAL_FAILURE

    return outcome.value


if __name__ == "__main__":
    sys.exit(main())
