import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import asdict

import numpy as np
import pandas as pd

from dml_core import DmlEstimate
from mc_sim import McReport
from weak_iv import ArConfidenceSet, WeakIvReport

MC_COLUMNS = {
    "estimator": "Estimator",
    "n_units": "N",
    "bias": "Bias",
    "rmse": "RMSE",
    "se_sd": "SE/SD",
    "coverage": "Cover",
    "rmse_l": "RMSE l",
    "rmse_r": "RMSE r",
    "rmse_m": "RMSE m",
    "mean_f": "F",
    "freq_f_16_3": "F>16.3",
    "freq_f_104_7": "F>104.7",
    "freq_ar_reject": "p<0.05",
    "freq_bounded": "Bounded",
    "freq_real_line": "Real Line",
    "freq_disjoint": "Disjoint",
    "freq_includes_zero": "Includes 0",
    "failures": "Fail",
}


class ReportStore:
    """Writes rendered reports atomically, or to stdout when no path is set."""

    def __init__(self, path: str | None = None, logger: logging.Logger | None = None):
        self.path = os.path.abspath(path) if path else None
        self.logger = logger or logging.getLogger("report_store")

    def write_text(self, content: str) -> str | None:
        if self.path is None:
            sys.stdout.write(content)
            sys.stdout.flush()
            return None

        self._persist(content)
        self.logger.info("Wrote report to %s", self.path)
        return self.path

    def write_json(self, payload: dict) -> str | None:
        return self.write_text(json.dumps(clean(payload), ensure_ascii=True, indent=2) + "\n")

    def _persist(self, content: str):
        directory = os.path.dirname(self.path)
        os.makedirs(directory, exist_ok=True)

        with tempfile.NamedTemporaryFile(
            mode="w",
            encoding="utf-8",
            dir=directory,
            delete=False,
            newline="",
        ) as handle:
            handle.write(content)
            handle.flush()
            os.fsync(handle.fileno())
            temp_path = handle.name

        os.replace(temp_path, self.path)


def clean(value, finite_only: bool = True):
    """JSON-safe copy: arrays to lists, non-finite floats to None."""
    if isinstance(value, dict):
        return {key: clean(item, finite_only) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean(item, finite_only) for item in value]
    if isinstance(value, np.ndarray):
        return clean(value.tolist(), finite_only)
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) or not finite_only else None
    return value


def flatten(value, prefix: str = "") -> dict[str, object]:
    """Dotted keys for nested payloads; list items are keyed by position."""
    if isinstance(value, dict):
        items = value.items()
    elif isinstance(value, list) and any(isinstance(item, (dict, list)) for item in value):
        items = ((str(index), item) for index, item in enumerate(value))
    else:
        return {prefix: value}

    flat = {}
    for key, item in items:
        flat.update(flatten(item, f"{prefix}.{key}" if prefix else str(key)))
    return flat


def render_kv(payload: dict) -> str:
    lines = []
    for key, value in flatten(clean(payload, finite_only=False)).items():
        if isinstance(value, list):
            value = ",".join(str(item) for item in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def cs_to_dict(cs: ArConfidenceSet) -> dict:
    return {
        "regime": cs.regime.value,
        "intervals": [[low, high] for low, high in cs.intervals],
        "roots": list(cs.roots),
        "level": cs.level,
        "includes_zero": cs.includes_zero,
    }


def weak_iv_to_dict(report: WeakIvReport) -> dict:
    return {
        "f_stat": report.f_stat,
        "f_exceeds_10": report.f_exceeds_10,
        "f_exceeds_16_3": report.f_exceeds_16_3,
        "f_exceeds_104_7": report.f_exceeds_104_7,
        "theta0": report.theta0,
        "ar_stat": report.ar_stat,
        "ar_pvalue": report.ar_pvalue,
        "level": report.level,
        "variance": report.variance,
        "cs": cs_to_dict(report.cs),
    }


def estimate_to_dict(estimate: DmlEstimate, report: WeakIvReport | None = None) -> dict:
    payload = {
        "estimator": estimate.estimator,
        "theta": estimate.theta,
        "se_theta": estimate.se_theta,
        "sigma_theta": estimate.sigma_theta,
        "pi": estimate.pi,
        "se_pi": np.sqrt(np.diag(estimate.sigma_pi)),
        "delta": estimate.delta,
        "se_delta": np.sqrt(np.diag(estimate.sigma_delta)),
        "sigma_pi": estimate.sigma_pi,
        "sigma_delta": estimate.sigma_delta,
        "sigma_delta_pi": estimate.sigma_delta_pi,
        "sigma_delta_fixed": estimate.sigma_delta_fixed,
        "n_units": estimate.n_units,
        "n_rows": estimate.n_rows,
        "n_clusters": estimate.n_clusters,
        "n_folds": estimate.n_folds,
        "model_rmse": estimate.model_rmse,
        "rmse_l": estimate.rmse_l,
        "rmse_r": estimate.rmse_r,
        "rmse_m": estimate.rmse_m,
        "weak_denominator": estimate.weak_denominator,
        "folds": [
            {
                "fold": fold.fold,
                "n_units": fold.n_units,
                "n_rows": fold.n_rows,
                "theta": fold.theta,
                "pi": fold.pi,
                "delta": fold.delta,
                "weak_denominator": fold.weak_denominator,
            }
            for fold in estimate.fold_estimates
        ],
    }
    if report is not None:
        payload["weak_iv"] = weak_iv_to_dict(report)
    return payload


def _fmt(value: float, digits: int = 6) -> str:
    return f"{value:.{digits}g}" if math.isfinite(value) else "nan"


def render_estimate_table(
    estimate: DmlEstimate,
    report: WeakIvReport | None = None,
    instrument_names: tuple[str, ...] = (),
) -> str:
    names = instrument_names or tuple(f"z{j + 1}" for j in range(estimate.n_instruments))
    se_pi = np.sqrt(np.diag(estimate.sigma_pi))
    se_delta = np.sqrt(np.diag(estimate.sigma_delta))
    lines = [
        f"Estimator    {estimate.estimator}",
        f"Sample       units {estimate.n_units}, rows {estimate.n_rows}, "
        f"clusters {estimate.n_clusters}, folds {estimate.n_folds}",
        f"theta        {_fmt(estimate.theta):>12}   se {_fmt(estimate.se_theta)}",
    ]
    for name, pi, se_p, delta, se_d in zip(names, estimate.pi, se_pi, estimate.delta, se_delta):
        lines.append(f"pi[{name}]".ljust(13) + f"{_fmt(pi):>12}   se {_fmt(se_p)}")
        lines.append(f"delta[{name}]".ljust(13) + f"{_fmt(delta):>12}   se {_fmt(se_d)}")
    lines.append(f"Model RMSE   {_fmt(estimate.model_rmse):>12}")
    lines.append(
        f"RMSE l/r/m   {_fmt(estimate.rmse_l)} / {_fmt(estimate.rmse_r)} / {_fmt(estimate.rmse_m)}"
    )
    if estimate.weak_denominator:
        lines.append("Warning      weak denominator in at least one fold; rely on AR inference")

    if report is not None:
        flags = ", ".join(
            f">{threshold} {'yes' if flag else 'no'}"
            for threshold, flag in (
                ("10", report.f_exceeds_10),
                ("16.3", report.f_exceeds_16_3),
                ("104.7", report.f_exceeds_104_7),
            )
        )
        lines.append(f"F            {_fmt(report.f_stat):>12}   ({flags})")
        lines.append(
            f"AR({_fmt(report.theta0)})".ljust(13)
            + f"{_fmt(report.ar_stat):>12}   p {_fmt(report.ar_pvalue, 4)}"
        )
        lines.append(
            f"AR CS {report.level:.0%}".ljust(13)
            + f"{report.cs.regime.value:>12}   {report.cs.describe()}"
        )
    return "\n".join(lines) + "\n"


def mc_frame(report: McReport) -> pd.DataFrame:
    records = []
    for row in report.rows:
        record = asdict(row)
        record["n_units"] = report.dgp.n_units
        records.append(record)
    frame = pd.DataFrame.from_records(records)
    return frame[list(MC_COLUMNS)]


def render_mc_table(report: McReport) -> str:
    frame = mc_frame(report).rename(columns=MC_COLUMNS)
    header = (
        f"Monte Carlo: N={report.dgp.n_units}, T={report.dgp.n_periods}, "
        f"pi={report.dgp.pi}, theta={report.dgp.theta}, R={report.replications}, "
        f"K={report.n_folds}, seed={report.seed}"
    )
    body = frame.to_string(index=False, float_format=lambda value: f"{value:.3f}", na_rep="nan")
    return f"{header}\n{body}\n"


def render_mc_csv(report: McReport) -> str:
    return mc_frame(report).to_csv(index=False, float_format="%.6f", lineterminator="\n")


def mc_report_to_dict(report: McReport) -> dict:
    return {
        "dgp": asdict(report.dgp),
        "replications": report.replications,
        "n_folds": report.n_folds,
        "seed": report.seed,
        "rows": [asdict(row) for row in report.rows],
    }
