import logging
from dataclasses import dataclass, replace
from itertools import product
from typing import Sequence

import numpy as np
from sklearn.model_selection import KFold

from learners import LearnerSpec, fit_learner

logger = logging.getLogger("tuning")

# Admissible search ranges; integers are drawn without replacement.
TUNING_RANGES = {
    "boosting": {"l2_lambda": (0.0, 2.0), "maxdepth": (2, 10)},
    "mlp": {"size": (2, 10), "decay": (0.0, 0.5)},
}


@dataclass(frozen=True)
class CandidateScore:
    params: dict
    cv_mse: float


@dataclass(frozen=True)
class TuningResult:
    spec: LearnerSpec
    evaluations: tuple[CandidateScore, ...]

    @property
    def best(self) -> CandidateScore:
        return min(self.evaluations, key=lambda score: score.cv_mse)


def cv_mse(
    spec: LearnerSpec, x: np.ndarray, y: np.ndarray, cv_folds: int = 5, seed: int = 0
) -> float:
    folds = KFold(n_splits=cv_folds, shuffle=True, random_state=seed)
    errors = []
    for train, test in folds.split(x):
        model = fit_learner(spec, x[train], y[train], seed=seed)
        errors.append(np.mean((y[test] - model.predict(x[test])) ** 2))
    return float(np.mean(errors))


def draw_candidates(
    kind: str, n_candidates_per_hp: int, n_evaluations: int, seed: int
) -> list[dict]:
    ranges = TUNING_RANGES.get(kind, {})
    if not ranges:
        return [{}]

    rng = np.random.default_rng(seed)
    values_per_hp = {}
    for name, (low, high) in ranges.items():
        if isinstance(low, int):
            pool = np.arange(low, high + 1)
            count = min(n_candidates_per_hp, len(pool))
            values_per_hp[name] = sorted(int(v) for v in rng.choice(pool, count, replace=False))
        else:
            values_per_hp[name] = sorted(float(v) for v in rng.uniform(low, high, n_candidates_per_hp))

    names = list(values_per_hp)
    grid = [dict(zip(names, combo)) for combo in product(*values_per_hp.values())]
    order = rng.permutation(len(grid))
    return [grid[index] for index in order[:n_evaluations]]


def evaluate_candidates(
    spec: LearnerSpec,
    x: np.ndarray,
    y: np.ndarray,
    candidates: Sequence[dict],
    cv_folds: int = 5,
    seed: int = 0,
    logger: logging.Logger = logger,
) -> list[CandidateScore]:
    scores = []
    for params in candidates:
        candidate = replace(spec, tune=False, **params)
        score = CandidateScore(dict(params), cv_mse(candidate, x, y, cv_folds, seed))
        logger.info("Candidate %s: CV MSE %.6g", params or "(defaults)", score.cv_mse)
        scores.append(score)
    return scores


def tune_learner(
    spec: LearnerSpec,
    x: np.ndarray,
    y: np.ndarray,
    n_candidates_per_hp: int = 5,
    n_evaluations: int = 5,
    cv_folds: int = 5,
    seed: int = 0,
    candidates: Sequence[dict] | None = None,
    logger: logging.Logger = logger,
) -> TuningResult:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    if candidates is None:
        candidates = draw_candidates(spec.kind, n_candidates_per_hp, n_evaluations, seed)

    scores = evaluate_candidates(spec, x, y, candidates, cv_folds, seed, logger)
    # first minimum wins ties
    best_index = int(np.argmin([score.cv_mse for score in scores]))
    selected = replace(spec, tune=False, **scores[best_index].params)

    logger.info(
        "Selected %s candidate %s with CV MSE %.6g",
        spec.kind,
        scores[best_index].params or "(defaults)",
        scores[best_index].cv_mse,
    )
    return TuningResult(selected, tuple(scores))


def grid_search_tune(
    spec: LearnerSpec,
    x: np.ndarray,
    y: np.ndarray,
    n_candidates_per_hp: int = 5,
    n_evaluations: int = 5,
    cv_folds: int = 5,
    seed: int = 0,
    candidates: Sequence[dict] | None = None,
    logger: logging.Logger = logger,
) -> LearnerSpec:
    return tune_learner(
        spec,
        x,
        y,
        n_candidates_per_hp=n_candidates_per_hp,
        n_evaluations=n_evaluations,
        cv_folds=cv_folds,
        seed=seed,
        candidates=candidates,
        logger=logger,
    ).spec
