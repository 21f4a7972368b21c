"""End-to-end TMLE and CV-TMLE of (ATE, VTE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ObservedDataset
from .inference import DEFAULT_DRAWS, EstimateReport, build_report
from .learners import LearnerSpec
from .nuisance import CROSS_FITTED, FULL_SAMPLE, NuisancePredictions, fit_nuisance, make_folds
from .targeting import TargetedFit, run_targeting

DEFAULT_Q_LIBRARY = (
    LearnerSpec("mean"),
    LearnerSpec("logistic-main"),
    LearnerSpec("logistic-main-interactions"),
)
DEFAULT_G_LIBRARY = (LearnerSpec("mean"), LearnerSpec("logistic-main"))


@dataclass
class TmleResult:
    nuisance: NuisancePredictions
    fit: TargetedFit
    report: EstimateReport

    @property
    def psi(self):
        return self.fit.psi


def targeted_report(
    dataset: ObservedDataset,
    nuisance: NuisancePredictions,
    *,
    estimator: str = "tmle",
    d_eps: float = 1e-4,
    max_iter: int = 20_000,
    alpha: float = 0.05,
    include_sqrt: bool = False,
    draws: int = DEFAULT_DRAWS,
    seed: int | None = 0,
) -> TmleResult:
    """Target given initial predictions and assemble the report."""
    fit = run_targeting(dataset, nuisance, d_eps=d_eps, max_iter=max_iter)
    report = build_report(
        fit.eic, fit.psi, dataset.n, alpha, dataset.scale, include_sqrt,
        estimator=estimator, draws=draws, seed=seed,
    )
    if fit.stopped_reason == "max-iter":
        report.notes.append(f"targeting stopped at the iteration cap ({max_iter})")
    return TmleResult(nuisance, fit, report)


def estimate(
    dataset: ObservedDataset,
    estimator: str = "cv-tmle",
    *,
    library_q=DEFAULT_Q_LIBRARY,
    library_g=DEFAULT_G_LIBRARY,
    known_g=None,
    folds: int = 10,
    ensemble_folds: int = 10,
    g_trunc: float = 0.01,
    d_eps: float = 1e-4,
    max_iter: int = 20_000,
    alpha: float = 0.05,
    include_sqrt: bool = False,
    draws: int = DEFAULT_DRAWS,
    seed: int | None = 0,
) -> TmleResult:
    """TMLE (``"tmle"``) or CV-TMLE (``"cv-tmle"``) of the blip mean and variance.

    The two differ only in how the initial predictions are produced; the
    targeting step is shared. With ``known_g`` the propensity is not fitted.
    """
    if estimator not in ("tmle", "cv-tmle"):
        raise ValueError(f"unknown estimator {estimator!r}")
    ss = np.random.SeedSequence(seed)
    s_folds, s_fit = ss.spawn(2)
    if known_g is not None:
        library_g = None
    if estimator == "cv-tmle":
        dataset.check_folds(folds)
        plan = make_folds(dataset.n, folds, np.random.default_rng(s_folds))
        nuis = fit_nuisance(
            dataset, library_q, library_g, known_g, CROSS_FITTED, plan, g_trunc, ensemble_folds, s_fit,
        )
    else:
        nuis = fit_nuisance(dataset, library_q, library_g, known_g, FULL_SAMPLE, None, g_trunc, ensemble_folds, s_fit)
    return targeted_report(
        dataset, nuis, estimator=estimator, d_eps=d_eps, max_iter=max_iter,
        alpha=alpha, include_sqrt=include_sqrt, draws=draws, seed=seed,
    )
