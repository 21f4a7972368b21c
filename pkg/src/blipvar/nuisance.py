"""Initial outcome-model and propensity predictions, full-sample or cross-fitted."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import ObservedDataset
from .errors import ConfigError
from .folds import FoldPlan, make_folds
from .learners import LearnerSpec, clip_prob, fit_ensemble

__all__ = ["FoldPlan", "make_folds", "NuisancePredictions", "fit_nuisance", "truncate_g"]

FULL_SAMPLE = "full-sample"
CROSS_FITTED = "cross-fitted"


@dataclass(frozen=True)
class NuisancePredictions:
    qbar1: np.ndarray
    qbar0: np.ndarray
    g1: np.ndarray
    mode: str = FULL_SAMPLE
    fold_plan: Optional[FoldPlan] = None
    g_known: bool = False
    g_trunc: float = 0.01

    def qbar_a(self, a) -> np.ndarray:
        return np.where(np.asarray(a) == 1, self.qbar1, self.qbar0)

    @property
    def blip(self) -> np.ndarray:
        return self.qbar1 - self.qbar0


def truncate_g(g1, g_trunc: float):
    return np.clip(np.asarray(g1, dtype=float), g_trunc, 1.0 - g_trunc)


def _as_g_function(known_g) -> Callable:
    if callable(known_g):
        return known_g
    value = float(known_g)
    if not 0.0 < value < 1.0:
        raise ConfigError(f"known propensity must lie in (0, 1), got {value}")
    return lambda w: np.full(np.asarray(w).shape[0], value)


def _fit_predict_q(library, w, a, y, w_new, folds, seed):
    fit = fit_ensemble(np.column_stack([a, w]), y, library, folds=folds, seed=seed)
    m = w_new.shape[0]
    q1 = fit.predict(np.column_stack([np.ones(m), w_new]))
    q0 = fit.predict(np.column_stack([np.zeros(m), w_new]))
    return q1, q0


def fit_nuisance(
    dataset: ObservedDataset,
    library_q,
    library_g=None,
    known_g=None,
    mode: str = FULL_SAMPLE,
    fold_plan: Optional[FoldPlan] = None,
    g_trunc: float = 0.01,
    ensemble_folds: int = 10,
    seed=None,
) -> NuisancePredictions:
    """Fit Qbar(A, W) = E[Y | A, W] and g(1 | W) = P(A = 1 | W).

    In cross-fitted mode every subject's predictions come from fits trained
    on the other folds. Either ``library_g`` or ``known_g`` (a callable of W
    or a constant) must be supplied; propensities are truncated to
    ``[g_trunc, 1 - g_trunc]``.
    """
    if mode not in (FULL_SAMPLE, CROSS_FITTED):
        raise ConfigError(f"unknown nuisance mode {mode!r}")
    if (library_g is None) == (known_g is None):
        raise ConfigError("supply exactly one of library_g or known_g")
    if not 0.0 <= g_trunc < 0.5:
        raise ConfigError("g_trunc must lie in [0, 0.5)")
    library_q = [s if isinstance(s, LearnerSpec) else LearnerSpec.from_dict(s) for s in library_q]
    if library_g is not None:
        library_g = [s if isinstance(s, LearnerSpec) else LearnerSpec.from_dict(s) for s in library_g]

    w, a, y = dataset.w, dataset.a, dataset.y
    n = dataset.n
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)

    if mode == FULL_SAMPLE:
        sq, sg = ss.spawn(2)
        q1, q0 = _fit_predict_q(library_q, w, a, y, w, ensemble_folds, np.random.default_rng(sq))
        if library_g is not None:
            g = fit_ensemble(w, a, library_g, folds=ensemble_folds, seed=np.random.default_rng(sg)).predict(w)
        else:
            g = _as_g_function(known_g)(w)
    else:
        if fold_plan is None:
            raise ConfigError("cross-fitted mode needs a fold plan")
        if fold_plan.n != n:
            raise ConfigError("fold plan size does not match the dataset")
        q1, q0, g = np.empty(n), np.empty(n), np.empty(n)
        children = ss.spawn(2 * fold_plan.v)
        for k, (train, valid) in enumerate(fold_plan.splits()):
            q1[valid], q0[valid] = _fit_predict_q(
                library_q, w[train], a[train], y[train], w[valid],
                ensemble_folds, np.random.default_rng(children[2 * k]),
            )
            if library_g is not None:
                gfit = fit_ensemble(
                    w[train], a[train], library_g, folds=ensemble_folds,
                    seed=np.random.default_rng(children[2 * k + 1]),
                )
                g[valid] = gfit.predict(w[valid])
        if known_g is not None:
            g = _as_g_function(known_g)(w)

    return NuisancePredictions(
        qbar1=clip_prob(q1),
        qbar0=clip_prob(q0),
        g1=truncate_g(g, g_trunc),
        mode=mode,
        fold_plan=fold_plan if mode == CROSS_FITTED else None,
        g_known=known_g is not None,
        g_trunc=g_trunc,
    )
