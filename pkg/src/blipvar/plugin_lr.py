"""Logistic-regression plug-in estimator of (ATE, VTE) with delta-method inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .data import ObservedDataset
from .inference import DEFAULT_DRAWS, EstimateReport, build_report
from .errors import SingularMatrixError
from .learners import fit_logistic_mle, main_and_interactions

_COND_LIMIT = 1e12


def interaction_design(a, w):
    """Intercept, A, W and every pairwise product (A x Wj and Wj x Wk)."""
    a = np.broadcast_to(np.asarray(a, dtype=float), (np.asarray(w).shape[0],))
    return main_and_interactions(np.column_stack([a, w]))


def score_beta(beta, x_row, y):
    """Logistic score x (y - expit(beta'x)); rows of ``x_row`` give per-subject scores."""
    x_row = np.asarray(x_row, dtype=float)
    resid = np.asarray(y, dtype=float) - expit(x_row @ np.asarray(beta, dtype=float))
    if x_row.ndim == 1:
        return x_row * resid
    return x_row * resid[:, None]


def ic_beta(beta, x, y):
    """Per-subject influence curve of the MLE: rows ``M^{-1} S_beta(O_i)`` with
    ``M`` the empirical Fisher information (1/n) sum p(1-p) x x'."""
    x = np.asarray(x, dtype=float)
    p = expit(x @ beta)
    info = (x * (p * (1 - p))[:, None]).T @ x / x.shape[0]
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularMatrixError(f"information matrix is singular (condition {cond:.3g})")
    return np.linalg.solve(info, score_beta(beta, x, y).T).T


@dataclass
class PluginFit:
    beta: np.ndarray
    design: Callable
    ic_beta: np.ndarray
    ic_psi: np.ndarray
    blip: np.ndarray
    f_beta: np.ndarray

    @property
    def psi(self) -> tuple[float, float]:
        b = self.blip
        return float(b.mean()), float(np.mean((b - b.mean()) ** 2))

    @property
    def d1(self):
        return self.ic_psi[:, 0]

    @property
    def d2(self):
        return self.ic_psi[:, 1]


def fit_plugin(dataset: ObservedDataset, design: Callable = interaction_design) -> PluginFit:
    w, a, y = dataset.w, dataset.a, dataset.y
    x = design(a, w)
    beta = fit_logistic_mle(x, y)
    x1, x0 = design(1.0, w), design(0.0, w)
    p1, p0 = expit(x1 @ beta), expit(x0 @ beta)
    blip = p1 - p0
    psi1 = blip.mean()
    c = blip - psi1
    psi2 = np.mean(c * c)
    f = (p1 * (1 - p1))[:, None] * x1 - (p0 * (1 - p0))[:, None] * x0
    icb = ic_beta(beta, x, y)
    grad1 = f.mean(axis=0)
    grad2 = (2.0 * c[:, None] * f).mean(axis=0)
    ic_psi = np.column_stack([icb @ grad1 + c, icb @ grad2 + c * c - psi2])
    return PluginFit(beta, design, icb, ic_psi, blip, f)


def plugin_estimate(
    dataset: ObservedDataset,
    design: Callable = interaction_design,
    alpha: float = 0.05,
    include_sqrt: bool = False,
    draws: int = DEFAULT_DRAWS,
    seed: int | None = 0,
) -> tuple[PluginFit, EstimateReport]:
    fit = fit_plugin(dataset, design)
    report = build_report(
        fit, fit.psi, dataset.n, alpha, dataset.scale, include_sqrt,
        estimator="lr-plugin", draws=draws, seed=seed,
    )
    return fit, report
