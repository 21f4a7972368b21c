"""Base learners for conditional means on the unit interval and a stacked ensemble.

All learners minimise the (quasi)binomial negative log-likelihood, which is
valid for 0/1 outcomes and for outcomes rescaled to [0, 1].
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, log_expit

from .errors import ConfigError, ConvergenceError, LearnerFailure, NumericError, SingularMatrixError
from .folds import make_folds

log = logging.getLogger(__name__)

PRED_CLIP = 1e-6
_SATURATION = 30.0


def clip_prob(p):
    return np.clip(p, PRED_CLIP, 1.0 - PRED_CLIP)


def nll(y, p) -> float:
    """Mean quasibinomial negative log-likelihood of predictions ``p`` (clipped)."""
    p = clip_prob(p)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


# --- design expansions -------------------------------------------------------

def main_terms(x):
    x = np.asarray(x, dtype=float)
    return np.column_stack([np.ones(x.shape[0]), x])


def pairwise_products(x):
    x = np.asarray(x, dtype=float)
    cols = [x[:, i] * x[:, j] for i, j in itertools.combinations(range(x.shape[1]), 2)]
    return np.column_stack(cols) if cols else np.empty((x.shape[0], 0))


def main_and_interactions(x):
    return np.column_stack([main_terms(x), pairwise_products(x)])


def polynomial_terms(x, degree: int):
    """Intercept plus every monomial of total degree 1..degree."""
    x = np.asarray(x, dtype=float)
    cols = [np.ones(x.shape[0])]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(x.shape[1]), d):
            cols.append(np.prod(x[:, combo], axis=1))
    return np.column_stack(cols)


# --- logistic regression -----------------------------------------------------

def _objective(x, y, w, beta, l1, l2, pen):
    eta = x @ beta
    ll = np.sum(w * (y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))
    b = beta[pen]
    return -ll + 0.5 * l2 * b @ b + l1 * np.abs(b).sum()


def _gradient(x, y, w, beta, l2, pen):
    p = expit(x @ beta)
    g = -x.T @ (w * (y - p))
    g[pen] += l2 * beta[pen]
    return g


def _kkt_violation(g, beta, l1, pen):
    v = np.abs(g)
    if l1 > 0:
        pb = beta[pen]
        gp = g[pen]
        v_pen = np.where(pb != 0, np.abs(gp + l1 * np.sign(pb)), np.maximum(np.abs(gp) - l1, 0.0))
        v = v.copy()
        v[pen] = v_pen
    return float(v.max()) if v.size else 0.0


def _cd_quadratic(hess, lin, beta0, l1, pen, sweeps=2000, tol=1e-14):
    """Minimise 0.5 b'Hb + lin'b + l1*|b_pen|_1 by cyclic coordinate descent."""
    beta = beta0.copy()
    diag = np.diag(hess).copy()
    grad = hess @ beta + lin
    for _ in range(sweeps):
        max_step = 0.0
        for j in range(beta.shape[0]):
            if diag[j] <= 0:
                continue
            z = beta[j] - grad[j] / diag[j]
            if pen[j]:
                thr = l1 / diag[j]
                new = np.sign(z) * max(abs(z) - thr, 0.0)
            else:
                new = z
            delta = new - beta[j]
            if delta != 0.0:
                grad += hess[:, j] * delta
                beta[j] = new
                max_step = max(max_step, abs(delta))
        if max_step < tol:
            break
    return beta


def fit_logistic_mle(
    x,
    y,
    weights=None,
    l1: float = 0.0,
    l2: float = 0.0,
    *,
    tol: float = 1e-8,
    max_iter: int = 200,
    unpenalized=None,
    return_trace: bool = False,
):
    """Penalised logistic (quasibinomial) regression.

    Minimises ``-sum_i w_i loglik_i + l2/2 |beta|^2 + l1 |beta|_1`` where the
    penalties skip the ``unpenalized`` columns (by default every all-ones
    column). Newton/IRLS steps are used when ``l1 == 0`` and proximal Newton
    with a coordinate-descent inner solver otherwise; both backtrack so the
    objective never increases. Converges when the max-norm of the
    (sub)gradient is at most ``tol``.

    Raises
    ------
    SingularMatrixError
        ``x`` is rank deficient and the fit is unpenalised.
    ConvergenceError
        The linear predictor saturates (separation) or ``max_iter`` is hit.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if unpenalized is None:
        unpenalized = np.flatnonzero(np.all(x == 1.0, axis=0))
    pen = np.ones(d, dtype=bool)
    pen[np.asarray(unpenalized, dtype=int)] = False
    if l2 == 0 and l1 == 0 and np.linalg.matrix_rank(x) < d:
        raise SingularMatrixError(f"design matrix is rank deficient (rank < {d})")

    beta = np.zeros(d)
    # intercept start at the logit of the weighted mean speeds things up
    ones = np.flatnonzero(np.all(x == 1.0, axis=0))
    if ones.size:
        ybar = np.clip(np.average(y, weights=w), 1e-4, 1 - 1e-4)
        beta[ones[0]] = np.log(ybar / (1 - ybar))

    obj = _objective(x, y, w, beta, l1, l2, pen)
    trace = [obj]
    ridge = np.zeros(d)
    ridge[pen] = l2
    for _ in range(max_iter):
        g = _gradient(x, y, w, beta, l2, pen)
        if _kkt_violation(g, beta, l1, pen) <= tol:
            break
        p = expit(x @ beta)
        hess = (x * (w * p * (1 - p))[:, None]).T @ x + np.diag(ridge)
        if l1 == 0:
            try:
                target = beta - np.linalg.solve(hess, g)
            except np.linalg.LinAlgError:
                raise ConvergenceError("singular Hessian; outcomes are likely separated") from None
        else:
            # second-order model of the smooth part around beta
            lin = g - hess @ beta
            target = _cd_quadratic(hess, lin, beta, l1, pen)
        direction = target - beta
        # near the optimum a full step can "increase" the objective by a few ulps
        slack = 16.0 * np.finfo(float).eps * max(abs(obj), 1.0)
        step = 1.0
        while True:
            cand = beta + step * direction
            cand_obj = _objective(x, y, w, cand, l1, l2, pen)
            if cand_obj <= obj + slack or step < 1e-10:
                break
            step *= 0.5
        if cand_obj > obj + slack:
            break
        beta, obj = cand, cand_obj
        trace.append(obj)
        if np.max(np.abs(x @ beta)) > _SATURATION and l1 == 0 and l2 == 0:
            raise ConvergenceError("linear predictor diverging; outcomes are separated")
    else:
        g = _gradient(x, y, w, beta, l2, pen)
        if _kkt_violation(g, beta, l1, pen) > tol:
            raise ConvergenceError(f"logistic fit did not converge in {max_iter} iterations")
    g = _gradient(x, y, w, beta, l2, pen)
    if _kkt_violation(g, beta, l1, pen) > tol:
        # stalled line search: accept only if the remaining gradient is at rounding level
        scale = np.abs(x).T @ np.abs(w) + 1.0
        if np.any(np.abs(g) > 1e-6 * scale):
            raise ConvergenceError("logistic fit stalled before reaching the gradient tolerance")
    if return_trace:
        return beta, np.asarray(trace)
    return beta


# --- learner library ---------------------------------------------------------

LEARNER_KINDS = (
    "mean",
    "logistic-main",
    "logistic-main-interactions",
    "logistic-l1",
    "logistic-l2",
    "knn",
    "polynomial-logistic",
)


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    k: int = 10
    degree: int = 2
    lam: float = 0.01

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}; expected one of {LEARNER_KINDS}")
        if self.k < 1:
            raise ConfigError("knn needs k >= 1")
        if self.degree not in (1, 2, 3):
            raise ConfigError("polynomial degree must be 1, 2 or 3")
        if self.lam < 0:
            raise ConfigError("penalty must be non-negative")

    @property
    def label(self) -> str:
        if self.kind == "knn":
            return f"knn(k={self.k})"
        if self.kind == "polynomial-logistic":
            return f"polynomial-logistic(degree={self.degree})"
        if self.kind in ("logistic-l1", "logistic-l2"):
            return f"{self.kind}(lam={self.lam:g})"
        return self.kind

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSpec":
        if "kind" not in d:
            raise ConfigError("learner entry is missing field 'kind'")
        params = d.get("hyperparameters", {})
        extra = {k: v for k, v in d.items() if k not in ("kind", "hyperparameters")}
        params = {**params, **extra}
        unknown = set(params) - {"k", "degree", "lam"}
        if unknown:
            raise ConfigError(f"unknown learner hyperparameters {sorted(unknown)}")
        return cls(d["kind"], **params)

    def to_dict(self) -> dict:
        hp = {}
        if self.kind == "knn":
            hp["k"] = self.k
        elif self.kind == "polynomial-logistic":
            hp["degree"] = self.degree
        elif self.kind in ("logistic-l1", "logistic-l2"):
            hp["lam"] = self.lam
        return {"kind": self.kind, "hyperparameters": hp}

    def fit(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "mean":
            return _MeanFit(float(np.mean(y)))
        if self.kind == "knn":
            return _KnnFit.fit(x, y, self.k)
        basis = {
            "logistic-main": main_terms,
            "logistic-main-interactions": main_and_interactions,
            "logistic-l1": main_and_interactions,
            "logistic-l2": main_and_interactions,
            "polynomial-logistic": lambda z: polynomial_terms(z, self.degree),
        }[self.kind]
        n = x.shape[0]
        l1 = self.lam * n if self.kind == "logistic-l1" else 0.0
        l2 = self.lam * n if self.kind == "logistic-l2" else 0.0
        return _LogisticFit.fit(basis, x, y, l1, l2)


@dataclass
class _MeanFit:
    value: float

    def predict(self, x):
        return np.full(np.asarray(x).shape[0], self.value)


@dataclass
class _KnnFit:
    tree: cKDTree
    y: np.ndarray
    center: np.ndarray
    spread: np.ndarray
    k: int
    p: int

    @classmethod
    def fit(cls, x, y, k):
        center = x.mean(axis=0)
        spread = x.std(axis=0)
        spread[spread == 0] = 1.0
        return cls(cKDTree((x - center) / spread), y.copy(), center, spread, min(k, x.shape[0]), x.shape[1])

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[1] != self.p:
            raise ValueError(f"expected {self.p} columns, got {x.shape[1]}")
        _, idx = self.tree.query((x - self.center) / self.spread, k=self.k)
        idx = np.asarray(idx).reshape(x.shape[0], self.k)
        return (self.y[idx].sum(axis=1) + 0.5) / (self.k + 1.0)


@dataclass
class _LogisticFit:
    basis: object
    keep: np.ndarray
    center: np.ndarray
    spread: np.ndarray
    beta: np.ndarray
    p: int

    @classmethod
    def fit(cls, basis, x, y, l1, l2):
        z = basis(x)
        center = z.mean(axis=0)
        spread = z.std(axis=0)
        keep = spread > 1e-12
        keep[0] = True  # intercept
        # exact duplicate columns (e.g. a binary covariate and its square)
        _, first = np.unique(np.round(z, 12), axis=1, return_index=True)
        dup = np.ones(z.shape[1], dtype=bool)
        dup[first] = False
        keep &= ~dup
        center[0], spread[0] = 0.0, 1.0
        zs = (z[:, keep] - center[keep]) / spread[keep]
        beta = fit_logistic_mle(zs, y, l1=l1, l2=l2, unpenalized=[0])
        return cls(basis, keep, center[keep], spread[keep], beta, x.shape[1])

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[1] != self.p:
            raise ValueError(f"expected {self.p} columns, got {x.shape[1]}")
        z = self.basis(x)[:, self.keep]
        return expit(((z - self.center) / self.spread) @ self.beta)


# --- ensemble ----------------------------------------------------------------

@dataclass
class EnsembleFit:
    specs: list
    weights: np.ndarray
    cv_risks: np.ndarray
    fits: list = field(repr=False)
    ensemble_cv_risk: float = float("nan")
    dropped: list = field(default_factory=list)

    def predict(self, x_new):
        return predict(self, x_new)


def _simplex_grid(k: int, resolution: int = 100):
    """Simplex points with integer coordinates summing to ``resolution``,
    ordered so that earlier learners receive more weight first."""
    if k == 1:
        yield (resolution,)
        return
    for first in range(resolution, -1, -1):
        for rest in _simplex_grid(k - 1, resolution - first):
            yield (first, *rest)


def _best_weights(z, y):
    """Simplex weights minimising the NLL of ``z @ w``."""
    k = z.shape[1]
    if k == 1:
        return np.ones(1)
    if k <= 3:
        grid = np.array(list(_simplex_grid(k)), dtype=float) / 100.0
        preds = clip_prob(z @ grid.T)
        risks = -np.mean(y[:, None] * np.log(preds) + (1 - y[:, None]) * np.log1p(-preds), axis=0)
        best = np.flatnonzero(risks <= risks.min() + 1e-12)[0]
        return grid[best]
    from scipy.optimize import minimize

    vertex_risks = np.array([nll(y, z[:, j]) for j in range(k)])
    start = np.zeros(k)
    start[np.argmin(vertex_risks)] = 1.0
    res = minimize(
        lambda wt: nll(y, z @ wt),
        start,
        method="SLSQP",
        bounds=[(0.0, 1.0)] * k,
        constraints=[{"type": "eq", "fun": lambda wt: wt.sum() - 1.0}],
        options={"ftol": 1e-12, "maxiter": 500},
    )
    wt = np.clip(res.x, 0.0, None)
    wt /= wt.sum()
    return wt if nll(y, z @ wt) <= vertex_risks.min() else start


_LEARNER_ERRORS = (NumericError, np.linalg.LinAlgError, FloatingPointError, ValueError)


def fit_ensemble(x, y, library, folds: int = 10, seed=None) -> EnsembleFit:
    """Cross-validated convex stacking of the ``library`` learners.

    Each learner's out-of-fold predictions are combined with simplex weights
    minimising the cross-validated negative log-likelihood; the learners
    carrying weight are then refit on all rows. A singleton library skips the
    cross-validation and reports NaN risks.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    library = [s if isinstance(s, LearnerSpec) else LearnerSpec.from_dict(s) for s in library]
    if not library:
        raise ConfigError("learner library is empty")
    if len(library) == 1:
        try:
            fit = library[0].fit(x, y)
        except _LEARNER_ERRORS as exc:
            raise LearnerFailure(f"all learners failed ({library[0].label}: {exc})") from exc
        return EnsembleFit(library, np.ones(1), np.full(1, np.nan), [fit])
    if folds < 2:
        raise ConfigError("ensemble needs at least 2 folds")

    plan = make_folds(x.shape[0], folds, seed)
    z = np.empty((x.shape[0], len(library)))
    ok = []
    dropped = []
    for j, spec in enumerate(library):
        try:
            for train, valid in plan.splits():
                z[valid, j] = spec.fit(x[train], y[train]).predict(x[valid])
            ok.append(j)
        except _LEARNER_ERRORS as exc:
            warnings.warn(f"learner {spec.label} dropped: {exc}", RuntimeWarning, stacklevel=2)
            dropped.append(spec.label)
    if not ok:
        raise LearnerFailure("all learners failed")
    z = clip_prob(z[:, ok])
    cv_risks = np.full(len(library), np.nan)
    cv_risks[ok] = [nll(y, z[:, i]) for i in range(len(ok))]
    w_ok = _best_weights(z, y)
    weights = np.zeros(len(library))
    weights[ok] = w_ok
    fits = [None] * len(library)
    for j in np.flatnonzero(weights > 0):
        fits[j] = library[j].fit(x, y)
    return EnsembleFit(library, weights, cv_risks, fits, nll(y, z @ w_ok), dropped)


def predict(fit, x_new):
    """Predictions in ``[1e-6, 1 - 1e-6]`` from an ensemble or a coefficient vector.

    A bare coefficient vector is applied to ``x_new`` as a design matrix.
    """
    x_new = np.asarray(x_new, dtype=float)
    if isinstance(fit, EnsembleFit):
        out = np.zeros(x_new.shape[0])
        for wt, f in zip(fit.weights, fit.fits):
            if wt > 0:
                out += wt * f.predict(x_new)
        return clip_prob(out)
    beta = np.asarray(fit, dtype=float)
    if x_new.ndim != 2 or x_new.shape[1] != beta.shape[0]:
        raise ValueError(f"design has shape {x_new.shape}, coefficients have length {beta.shape[0]}")
    return clip_prob(expit(x_new @ beta))
