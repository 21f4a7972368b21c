"""One-step targeting of the outcome predictions along the universal least
favorable submodel, built from many small steps along canonical one-dimensional
least favorable submodels.

The submodel through the current fit is

    logit Qbar_eps(a, w) = logit Qbar(a, w) - eps * <(H1(a, w), H2(a, w)), u>

with ``u = Pn D* / |Pn D*|``. Its empirical loss has slope ``+|Pn D*|`` at
``eps = 0``, so each accepted step moves to ``eps = -d_eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit, log_expit, logit

from .eic import EicEvaluation, evaluate_eic
from .errors import NumericError
from .learners import PRED_CLIP

TOLERANCE_MET = "tolerance-met"
LOSS_INCREASED = "loss-increased"
MAX_ITER = "max-iter"


@dataclass(frozen=True)
class TargetedFit:
    qbar1_star: np.ndarray
    qbar0_star: np.ndarray
    qbarA_star: np.ndarray
    iterations: int
    loss_trace: np.ndarray
    eic_norm_trace: np.ndarray
    stopped_reason: str
    eic: EicEvaluation

    @property
    def psi(self) -> tuple[float, float]:
        return self.eic.psi1_hat, self.eic.psi2_hat


def _loss(y, qa) -> float:
    q = np.clip(qa, PRED_CLIP, 1.0 - PRED_CLIP)
    return float(-np.mean(y * np.log(q) + (1.0 - y) * np.log1p(-q)))


def _direction(logit1, logit0, g1, a, y):
    """Per-subject logit slopes of the submodel at each arm, plus Pn D*."""
    q1, q0 = expit(logit1), expit(logit0)
    c = (q1 - q0) - np.mean(q1 - q0)
    resid = y - np.where(a == 1, q1, q0)
    h1 = np.where(a == 1, 1.0 / g1, -1.0 / (1.0 - g1))
    means = np.array([np.mean(h1 * resid + c), np.mean(2.0 * c * h1 * resid + c * c) - np.mean(c * c)])
    norm = float(np.hypot(*means))
    if norm == 0.0:
        raise NumericError("empirical EIC mean is exactly zero; nothing to target")
    u = means / norm
    k = u[0] + 2.0 * c * u[1]
    return k / g1, -k / (1.0 - g1), means, norm


def targeting_step(qbar1, qbar0, g1, a, y, d_eps: float = 1e-4):
    """One small loss-decreasing step of size ``d_eps`` along the submodel."""
    if d_eps <= 0:
        raise ValueError("d_eps must be positive")
    l1, l0 = logit(np.asarray(qbar1, float)), logit(np.asarray(qbar0, float))
    s1, s0, _, _ = _direction(l1, l0, np.asarray(g1, float), np.asarray(a, float), np.asarray(y, float))
    return expit(l1 + d_eps * s1), expit(l0 + d_eps * s0)


def submodel_loss(qbar1, qbar0, g1, a, y, eps):
    """Empirical log-likelihood loss of the submodel member at ``eps``."""
    a = np.asarray(a, float)
    y = np.asarray(y, float)
    l1, l0 = logit(np.asarray(qbar1, float)), logit(np.asarray(qbar0, float))
    s1, s0, _, _ = _direction(l1, l0, np.asarray(g1, float), a, y)
    eta = np.where(a == 1, l1 - eps * s1, l0 - eps * s0)
    return float(-np.mean(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def clfm_derivative_check(qbar1, qbar0, g1, a, y, d_eps: float = 1e-6):
    """Central-difference slope of the loss along the submodel at zero, and |Pn D*|."""
    up = submodel_loss(qbar1, qbar0, g1, a, y, d_eps)
    down = submodel_loss(qbar1, qbar0, g1, a, y, -d_eps)
    l1, l0 = logit(np.asarray(qbar1, float)), logit(np.asarray(qbar0, float))
    _, _, _, norm = _direction(l1, l0, np.asarray(g1, float), np.asarray(a, float), np.asarray(y, float))
    return (up - down) / (2.0 * d_eps), norm


_REASONS = {0: TOLERANCE_MET, 1: LOSS_INCREASED, 2: MAX_ITER}


@numba.njit(cache=True)
def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


@numba.njit(cache=True)
def _obs_loss(y, q, lo, hi):
    q = min(max(q, lo), hi)
    if y == 1.0:
        return -math.log(q)
    if y == 0.0:
        return -math.log(1.0 - q)
    return -(y * math.log(q) + (1.0 - y) * math.log(1.0 - q))


@numba.njit(cache=True)
def _target_loop(l1, l0, g1, a, y, d_eps, max_iter, lo, hi):
    """Fused targeting iterations; mirrors targeting_step/evaluate_eic."""
    n = l1.shape[0]
    ig1 = 1.0 / g1
    ig0 = 1.0 / (1.0 - g1)
    q1 = np.empty(n)
    q0 = np.empty(n)
    c = np.empty(n)
    hr = np.empty(n)
    n1 = np.empty(n)
    n0 = np.empty(n)
    p1 = np.empty(n)
    p0 = np.empty(n)
    losses = np.empty(max_iter + 1)
    norms = np.empty(max_iter + 1)
    loss = 0.0
    for i in range(n):
        q1[i] = _expit(l1[i])
        q0[i] = _expit(l0[i])
        loss += _obs_loss(y[i], q1[i] if a[i] == 1.0 else q0[i], lo, hi)
    loss /= n
    losses[0] = loss
    m = 0
    reason = 2
    while True:
        sb = 0.0
        for i in range(n):
            c[i] = q1[i] - q0[i]
            sb += c[i]
            if a[i] == 1.0:
                hr[i] = (y[i] - q1[i]) * ig1[i]
            else:
                hr[i] = -(y[i] - q0[i]) * ig0[i]
        bbar = sb / n
        sc2 = 0.0
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            c[i] -= bbar
            cc = c[i] * c[i]
            sc2 += cc
            s1 += hr[i] + c[i]
            s2 += 2.0 * c[i] * hr[i] + cc
        psi2 = sc2 / n
        mean1 = s1 / n
        mean2 = s2 / n - psi2
        v1 = 0.0
        v2 = 0.0
        for i in range(n):
            e1 = hr[i] + c[i] - mean1
            e2 = 2.0 * c[i] * hr[i] + c[i] * c[i] - psi2 - mean2
            v1 += e1 * e1
            v2 += e2 * e2
        sd1 = math.sqrt(v1 / (n - 1))
        sd2 = math.sqrt(v2 / (n - 1))
        norm = math.sqrt(mean1 * mean1 + mean2 * mean2)
        norms[m] = norm
        if abs(mean1) < sd1 / n and abs(mean2) < sd2 / n:
            reason = 0
            break
        if m >= max_iter:
            reason = 2
            break
        u1 = mean1 / norm
        u2 = mean2 / norm
        new_loss = 0.0
        for i in range(n):
            k = u1 + 2.0 * c[i] * u2
            n1[i] = l1[i] + d_eps * k * ig1[i]
            n0[i] = l0[i] - d_eps * k * ig0[i]
            p1[i] = _expit(n1[i])
            p0[i] = _expit(n0[i])
            new_loss += _obs_loss(y[i], p1[i] if a[i] == 1.0 else p0[i], lo, hi)
        new_loss /= n
        if new_loss > loss:
            reason = 1
            break
        l1, n1 = n1, l1
        l0, n0 = n0, l0
        q1, p1 = p1, q1
        q0, p0 = p0, q0
        loss = new_loss
        m += 1
        losses[m] = loss
    return l1.copy(), l0.copy(), m, reason, losses[: m + 1].copy(), norms[: m + 1].copy()


def run_targeting(dataset, nuisance, d_eps: float = 1e-4, max_iter: int = 20_000) -> TargetedFit:
    """Iterate small targeting steps until both EIC means fall below SD/n.

    The loop also stops, keeping the last accepted iterate, as soon as a step
    would raise the empirical loss, or after ``max_iter`` steps.
    """
    if d_eps <= 0:
        raise ValueError("d_eps must be positive")
    a = np.ascontiguousarray(dataset.a, dtype=float)
    y = np.ascontiguousarray(dataset.y, dtype=float)
    if a.shape[0] < 2:
        raise ValueError("targeting needs at least two observations")
    g1 = np.ascontiguousarray(nuisance.g1, dtype=float)
    l1 = logit(np.asarray(nuisance.qbar1, dtype=float))
    l0 = logit(np.asarray(nuisance.qbar0, dtype=float))
    l1, l0, m, code, losses, norms = _target_loop(
        l1, l0, g1, a, y, float(d_eps), int(max_iter), PRED_CLIP, 1.0 - PRED_CLIP
    )
    q1, q0 = expit(l1), expit(l0)
    return TargetedFit(
        qbar1_star=q1,
        qbar0_star=q0,
        qbarA_star=np.where(a == 1, q1, q0),
        iterations=int(m),
        loss_trace=losses,
        eic_norm_trace=norms,
        stopped_reason=_REASONS[int(code)],
        eic=evaluate_eic(dataset, q1, q0, None, g1),
    )


def run_targeting_reference(dataset, nuisance, d_eps: float = 1e-4, max_iter: int = 20_000) -> TargetedFit:
    """Slow pure-numpy version of :func:`run_targeting` built on
    :func:`targeting_step`; kept as a cross-check."""
    a = np.asarray(dataset.a, float)
    y = np.asarray(dataset.y, float)
    g1 = np.asarray(nuisance.g1, float)
    n = a.shape[0]
    q1, q0 = np.asarray(nuisance.qbar1, float), np.asarray(nuisance.qbar0, float)
    loss = _loss(y, np.where(a == 1, q1, q0))
    losses, norms = [loss], []
    m = 0
    while True:
        ev = evaluate_eic(dataset, q1, q0, None, g1)
        norms.append(ev.norm)
        if abs(ev.mean1) < ev.sd1 / n and abs(ev.mean2) < ev.sd2 / n:
            reason = TOLERANCE_MET
            break
        if m >= max_iter:
            reason = MAX_ITER
            break
        c1, c0 = targeting_step(q1, q0, g1, a, y, d_eps)
        new_loss = _loss(y, np.where(a == 1, c1, c0))
        if new_loss > loss:
            reason = LOSS_INCREASED
            break
        q1, q0, loss = c1, c0, new_loss
        losses.append(loss)
        m += 1
    return TargetedFit(q1, q0, np.where(a == 1, q1, q0), m, np.asarray(losses), np.asarray(norms), reason, ev)
