"""Efficient influence curve of (ATE, VTE), its exact finite-support check,
and the second-order remainder diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError


def clever_covariates(qbar1, qbar0, g1, a):
    """Return (h1, h2) evaluated at the treatment values ``a``.

    h1 = (2a - 1) / g(a | w) and h2 = 2 (b - mean(b)) h1 with b = qbar1 - qbar0.
    ``a`` may be the observed treatments or a constant arm.
    """
    g1 = np.asarray(g1, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), g1.shape)
    b = np.asarray(qbar1, dtype=float) - np.asarray(qbar0, dtype=float)
    h1 = (2.0 * a - 1.0) / np.where(a == 1, g1, 1.0 - g1)
    h2 = 2.0 * (b - b.mean()) * h1
    return h1, h2


@dataclass(frozen=True)
class EicEvaluation:
    d1: np.ndarray
    d2: np.ndarray
    mean1: float
    mean2: float
    sd1: float
    sd2: float
    psi1_hat: float
    psi2_hat: float

    @property
    def n(self) -> int:
        return self.d1.shape[0]

    @property
    def means(self) -> np.ndarray:
        return np.array([self.mean1, self.mean2])

    @property
    def norm(self) -> float:
        return float(np.hypot(self.mean1, self.mean2))

    def solved(self) -> bool:
        """Both empirical means are below their SD / n."""
        n = self.n
        return abs(self.mean1) <= self.sd1 / n and abs(self.mean2) <= self.sd2 / n


def evaluate_eic(dataset, qbar1, qbar0, qbarA, g1) -> EicEvaluation:
    """Per-subject EIC components at the given outcome and propensity fits.

    ``dataset`` only needs ``a`` and ``y`` attributes. ``qbarA`` may be None,
    in which case it is read off ``qbar1``/``qbar0`` at the observed arm.
    """
    a = np.asarray(dataset.a, dtype=float)
    y = np.asarray(dataset.y, dtype=float)
    qbar1 = np.asarray(qbar1, dtype=float)
    qbar0 = np.asarray(qbar0, dtype=float)
    implied = np.where(a == 1, qbar1, qbar0)
    if qbarA is None:
        qbarA = implied
    elif not np.allclose(qbarA, implied, rtol=0, atol=1e-12):
        raise ValidationError("qbarA is inconsistent with qbar1, qbar0 and the observed treatment")
    b = qbar1 - qbar0
    psi1 = float(b.mean())
    centered = b - psi1
    psi2 = float(np.mean(centered**2))
    h1, h2 = clever_covariates(qbar1, qbar0, g1, a)
    resid = y - qbarA
    d1 = h1 * resid + centered
    d2 = h2 * resid + centered**2 - psi2
    ddof = 1 if a.shape[0] > 1 else 0
    return EicEvaluation(
        d1=d1,
        d2=d2,
        mean1=float(d1.mean()),
        mean2=float(d2.mean()),
        sd1=float(d1.std(ddof=ddof)),
        sd2=float(d2.std(ddof=ddof)),
        psi1_hat=psi1,
        psi2_hat=psi2,
    )


# --- finite-support oracle ---------------------------------------------------

@dataclass(frozen=True)
class DiscreteDistribution:
    """Law of (W, A, Y) with W on ``k`` strata and binary A and Y.

    ``joint[k, a, y]`` holds the atom probabilities.
    """

    joint: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.joint, dtype=float)
        if p.ndim != 3 or p.shape[1:] != (2, 2):
            raise ValidationError("joint must have shape (strata, 2, 2)")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError("atom probabilities must be non-negative and sum to 1")
        arm = p.sum(axis=2)
        if np.any(arm <= 0):
            raise ValidationError("positivity fails: some stratum has an empty treatment arm")
        object.__setattr__(self, "joint", p)

    @classmethod
    def from_factors(cls, p_w, g1, qbar0, qbar1) -> "DiscreteDistribution":
        p_w, g1 = np.asarray(p_w, float), np.asarray(g1, float)
        q = np.stack([np.asarray(qbar0, float), np.asarray(qbar1, float)], axis=1)
        g = np.stack([1 - g1, g1], axis=1)
        joint = p_w[:, None, None] * g[:, :, None] * np.stack([1 - q, q], axis=2)
        return cls(joint / joint.sum())

    @property
    def p_w(self) -> np.ndarray:
        return self.joint.sum(axis=(1, 2))

    @property
    def g1(self) -> np.ndarray:
        arm = self.joint.sum(axis=2)
        return arm[:, 1] / arm.sum(axis=1)

    def qbar(self, a: int) -> np.ndarray:
        arm = self.joint[:, a, :]
        return arm[:, 1] / arm.sum(axis=1)

    @property
    def blip(self) -> np.ndarray:
        return self.qbar(1) - self.qbar(0)

    def psi(self) -> np.ndarray:
        b, pw = self.blip, self.p_w
        ate = float(pw @ b)
        return np.array([ate, float(pw @ (b - ate) ** 2)])

    def perturb(self, score, eps: float) -> "DiscreteDistribution":
        return DiscreteDistribution(self.joint * (1.0 + eps * np.asarray(score, float)))


def exact_eic(p: DiscreteDistribution) -> np.ndarray:
    """D*(P) on every atom, shape (strata, 2, 2, 2) with the component last."""
    b = p.blip
    ate, vte = p.psi()
    c = b - ate
    g1 = p.g1
    out = np.empty(p.joint.shape + (2,))
    for a in (0, 1):
        h1 = (2 * a - 1) / (g1 if a == 1 else 1 - g1)
        qa = p.qbar(a)
        for y in (0, 1):
            r = y - qa
            out[:, a, y, 0] = h1 * r + c
            out[:, a, y, 1] = 2 * c * h1 * r + c**2 - vte
    return out


def random_distribution(rng, strata: int) -> DiscreteDistribution:
    return DiscreteDistribution.from_factors(
        p_w=rng.dirichlet(np.ones(strata)) * 0.9 + 0.1 / strata,
        g1=rng.uniform(0.1, 0.9, strata),
        qbar0=rng.uniform(0.05, 0.95, strata),
        qbar1=rng.uniform(0.05, 0.95, strata),
    )


def random_score(rng, p: DiscreteDistribution, bound: float = 1.0) -> np.ndarray:
    """Bounded score with mean zero under ``p``."""
    s = rng.uniform(-1, 1, p.joint.shape)
    s -= np.sum(p.joint * s)
    return s * bound / np.max(np.abs(s))


def pathwise_derivative_oracle(
    p: DiscreteDistribution,
    score,
    eps: float = 1e-5,
    eic: Callable[[DiscreteDistribution], np.ndarray] = exact_eic,
):
    """Central-difference derivative of (ATE, VTE) along ``p_eps = (1 + eps*s) p``
    and the exact inner products ``E_p[D* s]`` for comparison.

    ``eic`` is injectable so deliberately wrong curves can be shown to fail.
    """
    s = np.asarray(score, dtype=float)
    if s.shape != p.joint.shape:
        raise ValidationError(f"score must have shape {p.joint.shape}")
    if abs(np.sum(p.joint * s)) > 1e-12:
        raise ValidationError("score does not have mean zero under p")
    if np.max(np.abs(s)) * eps >= 1.0:
        raise ValidationError("perturbed density leaves the simplex")
    deriv = (p.perturb(s, eps).psi() - p.perturb(s, -eps).psi()) / (2 * eps)
    d = eic(p)
    inner = np.einsum("kay,kayj->j", p.joint * s, d)
    return deriv, inner


# --- second-order remainder --------------------------------------------------

def remainder_r2(estimated, truth, mc_draws: int = 1_000_000, rng=None):
    """Monte-Carlo second-order remainders (r2_ate, r2_vte).

    ``estimated`` is ``(qbar1, qbar0, g1)`` and ``truth`` is
    ``(qbar1_0, qbar0_0, g1_0, sample_w)``; the first five are functions of a
    W matrix and ``sample_w(rng, m)`` draws m covariate rows. Both laws share
    the covariate distribution, so expectations under the estimate are taken
    over the same draws.
    """
    q1, q0, g1 = estimated
    q1_0, q0_0, g1_0, sample_w = truth
    rng = np.random.default_rng(rng)
    w = sample_w(rng, mc_draws)
    Q1, Q0, G1 = q1(w), q0(w), g1(w)
    T1, T0, G10 = q1_0(w), q0_0(w), g1_0(w)
    b, b0 = Q1 - Q0, T1 - T0
    cross = (G10 - G1) / G1 * (T1 - Q1) - ((1 - G10) - (1 - G1)) / (1 - G1) * (T0 - Q0)
    r2_ate = float(np.mean(cross))
    r2_vte = float((b0.mean() - b.mean()) ** 2 + np.mean(2 * (b - b.mean()) * cross) - np.mean((b0 - b) ** 2))
    return r2_ate, r2_vte


def remainder_r2_exact(p: DiscreteDistribution, p0: DiscreteDistribution) -> np.ndarray:
    """Psi(P) - Psi(P0) + P0 D*(P), evaluated exactly on a finite support."""
    return p.psi() - p0.psi() + np.einsum("kay,kayj->j", p0.joint, exact_eic(p))
