"""Data-generating processes for the simulation studies and a Monte-Carlo truth oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import expit, logit

from ..data import ObservedDataset
from ..errors import ConfigError

DGP_KINDS = ("controlled-noise", "wellspec", "case1", "case2", "case3")

# (a, b) for the well-specified outcome model with a == b, giving true VTE of
# about 0.01, 0.025 and 0.06 (see calibrate_wellspec).
WELLSPEC_PRESETS = {0.01: 1.5798, 0.025: 2.6605, 0.06: 4.8532}


@dataclass(frozen=True)
class DgpSpec:
    kind: str
    n: int = 1000
    seed: int | None = None
    rate: float = -1.0 / 3.0
    a: float = WELLSPEC_PRESETS[0.025]
    b: float = WELLSPEC_PRESETS[0.025]

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ConfigError(f"unknown DGP kind {self.kind!r}; expected one of {DGP_KINDS}")
        if self.n < 1:
            raise ConfigError("n must be positive")

    def with_n(self, n: int) -> "DgpSpec":
        return replace(self, n=n)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "n": self.n, "seed": self.seed}
        if self.kind == "controlled-noise":
            d["rate"] = self.rate
        if self.kind == "wellspec":
            d.update(a=self.a, b=self.b)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DgpSpec":
        if "kind" not in d:
            raise ConfigError("spec is missing field 'kind'")
        allowed = {"kind", "n", "seed", "rate", "a", "b"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown spec fields {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Dgp:
    """Truth functions of one data-generating process.

    ``qbar0(a, w)`` is E[Y | A=a, W=w], ``g0(w)`` is P(A=1 | W=w) and
    ``sample_w(rng, m)`` draws ``m`` covariate rows.
    """

    qbar0: Callable
    g0: Callable
    sample_w: Callable
    name: str = "custom"

    def blip(self, w):
        return self.qbar0(1, w) - self.qbar0(0, w)


def _w_controlled(rng, m):
    return np.column_stack([
        rng.uniform(-3, 3, m),
        rng.binomial(1, 0.5, m).astype(float),
        rng.standard_normal(m),
        rng.standard_normal(m),
    ])


def _w_realistic(rng, m):
    return np.column_stack([
        rng.uniform(-3, 3, m),
        rng.standard_normal(m),
        rng.standard_normal(m),
        rng.standard_normal(m),
    ])


def _cols(w):
    w = np.asarray(w, dtype=float)
    return w[:, 0], w[:, 1], w[:, 2], w[:, 3]


def _g_controlled(w):
    w1, w2, w3, w4 = _cols(w)
    return expit(0.5 * (-0.8 * w1 + 0.39 * w2 + 0.08 * w3 - 0.12 * w4 - 0.15))


def _q_controlled(a, w):
    w1, w2, w3, w4 = _cols(w)
    return expit(0.2 * (0.1 * a + 2 * a * w1 - 10 * a * w2 + 3 * a * w3 + w1 + w2 + 0.4 * w3 + 0.3 * w4))


def _g_realistic(w):
    w1, w2, w3, w4 = _cols(w)
    return expit(-0.4 * w1 + 0.195 * w2 + 0.04 * w3 - 0.06 * w4 - 0.075)


def _q_wellspec(a_coef, b_coef):
    def qbar0(a, w):
        w1, w2, w3, w4 = _cols(w)
        return expit(0.14 * (2 * a + w1 + a_coef * a * w1 - b_coef * a * w2 + w2 - w3 + w4))

    return qbar0


def _q_case1(a, w):
    w1, w2, w3, w4 = _cols(w)
    return expit(
        0.28 * a + 2.8 * np.cos(w1) * a + np.cos(w1) - 0.56 * a * w2**2 + 0.42 * np.cos(w4) * a + 0.14 * a * w1**2
    )


def _g_case23(w):
    w1, w2, _, _ = _cols(w)
    return expit(0.4 * (-0.4 * w1 * w2 + 0.63 * w2**2 - 0.66 * np.cos(w1) - 0.25))


def _q_case2(a, w):
    w1, w2, _, _ = _cols(w)
    return expit(
        0.1 * w1 * w2 + 1.5 * a * np.cos(w1) + 0.15 * w1
        - 0.4 * w2 * (np.abs(w2) > 1) - 1.0 * w2 * (np.abs(w2) <= 1)
    )


def _q_case3(a, w):
    w1, w2, _, _ = _cols(w)
    return expit(0.2 * w1 * w2 + 0.1 * w2**2 - 0.8 * a * (np.cos(w1) + 0.5 * a * w1 * w2**2) - 0.35)


def build_dgp(spec: DgpSpec) -> Dgp:
    if spec.kind == "controlled-noise":
        return Dgp(_q_controlled, _g_controlled, _w_controlled, spec.kind)
    if spec.kind == "wellspec":
        return Dgp(_q_wellspec(spec.a, spec.b), _g_realistic, _w_realistic, spec.kind)
    if spec.kind == "case1":
        return Dgp(_q_case1, _g_realistic, _w_realistic, spec.kind)
    if spec.kind == "case2":
        return Dgp(_q_case2, _g_case23, _w_realistic, spec.kind)
    return Dgp(_q_case3, _g_case23, _w_realistic, spec.kind)


def draw_dataset(spec, rng, n: int | None = None):
    """Draw ``n`` (default ``spec.n``) iid rows of (W, A, Y).

    Returns the dataset and the truth functions ``(qbar0, g0)``.
    """
    dgp = spec if isinstance(spec, Dgp) else build_dgp(spec)
    if n is None:
        n = spec.n
    rng = np.random.default_rng(rng)
    w = dgp.sample_w(rng, n)
    a = (rng.random(n) < dgp.g0(w)).astype(float)
    y = (rng.random(n) < dgp.qbar0(a, w)).astype(float)
    return ObservedDataset(w, a, y), (dgp.qbar0, dgp.g0)


def perturb_controlled_noise(qbar0, w, n, rate, rng=None, z=None, x=None):
    """Noisy initial outcome predictions whose error shrinks like ``n**rate``.

    Returns ``(qbar1_init, qbar0_init)``. ``z`` and ``x`` are the standard
    normal draws driving the noise; they are drawn from ``rng`` when omitted.
    """
    w = np.asarray(w, dtype=float)
    m = w.shape[0]
    rng = np.random.default_rng(rng)
    if z is None:
        z = rng.standard_normal(m)
    if x is None:
        x = rng.standard_normal(m)
    scale = 0.0 if rate == -math.inf else float(n) ** rate
    w1, w2, w3, w4 = _cols(w)

    def bias(a):
        return 1.5 * scale * (-0.2 + 1.5 * a + 0.2 * w1 + w2 - a * w3 + w4)

    sigma = 0.8 * scale * np.abs(3.5 + 0.5 * w1 + 0.15 * w2 + 0.33 * w3 * w4 - w4)
    noise1 = bias(1) + z * sigma
    noise0 = bias(0) + x * sigma
    q1 = expit(logit(qbar0(1, w)) + noise1)
    q0 = expit(logit(qbar0(0, w)) + 0.5 * noise1 + math.sqrt(0.75) * noise0)
    return q1, q0


@dataclass(frozen=True)
class TrueParams:
    ate0: float
    vte0: float
    mc_draws: int
    mc_se: tuple = field(default=(0.0, 0.0))


def true_params(spec, mc_draws: int = 10_000_000, seed: int = 20240101, chunk: int = 1_000_000) -> TrueParams:
    """Monte-Carlo mean and variance of the true blip over the covariate law."""
    dgp = spec if isinstance(spec, Dgp) else build_dgp(spec)
    rng = np.random.default_rng(seed)
    s1 = 0.0
    done = 0
    # two passes over chunks keep memory flat: first the mean, then centered moments
    states = []
    while done < mc_draws:
        m = min(chunk, mc_draws - done)
        states.append((rng.bit_generator.state, m))
        b = dgp.blip(dgp.sample_w(rng, m))
        s1 += b.sum()
        done += m
    ate = s1 / mc_draws
    m2 = m4 = 0.0
    for state, m in states:
        rng.bit_generator.state = state
        b = dgp.blip(dgp.sample_w(rng, m))
        c = b - ate
        m2 += np.sum(c * c)
        m4 += np.sum(c**4)
    vte = m2 / mc_draws
    se_ate = math.sqrt(vte / mc_draws)
    se_vte = math.sqrt(max(m4 / mc_draws - vte**2, 0.0) / mc_draws)
    return TrueParams(float(ate), float(vte), mc_draws, (se_ate, se_vte))


def calibrate_wellspec(target_vte: float, mc_draws: int = 2_000_000, seed: int = 7) -> float:
    """Coefficient c with (a, b) = (c, c) giving the requested true VTE."""
    from scipy.optimize import brentq

    def gap(c):
        return true_params(DgpSpec("wellspec", a=c, b=c), mc_draws, seed).vte0 - target_vte

    return float(brentq(gap, 0.0, 6.0, xtol=1e-5))
