"""Standard errors, marginal and simultaneous confidence intervals, report assembly."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .data import IDENTITY_SCALE, OutcomeScale
from .errors import NumericError, ValidationError

DEFAULT_DRAWS = 5_000_000

_NUM = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EstimateReport",
    "type": "object",
    "required": ["estimator", "n", "alpha", "rows", "q_simultaneous", "z", "seed", "scale", "notes"],
    "additionalProperties": False,
    "properties": {
        "estimator": {"enum": ["tmle", "cv-tmle", "lr-plugin"]},
        "n": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "rows": {
            "type": "array",
            "minItems": 2,
            "maxItems": 3,
            "items": {
                "type": "object",
                "required": ["name", "est", "se", "lower", "upper", "lower_clamped", "sim_lower", "sim_upper"],
                "additionalProperties": False,
                "properties": {
                    "name": {"enum": ["ATE", "VTE", "sqrt(VTE)"]},
                    "est": {"type": "number"},
                    "se": _NUM,
                    "lower": _NUM,
                    "upper": _NUM,
                    "lower_clamped": _NUM,
                    "sim_lower": _NUM,
                    "sim_upper": _NUM,
                },
            },
        },
        "q_simultaneous": {"type": "number"},
        "z": {"type": "number"},
        "seed": {"type": ["integer", "null"]},
        "scale": {
            "type": "object",
            "required": ["lower", "upper", "applied"],
            "properties": {"lower": {"type": "number"}, "upper": {"type": "number"}, "applied": {"type": "boolean"}},
        },
        "notes": {"type": "array", "items": {"type": "string"}},
    },
}
_CHUNK = 1_000_000
_EIG_FLOOR = 1e-10


def _factor(corr):
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    d = corr.shape[0]
    if corr.shape != (d, d):
        raise ValidationError("correlation matrix must be square")
    if not np.allclose(corr, corr.T, atol=1e-12):
        raise ValidationError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
        raise ValidationError("correlation matrix must have a unit diagonal")
    vals, vecs = np.linalg.eigh(corr)
    if vals.min() < -_EIG_FLOOR:
        raise NumericError(f"correlation matrix is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return vecs * np.sqrt(np.maximum(vals, 0.0))


def simultaneous_quantile(corr, alpha: float = 0.05, draws: int = DEFAULT_DRAWS, seed=0) -> float:
    """Monte-Carlo (1 - alpha) quantile of max_j |Z_j| for Z ~ N(0, corr).

    Draws are generated in fixed-size chunks from independent substreams of
    ``seed``, so the result depends only on (corr, alpha, draws, seed).
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    if draws < 1:
        raise ValidationError("draws must be positive")
    root = _factor(corr)
    d = root.shape[0]
    n_chunks = -(-draws // _CHUNK)
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    maxima = np.empty(draws)
    start = 0
    for ss in streams:
        m = min(_CHUNK, draws - start)
        z = np.random.default_rng(ss).standard_normal((m, d)) @ root.T
        maxima[start:start + m] = np.max(np.abs(z), axis=1)
        start += m
    return float(np.quantile(maxima, 1.0 - alpha))


@dataclass(frozen=True)
class AnnotatedBound:
    raw: float
    clamped: float


def lower_bound_policy(ci_lower: float) -> AnnotatedBound:
    """Keep the raw lower bound of a non-negative parameter and annotate it
    with the bound clamped at zero."""
    return AnnotatedBound(float(ci_lower), max(0.0, float(ci_lower)))


@dataclass
class ReportRow:
    name: str
    est: float
    se: float
    lower: float
    upper: float
    lower_clamped: float | None
    sim_lower: float
    sim_upper: float


@dataclass
class EstimateReport:
    estimator: str
    n: int
    alpha: float
    rows: list
    q_simultaneous: float
    z: float
    seed: int | None = None
    scale: dict = field(default_factory=lambda: IDENTITY_SCALE.to_dict())
    notes: list = field(default_factory=list)

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def psi1(self) -> float:
        return self.row("ATE").est

    @property
    def psi2(self) -> float:
        return self.row("VTE").est

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rows"] = [{k: _json_num(v) for k, v in asdict(r).items()} for r in self.rows]
        out["q_simultaneous"] = _json_num(self.q_simultaneous)
        out["z"] = _json_num(self.z)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        d = dict(d)
        d["rows"] = [ReportRow(**{k: _from_json_num(v) if k != "name" else v for k, v in r.items()}) for r in d["rows"]]
        d["q_simultaneous"] = _from_json_num(d["q_simultaneous"])
        d["z"] = _from_json_num(d["z"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def format_table(self) -> str:
        lines = [f"{self.estimator.upper()} estimates (n={self.n}, level={1 - self.alpha:.0%})"]
        lines.append(f"{'':<10}{'est':>10}{'se':>10}{'lower':>10}{'upper':>10}{'sim_lower':>11}{'sim_upper':>11}")
        for r in self.rows:
            lines.append(
                f"{r.name:<10}{_fmt(r.est):>10}{_fmt(r.se):>10}{_fmt(r.lower):>10}{_fmt(r.upper):>10}"
                f"{_fmt(r.sim_lower):>11}{_fmt(r.sim_upper):>11}"
            )
        lines.append(f"simultaneous quantile q = {self.q_simultaneous:.4f} (marginal z = {self.z:.4f})")
        for r in self.rows:
            if r.lower_clamped is not None and r.lower < 0:
                lines.append(f"note: {r.name} lower bound {r.lower:.3f} is below zero; clamped bound is {r.lower_clamped:.3f}")
        lines.extend(f"note: {s}" for s in self.notes)
        return "\n".join(lines)


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.3f}"


def _json_num(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _from_json_num(v):
    return float("nan") if v is None else v


def build_report(
    eic,
    estimates=None,
    n: int | None = None,
    alpha: float = 0.05,
    scale: OutcomeScale = IDENTITY_SCALE,
    include_sqrt: bool = False,
    *,
    estimator: str = "tmle",
    draws: int = DEFAULT_DRAWS,
    seed: int | None = 0,
) -> EstimateReport:
    """Assemble the (ATE, VTE[, sqrt VTE]) report from per-subject influence curves.

    ``eic`` needs ``d1`` and ``d2`` arrays; ``estimates`` defaults to its
    ``psi1_hat``/``psi2_hat``. Standard errors are SD/sqrt(n); simultaneous
    intervals use the Monte-Carlo max-|Z| quantile for the sample correlation
    of the curves. Everything is mapped back to the original outcome scale last.
    """
    d1 = np.asarray(eic.d1, dtype=float)
    d2 = np.asarray(eic.d2, dtype=float)
    if n is None:
        n = d1.shape[0]
    psi1, psi2 = estimates if estimates is not None else (eic.psi1_hat, eic.psi2_hat)
    psi1, psi2 = float(psi1), float(psi2)
    if psi2 < 0:
        raise ValidationError("VTE estimate must be non-negative")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    notes = []

    curves = [d1, d2]
    names = ["ATE", "VTE"]
    ests = [psi1, psi2]
    sqrt_row_undefined = False
    if include_sqrt:
        psi3 = math.sqrt(psi2)
        names.append("sqrt(VTE)")
        ests.append(psi3)
        if psi3 > 0:
            curves.append(d2 / (2.0 * psi3))
        else:
            sqrt_row_undefined = True
            notes.append("sqrt(VTE) estimate is 0; its delta-method standard error is undefined")

    ddof = 1 if d1.shape[0] > 1 else 0
    sds = [float(np.std(c, ddof=ddof)) for c in curves]
    ses = [s / math.sqrt(n) for s in sds]
    if len(curves) == 1 or min(sds) == 0.0:
        corr = np.eye(len(curves))
        if len(curves) > 1:
            live = [i for i, s in enumerate(sds) if s > 0]
            if len(live) > 1:
                sub = np.corrcoef(np.vstack([curves[i] for i in live]))
                for ii, i in enumerate(live):
                    for jj, j in enumerate(live):
                        corr[i, j] = sub[ii, jj]
    else:
        corr = np.corrcoef(np.vstack(curves))
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    q = simultaneous_quantile(corr, alpha, draws, seed)
    q = max(q, z)  # Monte-Carlo noise must not make the band narrower than the marginal one

    if sqrt_row_undefined:
        ses.append(float("nan"))

    k = scale.width
    factors = {"ATE": k, "VTE": k * k, "sqrt(VTE)": k}
    rows = []
    for name, est, se in zip(names, ests, ses):
        f = factors[name]
        est_o, se_o = est * f, se * f
        lo, hi = est_o - z * se_o, est_o + z * se_o
        slo, shi = est_o - q * se_o, est_o + q * se_o
        clamp = lower_bound_policy(lo).clamped if name != "ATE" and not math.isnan(lo) else None
        rows.append(ReportRow(name, est_o, se_o, lo, hi, clamp, slo, shi))
    return EstimateReport(
        estimator=estimator,
        n=int(n),
        alpha=alpha,
        rows=rows,
        q_simultaneous=q,
        z=z,
        seed=seed,
        scale=scale.to_dict(),
        notes=notes,
    )
