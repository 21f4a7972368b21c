"""Replicate harness: draw data, run estimators, aggregate Table-1 style metrics.

Metrics are computed for the VTE estimate. Each replicate gets its own
SeedSequence child, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import skew

from ..errors import BlipvarError, ConfigError
from ..estimators import estimate, targeted_report
from ..learners import LearnerSpec
from ..nuisance import FULL_SAMPLE, NuisancePredictions, fit_nuisance
from ..plugin_lr import plugin_estimate
from .dgp import DgpSpec, draw_dataset, perturb_controlled_noise, true_params

ESTIMATORS = ("tmle", "cv-tmle", "tmle-lr", "lr-plugin", "oracle")
LR_Q_LIBRARY = (LearnerSpec("logistic-main-interactions"),)
LR_G_LIBRARY = (LearnerSpec("logistic-main"),)
HARNESS_DRAWS = 100_000
TRUTH_DRAWS = 10_000_000

METRIC_COLUMNS = ("estimator", "n", "var", "bias", "mse", "coverage", "skewness", "reps_ok")
RAW_COLUMNS = ("replicate", "estimator", "est_ate", "est_vte", "ci_lo", "ci_hi", "covered")


@dataclass(frozen=True)
class ReplicateRecord:
    replicate: int
    estimator: str
    est_ate: float
    est_vte: float
    ci_lo: float
    ci_hi: float
    covered: bool


@dataclass(frozen=True)
class ReplicateMetrics:
    estimator: str
    n: int
    var: float
    bias: float
    mse: float
    coverage: float
    skewness: float
    reps_ok: int
    reps_failed: int = 0


@dataclass
class CampaignResult:
    metrics: list
    raw: dict  # n -> list[ReplicateRecord]
    truth: dict  # n -> (ate0, vte0)
    failures: list = field(default_factory=list)


@lru_cache(maxsize=32)
def _cached_truth(kind, rate, a, b, draws):
    tp = true_params(DgpSpec(kind, rate=rate, a=a, b=b), draws)
    return tp.ate0, tp.vte0


def truth_for(spec: DgpSpec, draws: int = TRUTH_DRAWS):
    """Monte-Carlo (ATE, VTE) truth of ``spec``; memoized per process."""
    return _cached_truth(spec.kind, spec.rate, spec.a, spec.b, draws)


def _oracle_record(idx, truth):
    ate0, vte0 = truth
    return ReplicateRecord(idx, "oracle", ate0, vte0, vte0 - 1.0, vte0 + 1.0, True)


def _noise_nuisance(spec, dataset, qbar0, g0, rng):
    q1, q0 = perturb_controlled_noise(qbar0, dataset.w, dataset.n, spec.rate, rng)
    return NuisancePredictions(q1, q0, np.asarray(g0(dataset.w), float), FULL_SAMPLE, None, True, 0.0)


def _run_one(name, spec, dataset, truth_fns, seq, opts):
    qbar0, g0 = truth_fns
    known_g = g0 if opts["known_g"] else None
    draws = opts["draws"]
    seed = int(seq.generate_state(1)[0])
    if name == "lr-plugin":
        _, rep = plugin_estimate(dataset, alpha=opts["alpha"], draws=draws, seed=seed)
        return rep
    if spec.kind == "controlled-noise" and name in ("tmle", "cv-tmle", "tmle-lr"):
        nuis = _noise_nuisance(spec, dataset, qbar0, g0, np.random.default_rng(seq))
        return targeted_report(
            dataset, nuis, estimator=name, max_iter=opts["max_iter"], alpha=opts["alpha"], draws=draws, seed=seed
        ).report
    if name == "tmle-lr":
        nuis = fit_nuisance(
            dataset, LR_Q_LIBRARY, None if known_g else LR_G_LIBRARY, known_g, FULL_SAMPLE, seed=seed
        )
        return targeted_report(
            dataset, nuis, estimator="tmle", max_iter=opts["max_iter"], alpha=opts["alpha"], draws=draws, seed=seed
        ).report
    return estimate(
        dataset, name, known_g=known_g, folds=opts["folds"], max_iter=opts["max_iter"],
        alpha=opts["alpha"], draws=draws, seed=seed,
    ).report


def run_replicate(spec: DgpSpec, estimators, idx: int, seq, truth, opts):
    """One replicate: returns (records, failures) for every estimator."""
    data_seq, *est_seqs = seq.spawn(1 + len(estimators))
    dataset, truth_fns = draw_dataset(spec, np.random.default_rng(data_seq))
    records, failures = [], []
    for name, s in zip(estimators, est_seqs):
        if name == "oracle":
            records.append(_oracle_record(idx, truth))
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = _run_one(name, spec, dataset, truth_fns, s, opts)
        except (BlipvarError, ArithmeticError, np.linalg.LinAlgError) as exc:
            failures.append((idx, name, f"{type(exc).__name__}: {exc}"))
            continue
        vte = rep.row("VTE")
        covered = bool(vte.lower <= truth[1] <= vte.upper)
        records.append(ReplicateRecord(idx, name, rep.psi1, vte.est, vte.lower, vte.upper, covered))
    return records, failures


def _replicate_task(args):
    return run_replicate(*args)


def aggregate(records, estimator: str, n: int, vte0: float, reps_failed: int = 0) -> ReplicateMetrics:
    """Fold replicate records (any order) into metrics, ordered by replicate index."""
    rows = sorted((r for r in records if r.estimator == estimator), key=lambda r: r.replicate)
    est = np.array([r.est_vte for r in rows], dtype=float)
    k = est.size
    if k == 0:
        nan = float("nan")
        return ReplicateMetrics(estimator, n, nan, nan, nan, nan, nan, 0, reps_failed)
    mean = float(est.mean())
    var = float(np.mean((est - mean) ** 2))
    bias = mean - vte0
    mse = var + bias * bias
    cov = float(np.mean([r.covered for r in rows]))
    sk = float(skew(est)) if k > 2 and var > 0 else float("nan")
    return ReplicateMetrics(estimator, n, var, bias, mse, cov, sk, k, reps_failed)


def run_replicates(
    spec: DgpSpec,
    estimators,
    reps: int,
    alpha: float = 0.05,
    parallelism: int = 1,
    seed: int = 0,
    *,
    known_g: bool = False,
    folds: int = 10,
    max_iter: int = 20_000,
    draws: int = HARNESS_DRAWS,
    truth=None,
    truth_draws: int = TRUTH_DRAWS,
):
    """Run ``reps`` replicates of every estimator at ``spec.n``.

    Returns ``(metrics, records, failures)``; metrics follow the order of
    ``estimators``. Failed replicates are excluded and counted.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if parallelism < 1:
        raise ConfigError("parallelism must be at least 1")
    estimators = list(estimators)
    for name in estimators:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    if truth is None:
        truth = truth_for(spec, truth_draws)
    opts = dict(alpha=alpha, known_g=known_g, folds=folds, max_iter=max_iter, draws=draws)
    seqs = np.random.SeedSequence(seed).spawn(reps)
    tasks = [(spec, estimators, i, s, truth, opts) for i, s in enumerate(seqs)]
    if parallelism == 1 or reps == 1:
        results = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=max(1, reps // (4 * parallelism))))
    records = [r for recs, _ in results for r in recs]
    failures = [f for _, fails in results for f in fails]
    metrics = [
        aggregate(records, name, spec.n, truth[1], sum(1 for f in failures if f[1] == name))
        for name in estimators
    ]
    return metrics, records, failures


# -- campaign configs ----------------------------------------------------------------

_REQUIRED = ("spec", "estimators", "reps", "n_grid", "alpha", "seed", "parallelism")
_OPTIONAL = ("known_g", "folds", "max_iter", "draws", "truth_draws")


@dataclass(frozen=True)
class CampaignConfig:
    spec: DgpSpec
    estimators: tuple
    reps: int
    n_grid: tuple
    alpha: float
    seed: int
    parallelism: int
    known_g: bool = False
    folds: int = 10
    max_iter: int = 20_000
    draws: int = HARNESS_DRAWS
    truth_draws: int = TRUTH_DRAWS

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        if not isinstance(d, dict):
            raise ConfigError("campaign config must be a JSON object")
        missing = [k for k in _REQUIRED if k not in d]
        if missing:
            raise ConfigError(f"campaign config is missing field(s): {', '.join(missing)}")
        unknown = sorted(set(d) - set(_REQUIRED) - set(_OPTIONAL))
        if unknown:
            raise ConfigError(f"campaign config has unknown field(s): {', '.join(unknown)}")
        problems = []
        if not isinstance(d["spec"], dict):
            problems.append("spec must be an object")
        if not isinstance(d["estimators"], list) or not d["estimators"]:
            problems.append("estimators must be a non-empty list")
        else:
            bad = [e for e in d["estimators"] if e not in ESTIMATORS]
            if bad:
                problems.append(f"estimators contains unknown name(s) {bad}; expected {list(ESTIMATORS)}")
        if not _is_int(d["reps"]) or d["reps"] < 1:
            problems.append("reps must be a positive integer")
        if not isinstance(d["n_grid"], list) or not d["n_grid"] or not all(_is_int(v) and v >= 2 for v in d["n_grid"]):
            problems.append("n_grid must be a non-empty list of integers >= 2")
        if not isinstance(d["alpha"], (int, float)) or not 0 < d["alpha"] < 1:
            problems.append("alpha must lie in (0, 1)")
        if not _is_int(d["seed"]) or d["seed"] < 0:
            problems.append("seed must be a non-negative integer")
        if not _is_int(d["parallelism"]) or d["parallelism"] < 1:
            problems.append("parallelism must be a positive integer")
        for key in ("folds", "max_iter", "draws", "truth_draws"):
            if key in d and (not _is_int(d[key]) or d[key] < 1):
                problems.append(f"{key} must be a positive integer")
        if "known_g" in d and not isinstance(d["known_g"], bool):
            problems.append("known_g must be true or false")
        if problems:
            raise ConfigError("invalid campaign config: " + "; ".join(problems))
        spec = DgpSpec.from_dict(d["spec"])
        extra = {k: d[k] for k in _OPTIONAL if k in d}
        return cls(
            spec, tuple(d["estimators"]), d["reps"], tuple(d["n_grid"]), float(d["alpha"]),
            d["seed"], d["parallelism"], **extra,
        )

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"campaign config is not valid JSON: {exc}") from exc


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def run_campaign(cfg: CampaignConfig) -> CampaignResult:
    truth = truth_for(cfg.spec, cfg.truth_draws)
    grid_seqs = np.random.SeedSequence(cfg.seed).spawn(len(cfg.n_grid))
    metrics, raw, truths, failures = [], {}, {}, []
    for n, gs in zip(cfg.n_grid, grid_seqs):
        spec_n = cfg.spec.with_n(n)
        m, recs, fails = run_replicates(
            spec_n, cfg.estimators, cfg.reps, cfg.alpha, cfg.parallelism,
            int(gs.generate_state(1)[0]), known_g=cfg.known_g, folds=cfg.folds,
            max_iter=cfg.max_iter, draws=cfg.draws, truth=truth,
        )
        metrics.extend(m)
        raw[n] = sorted(recs, key=lambda r: (r.replicate, cfg.estimators.index(r.estimator)))
        truths[n] = truth
        failures.extend((n, *f) for f in fails)
    return CampaignResult(metrics, raw, truths, failures)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics_csv(metrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(METRIC_COLUMNS)
        for m in metrics:
            d = asdict(m)
            out.writerow([_fmt(d[c]) for c in METRIC_COLUMNS])


def write_raw_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(RAW_COLUMNS)
        for r in records:
            d = asdict(r)
            out.writerow([_fmt(d[c]) for c in RAW_COLUMNS])


def write_campaign(result: CampaignResult, out_dir) -> list:
    """Write metrics.csv and one raw_n<N>.csv per sample size; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "metrics.csv"]
    write_metrics_csv(result.metrics, paths[0])
    for n, recs in result.raw.items():
        p = out_dir / f"raw_n{n}.csv"
        write_raw_csv(recs, p)
        paths.append(p)
    return paths


def format_metrics(metrics) -> str:
    lines = [f"{'estimator':<12}{'n':>6}{'var':>12}{'bias':>11}{'mse':>12}{'coverage':>10}{'skewness':>10}{'reps_ok':>9}"]
    for m in metrics:
        lines.append(
            f"{m.estimator:<12}{m.n:>6}{m.var:>12.3e}{m.bias:>11.5f}{m.mse:>12.3e}"
            f"{m.coverage:>10.3f}{m.skewness:>10.3f}{m.reps_ok:>9}"
        )
    return "\n".join(lines)
