"""Command-line interface: ``blipvar {estimate, simulate, quantile, check-eic}``.

Exit codes: 0 success, 1 failed oracle check, 2 input/output problem,
3 invalid input or flags, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from .data import load_csv
from .errors import BlipvarError, InputFileError, ValidationError
from .inference import DEFAULT_DRAWS, simultaneous_quantile

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4

SEED_ENV = "BLIPVAR_SEED"
DEMO_CSV = "demo.csv"
BUNDLED_CONFIGS = {"table1-lr": "table1_lr.json"}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as validation failures (exit 3)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _resource(name: str) -> Path:
    return Path(str(resources.files("blipvar") / "resources" / name))


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be a non-negative integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"seed must be a non-negative integer, got {v}")
    return v


def _alpha(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha must be a number, got {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {v}")
    return v


def _rho(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rho must be a number, got {text!r}") from None
    if not -1.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"rho must lie in [-1, 1], got {v}")
    return v


def _common(p, *, folds=False):
    p.add_argument("--seed", type=_seed, default=None, help=f"RNG seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--alpha", type=_alpha, default=0.05, help="1 - confidence level (default 0.05)")
    if folds:
        p.add_argument("--folds", type=_positive_int, default=10, help="cross-fitting folds (default 10)")
    p.add_argument("--out", default=None, help="write output here instead of stdout")
    p.add_argument("--format", choices=("json", "table"), default="table")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blipvar", description="Targeted estimation of the mean and variance of treatment effects.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="estimate ATE and VTE from a CSV file")
    est.add_argument("csv", nargs="?", help="input CSV (omit with --demo)")
    est.add_argument("--demo", action="store_true", help="use the bundled demo CSV")
    est.add_argument("--y", default="Y", help="outcome column (default Y)")
    est.add_argument("--a", default="A", help="treatment column (default A)")
    est.add_argument("--w", default=None, help="comma-separated covariate columns (default: all others)")
    est.add_argument("--y-bounds", default=None, help="LOWER,UPPER range used to rescale a continuous outcome")
    est.add_argument("--estimator", choices=("tmle", "cv-tmle", "lr-plugin"), default="cv-tmle")
    est.add_argument("--known-g", default=None, help="constant propensity in (0,1) or a built-in DGP name")
    est.add_argument("--g-trunc", type=float, default=0.01, help="propensity truncation level (default 0.01)")
    est.add_argument("--sqrt-vte", action="store_true", help="add a sqrt(VTE) row to the report")
    est.add_argument("--draws", type=_positive_int, default=DEFAULT_DRAWS, help="Monte-Carlo draws for the simultaneous quantile")
    _common(est, folds=True)

    sim = sub.add_parser("simulate", help="run a simulation campaign from a JSON config")
    sim.add_argument("config", help=f"campaign JSON path, or one of {sorted(BUNDLED_CONFIGS)}")
    sim.add_argument("--parallelism", type=_positive_int, default=None, help="override the config's worker count")
    sim.add_argument("--reps", type=_positive_int, default=None, help="override the config's replicate count")
    _common(sim)

    qt = sub.add_parser("quantile", help="simultaneous max-|Z| quantile")
    grp = qt.add_mutually_exclusive_group(required=True)
    grp.add_argument("--rho", type=_rho, help="correlation of a bivariate normal")
    grp.add_argument("--corr-file", help="JSON file holding a square correlation matrix")
    qt.add_argument("--draws", type=_positive_int, default=DEFAULT_DRAWS)
    _common(qt)

    ck = sub.add_parser("check-eic", help="verify the efficient influence curve on random finite supports")
    ck.add_argument("--cases", type=_positive_int, default=20, help="number of (distribution, score) cases")
    ck.add_argument("--strata", type=_positive_int, default=4, help="covariate support size (default 4)")
    ck.add_argument("--tol", type=float, default=1e-6)
    ck.add_argument("--mutate", choices=("d2-sign",), default=None, help=argparse.SUPPRESS)
    _common(ck)
    return parser


def resolve_seed(flag):
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        v = int(env)
    except ValueError:
        raise ValidationError(f"${SEED_ENV} must be a non-negative integer, got {env!r}") from None
    if v < 0:
        raise ValidationError(f"${SEED_ENV} must be a non-negative integer, got {v}")
    return v


def _emit(text: str, out) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"cannot write {out}: {exc}") from exc


def _known_g(text, p):
    from .simlab.dgp import DGP_KINDS, DgpSpec, build_dgp

    if text in DGP_KINDS:
        if p != 4:
            raise ValidationError(f"--known-g {text} needs exactly 4 covariate columns, got {p}")
        return build_dgp(DgpSpec(text)).g0
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(
            f"--known-g must be a constant in (0, 1) or one of {', '.join(DGP_KINDS)}; got {text!r}"
        ) from None
    if not 0.0 < v < 1.0:
        raise ValidationError(f"--known-g constant must lie in (0, 1), got {v}")
    return v


def cmd_estimate(args) -> int:
    from .estimators import estimate
    from .plugin_lr import plugin_estimate

    if args.demo == (args.csv is not None):
        raise ValidationError("give exactly one of a CSV path or --demo")
    if not 0.0 <= args.g_trunc < 0.5:
        raise ValidationError("--g-trunc must lie in [0, 0.5)")
    bounds = None
    if args.y_bounds is not None:
        try:
            bounds = tuple(float(x) for x in args.y_bounds.split(","))
        except ValueError:
            raise ValidationError(f"--y-bounds must be LOWER,UPPER; got {args.y_bounds!r}") from None
        if len(bounds) != 2 or not bounds[1] > bounds[0]:
            raise ValidationError("--y-bounds must be LOWER,UPPER with LOWER < UPPER")
    if args.estimator == "lr-plugin" and args.known_g is not None:
        raise ValidationError("--known-g does not apply to --estimator lr-plugin")
    seed = resolve_seed(args.seed)
    w_cols = [c.strip() for c in args.w.split(",")] if args.w else None
    path = _resource(DEMO_CSV) if args.demo else args.csv
    ds = load_csv(path, args.y, args.a, w_cols, bounds)
    if args.estimator == "lr-plugin":
        _, report = plugin_estimate(ds, alpha=args.alpha, include_sqrt=args.sqrt_vte, draws=args.draws, seed=seed)
    else:
        known = _known_g(args.known_g, ds.p) if args.known_g is not None else None
        report = estimate(
            ds, args.estimator, known_g=known, folds=args.folds, g_trunc=args.g_trunc,
            alpha=args.alpha, include_sqrt=args.sqrt_vte, draws=args.draws, seed=seed,
        ).report
    _emit(report.to_json() if args.format == "json" else report.format_table(), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from dataclasses import replace

    from .simlab.harness import CampaignConfig, format_metrics, run_campaign, write_campaign

    src = _resource(BUNDLED_CONFIGS[args.config]) if args.config in BUNDLED_CONFIGS else Path(args.config)
    if not src.is_file():
        raise InputFileError(f"no such config file: {src}")
    cfg = CampaignConfig.load(src)
    changes = {}
    if args.seed is not None or os.environ.get(SEED_ENV):
        changes["seed"] = resolve_seed(args.seed)
    if args.parallelism is not None:
        changes["parallelism"] = args.parallelism
    if args.reps is not None:
        changes["reps"] = args.reps
    if args.alpha != 0.05:
        changes["alpha"] = args.alpha
    cfg = replace(cfg, **changes)
    result = run_campaign(cfg)
    if args.out is not None:
        try:
            write_campaign(result, args.out)
        except OSError as exc:
            raise InputFileError(f"cannot write to {args.out}: {exc}") from exc
    if args.format == "json":
        from dataclasses import asdict

        text = json.dumps(
            {
                "metrics": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(m).items()}
                            for m in result.metrics],
                "failures": [list(f) for f in result.failures],
            },
            indent=2,
        )
    else:
        text = format_metrics(result.metrics)
        if result.failures:
            text += f"\n{len(result.failures)} replicate run(s) failed and were excluded"
    sys.stdout.write(text + "\n")
    return EXIT_OK


def _read_corr(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputFileError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict):
        data = data.get("corr")
    try:
        m = np.asarray(data, dtype=float)
    except (TypeError, ValueError):
        raise ValidationError(f"{path} must hold a numeric square matrix") from None
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"{path} must hold a square matrix")
    return m


def cmd_quantile(args) -> int:
    seed = resolve_seed(args.seed)
    corr = np.array([[1.0, args.rho], [args.rho, 1.0]]) if args.corr_file is None else _read_corr(args.corr_file)
    q = simultaneous_quantile(corr, args.alpha, args.draws, seed)
    if args.format == "json":
        text = json.dumps({"q": q, "alpha": args.alpha, "draws": args.draws, "seed": seed, "corr": corr.tolist()})
    else:
        text = f"{q:.6f}"
    _emit(text, args.out)
    return EXIT_OK


def _flipped_d2(p):
    from .eic import exact_eic

    d = exact_eic(p)
    d[..., 1] *= -1.0
    return d


def cmd_check_eic(args) -> int:
    from .eic import exact_eic, pathwise_derivative_oracle, random_distribution, random_score

    seed = resolve_seed(args.seed)
    eic = _flipped_d2 if args.mutate == "d2-sign" else exact_eic
    rng = np.random.default_rng(seed)
    failures = []
    worst = 0.0
    for i in range(args.cases):
        p = random_distribution(rng, args.strata)
        s = random_score(rng, p)
        deriv, inner = pathwise_derivative_oracle(p, s, eic=eic)
        gap = float(np.max(np.abs(deriv - inner)))
        worst = max(worst, gap)
        if not gap <= args.tol:
            failures.append({
                "case": i,
                "gap": gap,
                "derivative": deriv.tolist(),
                "inner_product": inner.tolist(),
                "p_w": p.p_w.tolist(),
                "g1": p.g1.tolist(),
                "qbar0": p.qbar(0).tolist(),
                "qbar1": p.qbar(1).tolist(),
                "score": s.tolist(),
            })
    if args.format == "json":
        text = json.dumps(
            {"cases": args.cases, "passed": args.cases - len(failures), "max_gap": worst, "tol": args.tol,
             "seed": seed, "failures": failures},
            indent=2,
        )
    else:
        lines = [f"check-eic: {args.cases - len(failures)}/{args.cases} cases passed "
                 f"(max gap {worst:.3e}, tol {args.tol:g}, seed {seed})"]
        for f in failures:
            lines.append(f"FAIL case {f['case']}: gap {f['gap']:.3e}; derivative {f['derivative']} "
                         f"vs E[D*S] {f['inner_product']}")
            lines.append(f"  p_w={f['p_w']} g1={f['g1']} qbar0={f['qbar0']} qbar1={f['qbar1']}")
        text = "\n".join(lines)
    _emit(text, args.out)
    return EXIT_CHECK_FAILED if failures else EXIT_OK


_COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "quantile": cmd_quantile, "check-eic": cmd_check_eic}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return _COMMANDS[args.command](args)
    except BlipvarError as exc:
        print(f"blipvar: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
