"""Command-line front end.

Every report is JSON (sorted keys) embedding the fully resolved
configuration and seed.  Exit codes: 0 ok, 1 domain error, 2 usage or IO.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, criteria, dgp, engine
from .distributions import ChiSquareMixture, mixture_quantile
from .errors import InvalidData, IOFailure, RerandError, UsageError
from .stats import load_population, read_csv_matrix, sample_covariance, write_population


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(text_or_path: str, what: str):
    """Inline JSON (starting with '{' or '[') or a path to a JSON file."""
    s = text_or_path.strip()
    if s.startswith("{") or s.startswith("["):
        src = s
    else:
        try:
            src = Path(text_or_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot read {what} {text_or_path}: {exc}") from exc
    try:
        return json.loads(src)
    except json.JSONDecodeError as exc:
        raise InvalidData(f"{what} is not valid JSON: {exc}") from exc


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{what} expects comma-separated numbers") from exc


def _ints(text: str, what: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{what} expects comma-separated integers") from exc


def _load_criterion(path: str):
    return criteria.load_document(_read_json(path, "criterion"))


def _load_data(args, tier_sizes=None):
    if not args.data:
        raise UsageError("--data is required")
    pop = load_population(args.data)
    if tier_sizes is not None:
        pop = pop.select(pop.labels, tier_sizes)
    return pop


def _plan(args, pop):
    spec = _read_json(args.plan, "plan") if args.plan else {"kind": "complete"}
    if not isinstance(spec, dict):
        raise InvalidData("plan must be a JSON object")
    return engine.plan_for(pop, spec)


def _config(args, **resolved) -> dict:
    out = {k: v for k, v in vars(args).items() if k not in ("threads", "func", "out", "format")}
    out.update(resolved)
    return out


# ---------------------------------------------------------------------------
# subcommands; each returns (report dict, optional csv rows)
# ---------------------------------------------------------------------------


def cmd_design(args):
    spec, tiers = _load_criterion(args.criterion)
    pop = _load_data(args, tiers)
    plan = _plan(args, pop)
    max_draws = args.draws or 1_000_000
    w, used = engine.rerandomize(pop, plan, spec, args.seed, max_draws)
    scorer = criteria.Scorer(pop)
    families = ["mahalanobis"] + [f for f in criteria.families_used(spec) if f != "mahalanobis"]
    scores = {lab: float(v) for f in families for lab, v in zip(scorer.labels(f), scorer.scores(f, w.w))}
    report = {
        "assignment": w.w.tolist(),
        "n_treated": w.n1,
        "n_control": w.n0,
        "draws_used": used,
        "acceptance_probability": criteria.evaluate(spec, scorer, w.w),
        "scores": scores,
        "criterion": criteria.to_json(spec),
        "plan": plan.to_dict(),
        "seed": args.seed,
        "config": _config(args, draws=max_draws, plan=plan.to_dict()),
    }
    rows = [["unit", "w"]] + [[i, int(v)] for i, v in enumerate(w.w)]
    return report, rows


def cmd_calibrate(args):
    if args.dofs is None:
        raise UsageError("--dofs is required")
    dofs = _ints(args.dofs, "dofs")
    weights = _floats(args.weights, "weights") if args.weights else [1.0] * len(dofs)
    draws = args.draws or 1_000_000
    mix = ChiSquareMixture(tuple(weights), tuple(dofs))
    result = mixture_quantile(mix, args.p, draws, args.seed)
    report = result.to_dict()
    report.update(seed=args.seed, config=_config(args, dofs=dofs, weights=weights, draws=draws))
    return report, None


def cmd_evaluate(args):
    spec, tiers = _load_criterion(args.criterion)
    pop = _load_data(args, tiers)
    plan = _plan(args, pop)
    if args.exact:
        rep = engine.enumerate_assignments(pop, plan, spec)
        draws = rep.draws
    else:
        draws = args.draws or 100_000
        rep = engine.monte_carlo_balance(pop, plan, spec, draws, args.seed, threads=args.threads, coin_flip=args.coin_flip)
    report = rep.to_dict()
    report["config"] = _config(args, draws=draws, plan=plan.to_dict())
    report["seed"] = args.seed
    rows = [["matrix", "row"] + list(rep.labels)]
    for name, mat in (("cov_diff", rep.cov_diff), ("cov_diff_all", rep.cov_diff_all)):
        for lab, row in zip(rep.labels, mat):
            rows.append([name, lab] + [repr(float(v)) for v in row])
    return report, rows


def _score_source(args):
    if args.scores:
        _, h = read_csv_matrix(args.scores)
        return h, None
    if args.dofs:
        return ChiSquareMixture.independent(_ints(args.dofs, "dofs")), args.draws or 1_000_000
    raise UsageError("compare needs --dofs or --scores")


def cmd_compare(args):
    phi, _ = _load_criterion(args.criterion)
    if not args.against:
        raise UsageError("--against is required")
    phi_prime, _ = _load_criterion(args.against)
    source, draws = _score_source(args)
    verdict = analysis.dominance_test(phi, phi_prime, source, draws or 0, args.seed, args.tolerance)
    report = verdict.to_dict()
    report.update(
        criterion=criteria.to_json(phi),
        against=criteria.to_json(phi_prime),
        seed=args.seed,
        config=_config(args, draws=verdict.draws),
    )
    return report, None


def cmd_weights(args):
    if args.r2:
        r2 = _floats(args.r2, "r2")
        dofs = _ints(args.dofs, "dofs") if args.dofs else None
        if dofs is None:
            raise UsageError("--r2 needs --dofs")
        pi = analysis.optimal_tier_weights(r2, dofs)
        report = {"method": "optimal_tier", "r2": r2, "dofs": dofs, "weights": pi.tolist()}
    else:
        pop = _load_data(args)
        if pop.strata is not None:
            plan = _plan(args, pop) if args.plan else engine.plan_for(pop, {"kind": "stratified"})
            cols = pop.remaining_columns()
            covs, zeta, p = [], [], []
            for j, (idx, t) in enumerate(plan.groups(pop.n)):
                covs.append(sample_covariance(pop.values[np.ix_(idx, cols)]))
                zeta.append(idx.size / pop.n)  # lambda_j = n_j / n
                p.append(t / idx.size)
            pi = analysis.heuristic_stratum_weights(covs, zeta, p)
            report = {"method": "heuristic_stratum", "zeta": zeta, "propensities": p, "weights": pi.tolist()}
        else:
            plan = _plan(args, pop)
            pw = plan.n_treated / pop.n
            sizes = pop.tier_sizes or (pop.k,)
            r2 = analysis.tier_r2(pop, pw, sizes)
            pi = analysis.optimal_tier_weights(r2, sizes)
            report = {"method": "optimal_tier", "r2": r2.tolist(), "dofs": list(sizes), "weights": pi.tolist()}
    report.update(seed=args.seed, config=_config(args))
    return report, None


def _dgp_from_json(doc: dict):
    kind = doc.get("kind", "ellipsoidal")
    if kind == "ellipsoidal":
        spec = dgp.EllipsoidalSpec(doc["mu"], doc["sigma"], doc.get("family", "normal"), doc.get("df"))
        return lambda n, seed: dgp.sample_ellipsoidal(spec, n, seed, doc.get("labels"))
    if kind == "conditional":
        fams = doc.get("families")
        spec = dgp.ConditionalEllipsoidalSpec(
            doc["probabilities"],
            doc["conditional_mu"],
            doc["sigma"],
            tuple(doc["levels"]) if doc.get("levels") else None,
            tuple(tuple(f) for f in fams) if fams else None,
            doc.get("special_label", "s"),
        )
        return lambda n, seed: dgp.sample_conditional_ellipsoidal(spec, n, seed)
    raise InvalidData(f"unknown dgp kind {kind!r}")


def cmd_simulate(args):
    doc = _read_json(args.dgp, "dgp") if args.dgp else None
    if not isinstance(doc, dict):
        raise UsageError("--dgp must give a JSON object")
    if not args.n:
        raise UsageError("--n is required")
    try:
        pop = _dgp_from_json(doc)(args.n, args.seed)
    except KeyError as exc:
        raise InvalidData(f"dgp is missing field {exc}") from exc
    if doc.get("tier_sizes"):
        pop = pop.select(pop.labels, doc["tier_sizes"])
    if doc.get("outcomes"):
        o = doc["outcomes"]
        pop = dgp.attach_outcomes(pop, dgp.PotentialOutcomeSpec(
            o["beta1"], o["beta0"], o.get("a1", 0.0), o.get("a0", 0.0), o.get("noise_sd", 0.0)), args.seed)
    report = {
        "n": pop.n,
        "labels": list(pop.labels),
        "tier_sizes": list(pop.tier_sizes) if pop.tier_sizes else None,
        "empty_levels": list(pop.empty_levels),
        "column_means": pop.values.mean(axis=0).tolist(),
        "seed": args.seed,
        "config": _config(args),
    }
    if args.data:
        write_population(pop, args.data)
        report["written"] = str(args.data)
    return report, None


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rerand", description="Rerandomization designs and balance diagnostics.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--draws", type=int, default=None)
        p.add_argument("--out", default=None, help="output path (default stdout)")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--threads", type=int, default=1)
        return p

    p = common(sub.add_parser("design", help="draw one accepted assignment"))
    p.add_argument("--data", required=True)
    p.add_argument("--criterion", required=True)
    p.add_argument("--plan", default=None)
    p.set_defaults(func=cmd_design)

    p = common(sub.add_parser("calibrate", help="threshold for a chi-square mixture"))
    p.add_argument("--dofs", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--p", type=float, default=0.01, help="target acceptance probability")
    p.set_defaults(func=cmd_calibrate)

    p = common(sub.add_parser("evaluate", help="balance report for a criterion"))
    p.add_argument("--data", required=True)
    p.add_argument("--criterion", required=True)
    p.add_argument("--plan", default=None)
    p.add_argument("--exact", action="store_true", help="enumerate every assignment")
    p.add_argument("--coin-flip", action="store_true", help="use coin flips instead of phi weights")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("compare", help="dominance test of two criteria"))
    p.add_argument("--criterion", required=True)
    p.add_argument("--against", required=True)
    p.add_argument("--dofs", default=None)
    p.add_argument("--scores", default=None, help="CSV of score draws")
    p.add_argument("--tolerance", type=float, default=3.0)
    p.set_defaults(func=cmd_compare)

    p = common(sub.add_parser("weights", help="recommended unified weights"))
    p.add_argument("--r2", default=None)
    p.add_argument("--dofs", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--plan", default=None)
    p.set_defaults(func=cmd_weights)

    p = common(sub.add_parser("simulate", help="generate a synthetic population"))
    p.add_argument("--dgp", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--data", default=None, help="CSV path to write")
    p.set_defaults(func=cmd_simulate)
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        try:
            Path(out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {out}: {exc}") from exc
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        report, rows = args.func(args)
        if args.format == "csv":
            if rows is None:
                raise UsageError(f"{args.command} has no CSV output")
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows(rows)
            _emit(buf.getvalue(), args.out)
        else:
            _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    except RerandError as exc:
        sys.stderr.write(json.dumps({"error": exc.to_dict()}, sort_keys=True) + "\n")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
