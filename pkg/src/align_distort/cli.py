"""Command-line experiment runner.

Subcommands: gen, run, verify, winrates, mle, policy.  Every output file
embeds the resolved configuration; identical configs and seeds give
byte-identical outputs.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys

import numpy as np

from . import instances as gen_mod
from .core import (empirical_win_rates, expected_margins, expected_win_rates, instance_to_dict,
                   load_instance, sample_comparisons)
from .distortion import (METHODS, borda_bound, convergence_tables, distortion_empirical,
                         distortion_population, population_policy, reports_to_csv,
                         reports_to_json)
from .mle import fit_bt_mle, fit_bt_mle_population
from .policy import (KLBall, dpo_policy, kl_div, linear_max_over_ball, nlhf_policy,
                     optimal_policy, regularized_linear_max)
from .rules import margin_matrix
from . import verify as verify_mod

log = logging.getLogger("align_distort")

# flags a config file may set, per subcommand (dest names)
COMMON_KEYS = {"instance", "method", "mode", "pi_ref", "tau", "lam", "n", "d", "trials", "seed",
               "tol", "out", "format", "ridge", "n_grid", "quantity", "betas"}


class UsageError(ValueError):
    pass


def _dump(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "out"}


def _matrix_csv(mat, config: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", json.dumps(config, sort_keys=True)])
    for row in np.asarray(mat).tolist():
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _vector_out(name: str, vec, config: dict, fmt: str) -> str:
    vec = np.asarray(vec).tolist()
    if fmt == "json":
        return json.dumps({"schema_version": 1, "config": config, name: vec},
                          indent=1, sort_keys=True) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", "config", "index", name])
    for i, v in enumerate(vec):
        w.writerow([1, json.dumps(config, sort_keys=True), i, repr(v)])
    return buf.getvalue()


def _parse_pi_ref(value, m: int) -> np.ndarray:
    if value in (None, "uniform"):
        return np.full(m, 1.0 / m)
    if isinstance(value, (list, tuple)):
        vec = np.array(value, float)
    else:
        try:
            vec = np.array([float(v) for v in str(value).split(",")])
        except ValueError:
            with open(value) as fh:
                vec = np.array(json.load(fh), float)
    if vec.shape != (m,):
        raise UsageError(f"--pi-ref has {vec.size} entries but the instance has m = {m}")
    return vec


def _ball(cfg: dict, m: int) -> KLBall:
    pi_ref = _parse_pi_ref(cfg.get("pi_ref"), m)
    tau = cfg.get("tau")
    tau = math.log(m) if tau is None else float(tau)
    return KLBall(pi_ref, tau)


def _merge_config(args: argparse.Namespace, allowed: set) -> dict:
    """Flags override config-file values; unknown config keys are rejected."""
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        if "lambda" in file_cfg:
            file_cfg["lam"] = file_cfg.pop("lambda")
        unknown = set(file_cfg) - allowed
        if unknown:
            raise UsageError(f"unknown config field(s): {sorted(unknown)}")
        cfg.update(file_cfg)
        log.info("config file %s: %s", args.config, json.dumps(file_cfg, sort_keys=True))
    flags = {k: v for k, v in vars(args).items()
             if k in allowed and v is not None}
    log.info("command-line flags: %s", json.dumps(flags, sort_keys=True, default=str))
    cfg.update(flags)
    return cfg


FLAG_NAMES = {"lam": "lambda"}


def _need(cfg: dict, key: str):
    if cfg.get(key) is None:
        flag = FLAG_NAMES.get(key, key).replace("_", "-")
        raise UsageError(f"missing required setting --{flag}")
    return cfg[key]


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    name = args.construction
    if name == "universal-lb":
        con = gen_mod.gen_universal_lb(args.m, args.beta, args.eps, args.xi)
    elif name == "borda-lb":
        gamma = args.gamma if args.gamma is not None else gen_mod.gamma_star(args.beta)
        eps_prime = args.eps_prime if args.eps_prime is not None else args.eps ** 2
        con = gen_mod.gen_borda_lb(args.beta, gamma, args.eps, eps_prime, args.mu_a, args.mu_c)
    elif name == "rlhf-lb":
        con = gen_mod.gen_rlhf_lb(args.beta, args.m, args.eps, args.tau if args.tau else 1.0)
    elif name == "unbounded-seq":
        con = gen_mod.gen_unbounded_seq(args.beta, args.m, args.eps)
    else:  # random
        rng = np.random.default_rng(args.seed)
        inst = gen_mod.random_instance(rng, m_range=(args.m, args.m), beta=args.beta,
                                       pairs=args.pairs)
        con = gen_mod.Construction(inst, {"construction": "random", "seed": args.seed})
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    analytics = dict(con.analytics)
    if con.ball is not None:
        analytics["ball"] = {"pi_ref": con.ball.pi_ref.tolist(), "tau": con.ball.tau}
    rates = expected_win_rates(con.instance)
    off = ~np.eye(con.instance.m, dtype=bool)
    analytics["max_win_rate_deviation"] = float(np.max(np.abs(rates[off] - 0.5)))
    analytics["config"] = config
    prefix = args.out or name
    with open(prefix + ".instance.json", "w") as fh:
        json.dump(instance_to_dict(con.instance), fh, indent=1)
        fh.write("\n")
    with open(prefix + ".analytics.json", "w") as fh:
        json.dump(verify_mod._py(analytics), fh, indent=1, sort_keys=True)
        fh.write("\n")
    if name == "unbounded-seq":
        # bar-chart data: utilities per type and consecutive win rates
        u = con.instance.mixture.utils
        with open(prefix + ".sequence.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "u1", "u2", "u3", "avg_util", "win_rate_vs_prev"])
            for t in range(con.instance.m):
                w.writerow([t + 1, *(repr(float(v)) for v in u[:, t]), repr(float(u[:, t].mean())),
                            repr(float(rates[t, t - 1])) if t else ""])
    print(f"{name}: m = {con.instance.m}, beta = {con.instance.beta}")
    print(f"  max |p(x>y) - 1/2| = {analytics['max_win_rate_deviation']:.3e}")
    for key in ("distortion_floor", "realized_ratio", "limit_ratio", "eps", "delta",
                "rlhf_ratio_if_last"):
        if key in analytics:
            print(f"  {key} = {analytics[key]}")
    print(f"  wrote {prefix}.instance.json and {prefix}.analytics.json")
    return 0


# ---------------------------------------------------------------- run

RUN_KEYS = COMMON_KEYS


def cmd_run(args) -> int:
    cfg = _merge_config(args, RUN_KEYS)
    mode = cfg.get("mode") or "population"
    fmt = cfg.get("format") or "csv"
    tol = float(cfg.get("tol") or 1e-9)
    if mode == "curves":
        betas = [float(b) for b in str(cfg.get("betas") or "0.5,1,2,4,8,16").split(",")]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "nlhf_bound", "borda_bound"])
        for b in betas:
            w.writerow([repr(b), repr(gen_mod.nlhf_bound(b)), repr(borda_bound(b))])
        _dump(buf.getvalue(), cfg.get("out"))
        return 0
    inst = load_instance(_need(cfg, "instance"))
    ball = _ball(cfg, inst.m)
    seed = int(cfg.get("seed") or 0)
    # the output path is not part of the experiment, so two runs of one
    # config written to different files stay byte-identical
    echo = {"config": json.dumps(_echo(cfg), sort_keys=True)}
    if mode == "convergence":
        q = cfg.get("quantity") or "win_rates"
        grid = [int(float(v)) for v in str(cfg.get("n_grid") or "1000,10000,100000").split(",")]
        tables = convergence_tables(inst, q.split(","), grid, int(cfg.get("d") or 1),
                                    int(cfg.get("trials") or 10), seed)
        if fmt == "json":
            text = json.dumps({"schema_version": 1, "config": _echo(cfg),
                               "tables": {k: t.to_dict() for k, t in tables.items()}},
                              indent=1, sort_keys=True) + "\n"
        else:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["schema_version", "config", "quantity", "n", "mean_error", "std_err",
                        "slope"])
            for k, t in tables.items():
                for n, e, s in zip(t.n, t.mean_error, t.std_err):
                    w.writerow([1, echo["config"], k, n, repr(e), repr(s), repr(t.slope)])
            text = buf.getvalue()
        _dump(text, cfg.get("out"))
        return 0
    methods = [cfg.get("method") or "nlhf"]
    if methods == ["all"]:
        methods = list(METHODS)
    reports = []
    for meth in methods:
        if mode == "population":
            reports.append(distortion_population(inst, meth, ball, tol))
        elif mode == "empirical":
            reports.append(distortion_empirical(inst, meth, ball, int(_need(cfg, "n")),
                                                int(cfg.get("d") or 1),
                                                int(cfg.get("trials") or 1), seed, tol,
                                                float(cfg.get("ridge") or 1e-9)))
        else:
            raise UsageError(f"unknown mode {mode!r}")
    if fmt == "json":
        text = reports_to_json(reports, {"config": _echo(cfg)})
    else:
        text = reports_to_csv(reports, echo)
    _dump(text, cfg.get("out"))
    return 0


# ---------------------------------------------------------------- verify

def cmd_verify(args) -> int:
    def progress(res, secs):
        status = "PASS" if res.passed else "FAIL"
        print(f"[{status}] criterion {res.id}: {res.name} ({secs:.1f}s)", file=sys.stderr)

    report, timings = verify_mod.run_suite(args.suite, args.seed, progress)
    _dump(verify_mod.report_json(report), args.out)
    if args.timings:
        with open(args.timings, "w") as fh:
            json.dump(timings, fh, indent=1, sort_keys=True)
            fh.write("\n")
    if not report["passed"]:
        print(f"failed criteria: {report['failed']}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- small tools

def _counts_or_none(cfg, inst):
    if cfg.get("n") is None:
        return None
    return sample_comparisons(inst, int(cfg["n"]), int(cfg.get("d") or 1), int(cfg.get("seed") or 0))


def cmd_winrates(args) -> int:
    cfg = _merge_config(args, COMMON_KEYS)
    inst = load_instance(_need(cfg, "instance"))
    counts = _counts_or_none(cfg, inst)
    rates = expected_win_rates(inst) if counts is None else empirical_win_rates(counts)
    fmt = cfg.get("format") or "csv"
    if fmt == "json":
        obj = {"schema_version": 1, "config": _echo(cfg), "win_rates": rates.tolist()}
        if counts is not None:
            obj["counts"] = counts.wins.tolist()
        text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    else:
        text = _matrix_csv(rates, _echo(cfg))
    _dump(text, cfg.get("out"))
    return 0


def cmd_mle(args) -> int:
    cfg = _merge_config(args, COMMON_KEYS)
    inst = load_instance(_need(cfg, "instance"))
    counts = _counts_or_none(cfg, inst)
    tol = float(cfg.get("tol") or 1e-10)
    if counts is None:
        r = fit_bt_mle_population(expected_win_rates(inst), inst.pairs, tol)
    else:
        ridge = cfg.get("ridge")
        r = fit_bt_mle(counts, 1e-9 if ridge is None else float(ridge), tol)
    _dump(_vector_out("reward", r, _echo(cfg), cfg.get("format") or "csv"), cfg.get("out"))
    return 0


def cmd_policy(args) -> int:
    cfg = _merge_config(args, COMMON_KEYS)
    inst = load_instance(_need(cfg, "instance"))
    ball = _ball(cfg, inst.m)
    method = cfg.get("method") or "nlhf"
    tol = float(cfg.get("tol") or 1e-9)
    counts = _counts_or_none(cfg, inst)
    if method == "optimal":
        pi = optimal_policy(inst, ball)
    elif method == "dpo":
        lam = float(_need(cfg, "lam"))
        if counts is None:
            r = fit_bt_mle_population(expected_win_rates(inst), inst.pairs)
            pi = regularized_linear_max(r, ball.pi_ref, lam)
        else:
            pi = dpo_policy(counts, ball.pi_ref, lam)
    elif counts is None:
        pi = population_policy(inst, method, ball, tol)
    elif method == "rlhf":
        pi = linear_max_over_ball(fit_bt_mle(counts), ball)
    elif method == "nlhf":
        pi = nlhf_policy(margin_matrix(empirical_win_rates(counts)), ball, tol)
    else:
        from .distortion import empirical_policy
        pi = empirical_policy(counts, method, ball, tol)
    _dump(_vector_out("policy", pi, _echo(cfg), cfg.get("format") or "csv"), cfg.get("out"))
    log.info("KL(pi || pi_ref) = %.6g, tau = %.6g", kl_div(pi, ball.pi_ref), ball.tau)
    return 0


# ---------------------------------------------------------------- parser

def _add_data_flags(p, methods=None):
    p.add_argument("--config", help="JSON file with settings (flags override it)")
    p.add_argument("--instance", help="instance JSON path")
    if methods:
        p.add_argument("--method", choices=methods)
    p.add_argument("--pi-ref", dest="pi_ref",
                   help="'uniform', comma-separated probabilities, or a JSON file")
    p.add_argument("--tau", type=float, help="KL budget (default log m)")
    p.add_argument("--lambda", dest="lam", type=float, help="KL regularization strength")
    p.add_argument("--n", type=int, help="number of users (omit for population mode)")
    p.add_argument("--d", type=int, help="comparisons per user")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--ridge", type=float)
    p.add_argument("--out", help="output path ('-' or omitted: stdout)")
    p.add_argument("--format", choices=["csv", "json"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="align-distort", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log configuration to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="materialize a construction")
    g.add_argument("construction",
                   choices=["universal-lb", "borda-lb", "rlhf-lb", "unbounded-seq", "random"])
    g.add_argument("--m", type=int)
    g.add_argument("--beta", type=float, required=True)
    g.add_argument("--eps", type=float)
    g.add_argument("--xi", type=float, default=1.0)
    g.add_argument("--gamma", type=float, help="borda-lb gap (default: optimal gap)")
    g.add_argument("--eps-prime", dest="eps_prime", type=float)
    g.add_argument("--mu-a", dest="mu_a", type=float, default=1e-5)
    g.add_argument("--mu-c", dest="mu_c", type=float, default=1e-5)
    g.add_argument("--tau", type=float)
    g.add_argument("--pairs", choices=["mu", "nu"], default="mu")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="output prefix")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="distortion and convergence experiments")
    _add_data_flags(r, [*METHODS, "all"])
    r.add_argument("--mode", choices=["population", "empirical", "convergence", "curves"])
    r.add_argument("--quantity", help="convergence: win_rates, borda or both comma-separated")
    r.add_argument("--n-grid", dest="n_grid", help="convergence: comma-separated n values")
    r.add_argument("--betas", help="curves: comma-separated beta values")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run acceptance suites")
    v.add_argument("suite", choices=sorted(verify_mod.SUITES))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="report path (default stdout)")
    v.add_argument("--timings", help="write per-criterion wall times here")
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("winrates", help="expected or sampled win-rate matrix")
    _add_data_flags(w)
    w.set_defaults(func=cmd_winrates)

    mm = sub.add_parser("mle", help="Bradley-Terry rewards")
    _add_data_flags(mm)
    mm.set_defaults(func=cmd_mle)

    p = sub.add_parser("policy", help="policy of one method")
    _add_data_flags(p, [*METHODS, "dpo", "optimal"])
    p.set_defaults(func=cmd_policy)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "gen":
        missing = {"universal-lb": ["m", "eps"], "borda-lb": ["eps"],
                   "unbounded-seq": ["m", "eps"], "random": ["m"]}.get(args.construction, [])
        for key in missing:
            if getattr(args, key) is None:
                ap.error(f"gen {args.construction} requires --{key}")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("residual", "alternatives"):
            if hasattr(exc, attr):
                err[attr] = verify_mod._py(getattr(exc, attr))
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
