"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .dynamics import SystemSpec, sample_noise_block
from .errors import AdaptiveLQRError, ConfigurationError
from .harness import ExperimentConfig, compare_policies, emit, run_experiment, to_csv, to_json
from .metrics import decomposition_check
from .policies import bootstrap_stabilizer, make_policy, simulate
from .presets import preset, random_stable_system
from .riccati import CostPair, DynamicsPair, closed_loop, solve_riccati, spectral_radius
from .seeding import streams

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("adaptive_lqr")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="base seed (overrides config)")
    p.add_argument("--replicates", type=int, help="number of replicates")
    p.add_argument("--horizon", type=int, help="time horizon n")
    p.add_argument("--out", metavar="PATH", help="output file (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--threads", type=int, help="worker threads (default: $ADAPTIVE_LQR_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptive-lqr", description="Adaptive LQR experiments with perturbed greedy regulators.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("riccati", help="solve the Riccati equation and print K, L and the closed-loop radius")
    p.add_argument("--config", metavar="PATH", help="take the system from this config")
    p.add_argument("--preset", default=None, help="named system (default paper-eq11)")
    p.add_argument("--matrices", metavar="JSON", help='inline {"A":..,"B":..,"Q":..,"R":..}')
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("simulate", help="one replicate with its full trace")
    _common(p)
    p.add_argument("--policy", help="policy kind (overrides config)")

    p = sub.add_parser("experiment", help="run all replicates and write records")
    _common(p)
    p.add_argument("--policy", help="policy kind (overrides config)")

    p = sub.add_parser("compare", help="paired comparison of several policies")
    _common(p)
    p.add_argument("--policies", help="comma-separated kinds (default: config 'policies')")

    p = sub.add_parser("validate", help="check a config and report perturbation-design margins")
    _common(p)

    p = sub.add_parser("oracle", help="regret identity checks on random stable systems")
    _common(p)
    p.add_argument("--systems", type=int, default=20)
    return parser


def _load_config(args, **extra) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    over = dict(base_seed=args.seed, replicates=args.replicates, horizon=args.horizon)
    over.update(extra)
    policy = getattr(args, "policy", None)
    if policy:
        over["policy"] = dict(cfg.policy, kind=policy)
    return cfg.with_overrides(**over)


def _write(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fmt(M):
    return np.array2string(np.asarray(M), precision=6, suppress_small=True)


def cmd_riccati(args) -> int:
    if args.matrices:
        try:
            m = json.loads(args.matrices)
            theta, cost = DynamicsPair(np.array(m["A"]), np.array(m["B"])), CostPair(np.array(m["Q"]), np.array(m["R"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad --matrices: {exc}") from exc
    elif args.config:
        spec = ExperimentConfig.from_file(args.config).system_spec
        theta, cost = spec.theta0, spec.cost
    else:
        theta, cost = preset(args.preset or "paper-eq11")
    sol = solve_riccati(theta, cost)
    rho = spectral_radius(closed_loop(theta, sol.L))
    if args.format == "json":
        _write(json.dumps({"K": sol.K.tolist(), "L": sol.L.tolist(), "spectral_radius": rho,
                           "residual": sol.residual, "iterations": sol.iterations}, indent=1) + "\n", None)
    else:
        print(f"K =\n{_fmt(sol.K)}")
        print(f"L =\n{_fmt(sol.L)}")
        print(f"spectral radius of A + B L: {rho:.6f} ({'stable' if rho < 1 else 'UNSTABLE'})")
        print(f"residual {sol.residual:.3e} after {sol.iterations} iterations")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args, replicates=1)
    kind = cfg.policy["kind"]
    seed = cfg.base_seed
    rngs = streams(seed)
    spec = cfg.system_spec
    noise = sample_noise_block(cfg.noise_model, 1, cfg.horizon, rngs["noise"])
    boot = None
    if kind not in ("optimal", "perturbed_linear"):
        b = cfg.bootstrap
        boot = bootstrap_stabilizer(spec, b["n0"], rngs["bootstrap"], cfg.noise_model,
                                    b["input_scale"], b["rounds"], b["certify_draws"])
    policy = make_policy(kind, spec, rngs, bootstrap=boot, perturbation=cfg.perturbation(kind),
                         constraint=cfg.constraint() if cfg.policy["constraint"] is not None else None,
                         v_scale=cfg.policy["v_scale"], sigma_rce=cfg.policy["sigma_rce"],
                         ts_ridge=cfg.policy["ts_ridge"], ts_scale=cfg.policy["ts_scale"])
    sim = simulate(spec, policy, noise, seed=seed)
    tr = sim.trajectory
    if args.format == "json":
        doc = {"config": cfg.to_dict(), "seed": seed, "policy": kind,
               "fallback": bool(boot.fallback) if boot else False,
               "x": tr.x.tolist(), "u": tr.u.tolist(), "v": tr.v.tolist(), "w": tr.w.tolist(),
               "cost": tr.cost.tolist(), "gains": tr.gains.tolist()}
        _write(json.dumps(doc) + "\n", args.out)
        return EXIT_OK
    p, r = spec.p, spec.r
    cols = ["t"] + [f"x{i}" for i in range(p)] + [f"u{i}" for i in range(r)] + [f"v{i}" for i in range(r)] + ["cost"]
    lines = [",".join(cols)]
    for t in range(tr.horizon):
        vals = [str(t)] + [repr(float(a)) for a in np.concatenate([tr.x[t], tr.u[t], tr.v[t], [tr.cost[t]]])]
        lines.append(",".join(vals))
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    results = run_experiment(cfg, args.threads)
    if args.out:
        emit(results, args.format, args.out, cfg)
    else:
        _write(to_csv(results) if args.format == "csv" else to_json(results, cfg), None)
    n_fb = sum(r.fallback_flag for r in results)
    if n_fb:
        log.warning("%d of %d replicates used the fallback stabilizer", n_fb, len(results))
    return EXIT_OK


def cmd_compare(args) -> int:
    extra = {}
    if args.policies:
        extra["policies"] = [k.strip() for k in args.policies.split(",") if k.strip()]
    cfg = _load_config(args, **extra)
    results, summary = compare_policies(cfg, threads=args.threads)
    flat = [r for k in results for r in results[k]]
    if args.out:
        emit(flat, args.format, args.out, cfg, summary)
    else:
        _write(to_csv(flat) if args.format == "csv" else to_json(flat, cfg, summary), None)
    for k, s in summary.items():
        q = s["sup_regret_quartiles"]
        print(f"{k:>18}: sup n^-1/2 R_n quartiles {q[0]:.4g} / {q[1]:.4g} / {q[2]:.4g}", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load_config(args)
    report = cfg.validate()
    print(f"system p={report['p']} r={report['r']}, horizon {report['horizon']}, "
          f"{report['replicates']} replicate(s), policies {', '.join(report['policies'])}")
    for k, m in report["perturbation"].items():
        print(f"  {k}: mode={m['mode']} gamma={m['gamma']:g} r*c_low={m['r'] * m['c_low']:g} < c_high={m['c_high']:g}; "
              f"kappa={m['kappa']:.4f} acceptance={m['acceptance']:.3f}")
    print("config OK")
    return EXIT_OK


def cmd_oracle(args) -> int:
    seed = 0 if args.seed is None else args.seed
    n = 300 if args.horizon is None else args.horizon
    rng = np.random.default_rng(seed)
    worst_tele = worst_cf = 0.0
    ok = True
    for i in range(args.systems):
        p, r = (int(x) for x in rng.integers(1, 4, size=2))
        theta, cost = random_stable_system(p, r, rng)
        spec = SystemSpec(theta, cost)
        rs = streams(int(rng.integers(2**31)))
        boot = bootstrap_stabilizer(spec, 2 * (p + r), rs["bootstrap"])
        policy = make_policy("perturbed_greedy", spec, rs, bootstrap=boot)
        noise = rs["noise"].standard_normal((n, p))
        tr = simulate(spec, policy, noise).trajectory
        chk = decomposition_check(spec, tr)
        d = chk["direct"]
        e_tele = abs(chk["telescoping"] - d) / (1 + abs(d))
        e_cf = abs(chk["terms"].total - chk["telescoping"]) / (1 + abs(chk["telescoping"]))
        worst_tele, worst_cf = max(worst_tele, e_tele), max(worst_cf, e_cf)
        good = e_tele <= 1e-8 and e_cf <= 1e-6
        ok &= good
        print(f"system {i:2d} p={p} r={r}: direct {d:.6g} telescoping err {e_tele:.2e} closed-form err {e_cf:.2e}"
              f" {'ok' if good else 'FAIL'}")
    print(f"worst telescoping {worst_tele:.2e} (tol 1e-8), worst closed-form {worst_cf:.2e} (tol 1e-6)")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "riccati": cmd_riccati,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "compare": cmd_compare,
    "validate": cmd_validate,
    "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AdaptiveLQRError, ArithmeticError, OSError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
