"""Command-line front end.

Every subcommand writes deterministic files under --output-dir and echoes a
short summary.  Exit codes: 0 success, 1 bad input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import equilibria, harness, mechanisms, stfs, textio, valuation
from .errors import AuctionError, ValidationError
from .mechanisms import AuctionInstance, MsaaConfig
from .valuation import ValuationParams

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_grid(text: str) -> np.ndarray:
    """``lo:hi:n`` inclusive linspace."""
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise ValidationError(f"grid must be lo:hi:n, got {text!r}") from exc
    if n < 1 or not hi >= lo:
        raise ValidationError(f"bad grid {text!r}")
    return np.linspace(lo, hi, n)


def parse_matrix(text: str) -> np.ndarray:
    """``r1c1,r1c2;r2c1,r2c2`` -> 2-D array."""
    try:
        rows = [[float(x) for x in row.split(",")] for row in text.strip().split(";") if row.strip()]
    except ValueError as exc:
        raise ValidationError(f"cannot parse matrix {text!r}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValidationError("matrix rows must be non-empty and of equal length")
    return np.array(rows)


def parse_int_list(text: str) -> list:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_value(text: str):
    try:
        return harness.tomllib.loads(f"v = {text}")["v"]
    except harness.tomllib.TOMLDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _flatten(cfg: dict) -> dict:
    flat = {}
    for k, v in cfg.items():
        if isinstance(v, dict):
            flat.update(_flatten(v))
        else:
            flat[k.replace("-", "_")] = v
    return flat


def _valuation_args(p):
    g = p.add_argument_group("valuation")
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=1.0)
    g.add_argument("--a", type=float, default=0.0)
    g.add_argument("--b", type=float, default=1.0)
    g.add_argument("--sigma", type=float, default=1.0)


def _msaa_args(p):
    g = p.add_argument_group("mSAA")
    g.add_argument("--reservation", type=float, default=0.0)
    g.add_argument("--epsilon", type=float, default=None)
    g.add_argument("--I-th", dest="I_th", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--output-dir", default=".")
    common.add_argument("--config", default=None)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    parser = _Parser(prog="stfs-auction", allow_abbrev=False,
                     description="Auction mechanisms for STFS slot allocation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", parents=[common], allow_abbrev=False,
                       help="draw valuations and report the KS distance")
    _valuation_args(p)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--I", type=int, default=1000)

    p = sub.add_parser("bne", parents=[common], allow_abbrev=False,
                       help="analytic vs Monte Carlo FPSB equilibrium curve")
    _valuation_args(p)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--I", type=int, default=2000)
    p.add_argument("--grid", default="0.1:4.0:200")

    p = sub.add_parser("ret", parents=[common], allow_abbrev=False,
                       help="FPSB vs SPSB expected revenue")
    _valuation_args(p)
    p.add_argument("--K", default="2,5,10")
    p.add_argument("--replications", type=int, default=100_000)

    p = sub.add_parser("auction", parents=[common], allow_abbrev=False,
                       help="run one auction on an inline value matrix")
    p.add_argument("--mechanism", required=False, default="vcg")
    p.add_argument("--values", required=False, default=None)
    p.add_argument("--zeta", type=float, default=0.0)
    _msaa_args(p)

    p = sub.add_parser("msaa-trace", parents=[common], allow_abbrev=False,
                       help="run mSAA and dump its iteration trace")
    _valuation_args(p)
    p.add_argument("--values", default=None)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--N", type=int, default=3)
    p.add_argument("--zeta", type=float, default=0.0)
    _msaa_args(p)

    p = sub.add_parser("sweep", parents=[common], allow_abbrev=False,
                       help="run a seeded experiment sweep")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("disperse", parents=[common], allow_abbrev=False,
                       help="optimise dispersion elements for an allocation")
    p.add_argument("--K", type=int, default=12)
    p.add_argument("--NT", type=int, default=4)
    p.add_argument("--NF", type=int, default=3)
    p.add_argument("--mechanism", default=None,
                   help="allocate slots with this mechanism instead of node k -> slot k")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.5)
    p.add_argument("--hw-noise", dest="hw_noise", type=float, default=0.0)
    p.add_argument("--p-min", dest="p_min", type=float, default=0.0)
    p.add_argument("--p-max", dest="p_max", type=float, default=1e4)
    p.add_argument("--power-cap", dest="power_cap", type=float, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--phase-method", dest="phase_method", default="closed",
                   choices=("closed", "gradient"))
    p.add_argument("--max-iterations", dest="max_iterations", type=int, default=10_000)
    _valuation_args(p)
    return parser


# --- subcommands -----------------------------------------------------------

def _params(args) -> ValuationParams:
    return ValuationParams(args.alpha, args.beta, args.a, args.b, args.sigma)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _msaa_config(args) -> MsaaConfig:
    return MsaaConfig(args.reservation, args.epsilon, args.I_th)


def _write(args, name, text):
    path = os.path.join(args.output_dir, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)
                              for x in r))
    return "\n".join(lines) + "\n"


def cmd_sample(args):
    params = _params(args)
    m = valuation.sample(params, args.K, args.I, _seed(args))
    rows = [(k, i, m.v_h[k, i], m.v_g[k, i], m.v[k, i]) for k in range(m.K) for i in range(m.I)]
    _write(args, "samples.csv", _csv_text(("k", "i", "v_h", "v_g", "v"), rows))
    print(f"ks_distance={valuation.ks_distance(params, m.v)!r}")


def cmd_bne(args):
    params = _params(args)
    grid = parse_grid(args.grid)
    grid = grid[grid >= params.lower]
    ana = equilibria.bne_curve_analytic(params, args.K, grid)
    draws = valuation.sample(params, args.K, args.I, _seed(args))
    num = equilibria.bne_curve_numeric(draws, grid)
    mae = equilibria.mae_db(ana, num)
    text = _csv_text(("v", "analytic", "numeric"), zip(grid, ana.bids, num.bids))
    text += f"# mae_db={mae!r}\n"
    _write(args, "bne.csv", text)
    print(f"mae_db={mae!r}")


def cmd_ret(args):
    params = _params(args)
    rows = []
    for K in parse_int_list(args.K):
        f = equilibria.expected_revenue(params, K, "FPSB", args.replications, _seed(args))
        s = equilibria.expected_revenue(params, K, "SPSB", args.replications, _seed(args))
        rel = abs(f.mean - s.mean) / s.mean
        rows.append((K, f.mean, f.std_error, s.mean, s.std_error, rel))
        print(f"K={K} fpsb={f.mean!r} spsb={s.mean!r} rel_diff={rel!r}")
    _write(args, "ret.csv", _csv_text(
        ("K", "fpsb_mean", "fpsb_se", "spsb_mean", "spsb_se", "rel_diff"), rows))


def _auction_values(args):
    if args.values is not None:
        return parse_matrix(args.values)
    params = _params(args)
    m = valuation.sample(params, args.K, args.N, _seed(args))
    return m.v


def cmd_auction(args):
    if args.values is None:
        raise ValidationError("auction needs --values")
    V = parse_matrix(args.values)
    inst = AuctionInstance(mechanisms.apply_risk(V, args.zeta), zeta=args.zeta)
    mech = mechanisms.Mechanism.parse(args.mechanism)
    outcome = mechanisms.run_mechanism(mech, inst, _seed(args), msaa=_msaa_config(args))
    _write(args, "outcome.txt", outcome.to_text())
    print("allocation=" + textio.fmt_pairs(outcome.allocation))
    print("payments=" + textio.fmt_list(outcome.payments, textio.fmt_float))
    if outcome.message:
        print(outcome.message)


def cmd_msaa_trace(args):
    V = _auction_values(args)
    inst = AuctionInstance(mechanisms.apply_risk(V, args.zeta), zeta=args.zeta)
    outcome, trace = mechanisms.run_msaa(inst, _msaa_config(args), _seed(args))
    _write(args, "outcome.txt", outcome.to_text())
    _write(args, "trace.txt", trace.to_text())
    print(f"iterations={trace.iterations} terminated_by={trace.terminated_by}")
    print("allocation=" + textio.fmt_pairs(outcome.allocation))


def cmd_sweep(args):
    cfg = harness.load_config(args.config) if args.config else {}
    for key, value in _overrides(args.set).items():
        node = cfg
        *path, leaf = key.split(".")
        for part in path:
            node = node.setdefault(part, {})
        node[leaf] = value
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    spec = harness.spec_from_mapping(cfg)
    result = harness.run_sweep(spec, threads=max(1, args.threads))
    harness.export(result, args.output_dir)
    print(f"cells={len(result.rows)} failed={len(result.failed)}")


def cmd_disperse(args):
    K, N = args.K, args.NT * args.NF
    seed = _seed(args)
    indicator = None
    if args.mechanism:
        draws = valuation.sample(_params(args), K, N, seed)
        outcome = mechanisms.run_mechanism(args.mechanism, AuctionInstance(draws.v), seed)
        indicator = outcome.indicator
    inst = stfs.random_instance(
        K, grid=(args.NT, args.NF), seed=seed, indicator=indicator,
        noise_sigma=args.noise_sigma, hw_noise_sigma=args.hw_noise, p_min=args.p_min,
        p_max=args.p_max, power_cap=args.power_cap, thresholds=np.full(K, args.threshold))
    before = stfs.initial_state(inst)
    res = stfs.optimize_dispersion(inst, before, max_iterations=args.max_iterations,
                                   phase_method=args.phase_method)
    t0 = stfs.constellation_table(inst, before)
    t1 = stfs.constellation_table(inst, res.state)
    rates = stfs.throughputs(inst, res.state.a)
    rows = []
    for k in range(K):
        rows.append((k, inst.slot_of(k) if inst.slot_of(k) is not None else -1,
                     *t0[k][1:], *t1[k][1:], float(res.state.powers[k]), float(rates[k])))
    _write(args, "disperse.csv", _csv_text(
        ("node", "slot", "r_before", "theta_before", "objective_before",
         "r_after", "theta_after", "objective_after", "power", "throughput"), rows))
    _write(args, "dispersion.txt", inst.to_text() + res.state.to_text())
    _write(args, "history.csv", _csv_text(("iteration", "objective"), enumerate(res.history)))
    print(f"iterations={res.iterations} converged={res.converged} objective={res.objective!r}")
    print(f"aggregate_residual_before={stfs.aggregate_residual(inst, before.a)!r} "
          f"after={stfs.aggregate_residual(inst, res.state.a)!r}")


COMMANDS = {
    "sample": cmd_sample, "bne": cmd_bne, "ret": cmd_ret, "auction": cmd_auction,
    "msaa-trace": cmd_msaa_trace, "sweep": cmd_sweep, "disperse": cmd_disperse,
}


def _apply_config(parser, argv, args):
    """Re-parse with config and --set values as subcommand defaults."""
    cfg = _flatten(harness.load_config(args.config)) if args.config else {}
    cfg.update(_overrides(args.set))
    if not cfg:
        return args
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[args.command]
    dests = {a.dest for a in subparser._actions}
    unknown = set(cfg) - dests
    if unknown:
        raise ValidationError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    subparser.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        if args.command != "sweep":
            args = _apply_config(parser, argv, args)
        try:
            os.makedirs(args.output_dir, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"cannot create output dir {args.output_dir}: {exc}") from exc
        if not os.access(args.output_dir, os.W_OK):
            raise ValidationError(f"output dir {args.output_dir} is not writable")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AuctionError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
