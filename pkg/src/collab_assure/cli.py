"""Command-line entry point: ``collab-assure {assess,lemma-check,gen-data,p1,p2}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

from . import experiments as ex
from .data import DataError, SplitPlan, gen_synthetic_binary, load_csv, save_csv, split
from .protocol.session import AbortCode, SessionAbort, run_p1, run_p2
from .protocol.transport import Listener, TransportError, parse_hostport, tcp_connect

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ABORT, EXIT_NOISE_BUDGET = 0, 1, 2, 3, 4
SEED_ENV = "COLLAB_ASSURE_SEED"

log = logging.getLogger("collab_assure")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _epsilon(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("epsilon must be positive (use 'inf' to disable noise)")
    return v


def _skew(text: str) -> tuple:
    try:
        counts = tuple(int(c) for c in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected per-class counts like 96:864") from None
    if len(counts) < 2 or min(counts) < 0:
        raise argparse.ArgumentTypeError("expected per-class counts like 96:864")
    return counts


def _hidden(text: str) -> tuple:
    try:
        sizes = tuple(int(h) for h in text.split(",") if h)
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated layer widths") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("expected comma-separated layer widths")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--report", metavar="PATH", help="write a JSON-lines report here")
    common.add_argument("--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--dataset", required=True, metavar="CSV")
    data.add_argument("--label-col", default="label")
    data.add_argument("--classes", type=int, default=2)
    data.add_argument("--holdout-frac", type=float, default=0.30)
    data.add_argument("--d1-frac", type=float, default=0.10)
    data.add_argument("--d2-frac", type=float, default=0.60)
    data.add_argument("--skew", type=_skew, metavar="C0:C1", help="exact per-class row counts for D1")

    train = _Parser(add_help=False)
    train.add_argument("--epsilon", type=_epsilon, action="append", help="total label-DP budget; repeatable")
    train.add_argument("--epochs", type=int, default=50)
    train.add_argument("--batch-size", type=int, default=256)
    train.add_argument("--lr", type=float, default=0.1)
    train.add_argument("--hidden", type=_hidden, default=(20,), metavar="W[,W...]")
    train.add_argument("--compat-nonneg", action="store_true",
                       help="send noise as non-negative pairs and subtract homomorphically")

    parser = _Parser(prog="collab-assure", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("assess", parents=[common, data, train], help="compare M1, M2 and the private M2")
    a.add_argument("--reps", type=int, default=10)
    a.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")

    lc = sub.add_parser("lemma-check", parents=[common], help="random-labelling sanity checks")
    lc.add_argument("--reps", type=int, default=10, help="seeds per labelling probability")
    lc.add_argument("--trials", type=int, default=200, help="Monte Carlo trials for the uniform-q check")

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic binary CSV")
    g.add_argument("--rows", type=int, default=10_000)
    g.add_argument("--features", type=int, default=4)
    g.add_argument("--balance", type=float, default=0.5)
    g.add_argument("--out", required=True, metavar="CSV")

    p1 = sub.add_parser("p1", parents=[common, data, train], help="model owner, listens for P2")
    p1.add_argument("--listen", required=True, metavar="HOST:PORT")
    p2 = sub.add_parser("p2", parents=[common, data, train], help="data owner, connects to P1")
    p2.add_argument("--connect", required=True, metavar="HOST:PORT")
    return parser


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None:
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _plan(args, seed: int) -> SplitPlan:
    return SplitPlan(args.holdout_frac, args.d1_frac, args.d2_frac, d1_counts=args.skew, seed=seed)


def _hyperparams(args, transport: str = "inproc") -> ex.Hyperparams:
    return ex.Hyperparams(hidden=args.hidden, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                          compat_nonneg=args.compat_nonneg, transport=transport)


def _write_lines(path, records):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def _check_budget(config):
    report = config.noise_budget()
    if not report.passed:
        raise SessionAbort(AbortCode.NOISE_BUDGET,
                           f"noise bound {report.bound:.3g} >= limit {report.limit:.3g}; lower --batch-size")


def cmd_assess(args, seed):
    dataset = load_csv(args.dataset, args.label_col, args.classes)
    hp = _hyperparams(args, args.transport)
    eps_list = args.epsilon or [10.0]
    for eps in eps_list:
        _check_budget(hp.session_config(hp.spec(dataset.features.shape[1], dataset.n_classes), eps, seed))
    report = ex.ExperimentReport()

    def on_row(row):
        log.info("seed=%d eps=%s %s acc=%.4f (%.2fs)", row.seed, row.epsilon, row.model, row.accuracy,
                 row.wall_time)

    try:
        ex.run_value_assessment(dataset, _plan(args, seed), eps_list, hp, args.reps, seed, report, on_row)
    finally:
        if args.report:
            report.write(args.report)
    for agg in report.aggregates():
        print(f"{agg['model']:>8}  eps={agg['epsilon']!s:>6}  mean acc {agg['mean_accuracy']:.4f}  "
              f"({agg['runs']} runs, {agg['mean_wall_time']:.2f}s each)")
    return EXIT_OK


def cmd_lemma_check(args, seed):
    balanced = ex.check_balanced_holdout(n_seeds=args.reps)
    q07 = sum(ex.random_label_accuracy(1.0, 0.7, seed + s) for s in range(args.reps)) / args.reps
    grand = ex.check_uniform_holdout(trials=args.trials, seed=seed)
    records = [{"check": "balanced-holdout", "p": p, "mean_accuracy": a} for p, a in balanced.mean_accuracy.items()]
    records.append({"check": "constant-labels-q0.7", "mean_accuracy": q07})
    records.append({"check": "uniform-q", "trials": args.trials, "mean_accuracy": grand})
    print(_write_lines(args.report, records), end="")
    return EXIT_OK


def cmd_gen_data(args, seed):
    data = gen_synthetic_binary(args.rows, args.features, args.balance, seed)
    save_csv(data, args.out)
    log.info("wrote %d rows to %s", len(data), args.out)
    return EXIT_OK


def _party_setup(args, seed):
    dataset = load_csv(args.dataset, args.label_col, args.classes)
    d1, d2, hold = split(dataset, _plan(args, seed))
    if args.epsilon and len(args.epsilon) > 1:
        raise UsageError("a networked session takes a single --epsilon")
    eps = args.epsilon[0] if args.epsilon else 10.0
    hp = _hyperparams(args)
    config = hp.session_config(hp.spec(dataset.features.shape[1], dataset.n_classes), eps, seed)
    _check_budget(config)
    return config, d1, d2, hold


def _verdict_record(role, verdict, eps):
    rec = {"role": role, "improved": verdict.improved, "epsilon": "inf" if math.isinf(eps) else eps}
    if verdict.acc_m1 is not None:
        rec.update(acc_m1=verdict.acc_m1, acc_m2=verdict.acc_m2)
    return rec


def cmd_p1(args, seed):
    config, d1, _, hold = _party_setup(args, seed)
    host, port = parse_hostport(args.listen)
    log.info("P1 listening on %s:%d", host, port)
    channel = Listener(host, port).accept()
    result = run_p1(channel, config, d1.xy, hold.xy)
    print(_write_lines(args.report, [_verdict_record("p1", result.verdict, config.epsilon_total)]), end="")
    return EXIT_OK


def cmd_p2(args, seed):
    config, _, d2, _ = _party_setup(args, seed)
    host, port = parse_hostport(args.connect)
    verdict = run_p2(tcp_connect(host, port, retries=300), config, d2.xy)
    print(_write_lines(args.report, [_verdict_record("p2", verdict, config.epsilon_total)]), end="")
    return EXIT_OK


COMMANDS = {"assess": cmd_assess, "lemma-check": cmd_lemma_check, "gen-data": cmd_gen_data,
            "p1": cmd_p1, "p2": cmd_p2}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        seed = _seed(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, seed)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SessionAbort as exc:
        print(f"session aborted: {exc}", file=sys.stderr)
        return EXIT_NOISE_BUDGET if exc.code == AbortCode.NOISE_BUDGET else EXIT_ABORT
    except (TransportError, OSError) as exc:
        print(f"session aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
