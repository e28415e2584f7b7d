"""Command line: ``mlnet generate | train | eval | sweep``.

Precedence is built-in defaults < config file < command-line flags.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from .errors import DomainError, NumericError, ParseError
from .evaluate import evaluate_network, metrics_row, write_curve_csv, write_metrics_csv
from .model import Network
from .scenario import generate_scenario, read_scenario_file, write_feature_csv
from .training import RunConfig, load_datasets, sweep, train_run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("mlnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mlnet", description="Universal domain adaptation on feature vectors.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write source/target CSVs for a synthetic scenario")
    g.add_argument("--spec", required=True, help="scenario key=value file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)

    def run_flags(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry; repeatable")

    t = sub.add_parser("train", help="train one run")
    run_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the configured target data")
    run_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--threshold", type=float)

    s = sub.add_parser("sweep", help="grid search; one run per grid point")
    run_flags(s)
    s.add_argument("--beta2", type=float, nargs="+")
    s.add_argument("--eta", type=float, nargs="+")
    s.add_argument("--epsilon", type=float, nargs="+")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--workers", type=int, default=1)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if args.set:
        lines = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            lines.setdefault(section.strip(), []).append(f"{name.strip()} = {value.strip()}")
        text = "\n".join(f"[{s}]\n" + "\n".join(v) for s, v in lines.items())
        # merge into the fully resolved file config so partial sections stay complete
        cfg = RunConfig.from_text(_merge_ini(cfg.to_text(), text))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    return cfg


def _merge_ini(base: str, extra: str) -> str:
    parser = configparser.ConfigParser()
    parser.read_string(base)
    over = configparser.ConfigParser()
    over.read_string(extra)
    for section in over.sections():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in over[section].items():
            parser[section][k] = v
    return "\n".join(f"[{s}]\n" + "\n".join(f"{k} = {v}" for k, v in parser[s].items())
                     for s in parser.sections())


def cmd_generate(args) -> int:
    spec = read_scenario_file(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    source, target = generate_scenario(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_csv(out / "source.csv", source)
    write_feature_csv(out / "target.csv", target)
    print(f"wrote {out / 'source.csv'} ({len(source)} rows) and {out / 'target.csv'} ({len(target)} rows)")
    return EXIT_OK


def _print_report(report):
    fields = [("accuracy", report.accuracy), ("a_known", report.a_known),
              ("a_unknown", report.a_unknown), ("h_score", report.h_score), ("ucr", report.ucr)]
    print("  ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in fields))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    arts = train_run(cfg)
    _print_report(arts.report)
    for name, path in arts.paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if args.threshold is not None:
        cfg.threshold = args.threshold
    cfg.validate()
    net = Network.load(args.checkpoint)
    _, target = load_datasets(cfg)
    report = evaluate_network(net, target, cfg.threshold)
    _print_report(report)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "eval_metrics.csv", [metrics_row(report, cfg.setting, cfg.seed)])
        write_curve_csv(out / "eval_curve.csv", report.curve)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    cfg.validate()
    grid = {}
    for key in ("beta2", "eta", "epsilon"):
        values = getattr(args, key)
        if values:
            grid[key] = values
    if args.seeds:
        grid["seed"] = args.seeds
    if not grid:
        raise UsageError("sweep needs at least one of --beta2/--eta/--epsilon/--seeds")
    rows = sweep(cfg, grid, workers=args.workers)
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mlnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mlnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        # config problems are usage errors; dataset problems are data errors
        code = EXIT_DATA if exc.line is not None else EXIT_USAGE
        print(f"mlnet: {'data' if code == EXIT_DATA else 'config'} error: {exc}", file=sys.stderr)
        return code
    except NumericError as exc:
        print(f"mlnet: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DomainError, OSError, IndexError) as exc:
        print(f"mlnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
