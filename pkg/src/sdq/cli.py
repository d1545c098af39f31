"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input fault, 2 numerical abort,
3 selftest failure.  Faults print one JSON line on stderr::

    {"error": "config", "message": "..."}
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import sys

from . import config as config_mod
from .cost import (MB, compression_gap, hw_round, model_size, parse_layer_table, resnet18_layers,
                   total_bitops, wcr)
from .gradcore import ContractError, NumericalAbort
from .io import read_metrics
from .models import ModelSpecError, build_model
from .strategy import MpqStrategy

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SELFTEST = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _fail(kind: str, message, code: int) -> int:
    text = " ".join(str(message).split())
    print(json.dumps({"error": kind, "message": text}, sort_keys=True), file=sys.stderr)
    return code


def _override(cfg, assignments):
    """Apply ``section.key=value`` overrides through the config parser."""
    if not assignments:
        return cfg
    text = config_mod.dumps(cfg)
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    for item in assignments:
        key, eq, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not eq or not dot:
            raise config_mod.ConfigError(f"override {item!r}: expected section.key=value")
        if not parser.has_section(section):
            raise config_mod.ConfigError(f"override {item!r}: unknown section {section!r}")
        if name not in parser[section]:
            raise config_mod.ConfigError(f"override {item!r}: unknown key {name!r}")
        parser[section][name] = value
    buf = io.StringIO()
    parser.write(buf)
    return config_mod.loads(buf.getvalue())


def _load_config(args):
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    cfg = _override(cfg, args.set)
    cfg = config_mod.apply_env(cfg)
    if getattr(args, "output_dir", None):
        cfg = cfg.replace("run", output_dir=args.output_dir)
    return cfg


def _metas_for(strategy, layers_arg):
    if layers_arg == "resnet18":
        return resnet18_layers()
    if layers_arg:
        try:
            with open(layers_arg, encoding="utf-8") as fh:
                return parse_layer_table(fh.read())
        except OSError as exc:
            raise ContractError(f"cannot read layer table {layers_arg}: {exc.strerror}") from None
    try:
        return build_model(strategy.model_id).layer_meta()
    except ModelSpecError:
        return None


def cmd_generate(args) -> int:
    from .pipeline import run_generate
    cfg = _load_config(args)
    res = run_generate(cfg)
    s = res.strategy
    print(f"fp_accuracy {res.fp_accuracy:.6f}")
    print(f"avg_weight_bits {s.avg_weight_bits:.6f}")
    print(f"strategy {os.path.join(cfg.run.output_dir, 'strategy.txt')}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import run_train
    cfg = _load_config(args)
    res = run_train(cfg, args.strategy, args.teacher)
    print(f"accuracy {res.accuracy:.6f}")
    print(f"checkpoint {os.path.join(cfg.run.output_dir, 'model.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import run_eval
    cfg = _load_config(args)
    print(f"accuracy {run_eval(cfg, args.checkpoint, args.strategy):.6f}")
    return EXIT_OK


def cmd_cost(args) -> int:
    strategy = MpqStrategy.load(args.strategy)
    metas = _metas_for(strategy, args.layers)
    rows = [("avg_weight_bits", strategy.avg_weight_bits), ("wcr", wcr(strategy)),
            ("size_mb", model_size(strategy, metas) / MB)]
    if metas is not None:
        rows.append(("bitops_g", total_bitops(strategy, metas, args.act_bits) / 1e9))
    if args.hw:
        rounded = hw_round(strategy, [int(b) for b in args.hw.split(",")])
        gap = compression_gap(strategy, rounded)
        rows += [("hw_avg_weight_bits", gap["rounded_avg_bits"]), ("hw_wcr", gap["rounded_wcr"]),
                 ("hw_size_mb", model_size(rounded, metas) / MB)]
        if metas is not None:
            rows.append(("hw_bitops_g", total_bitops(rounded, metas, args.act_bits) / 1e9))
    for key, value in rows:
        print(f"{key} {value:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import load_model
    from .report import bin_histogram_csv, bits_trajectory_csv, layer_groups, weight_histogram_csv
    run_dir = args.run_dir
    out_dir = args.out or run_dir
    os.makedirs(out_dir, exist_ok=True)
    cfg = config_mod.load(os.path.join(run_dir, "config.ini"))
    cfg = cfg.replace("run", output_dir=run_dir)
    written = []
    metrics = os.path.join(run_dir, "metrics_phase1.jsonl")
    if os.path.exists(metrics):
        path = os.path.join(out_dir, "bits_trajectory.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(bits_trajectory_csv(read_metrics(metrics)))
        written.append(path)
    ckpt = os.path.join(run_dir, "model.ckpt")
    if os.path.exists(ckpt):
        strategy = MpqStrategy.load(os.path.join(run_dir, "strategy.txt"))
        groups = layer_groups(load_model(cfg, ckpt), strategy, cfg.phase2.normalize_weights)
        for name, text in (("bin_histogram.csv", bin_histogram_csv(groups)),
                           ("weight_histogram.csv", weight_histogram_csv(groups))):
            path = os.path.join(out_dir, name)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            written.append(path)
    if not written:
        raise ContractError(f"no metrics or checkpoint found in {run_dir}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import SUITES, run_suites
    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ContractError(f"unknown selftest suites {unknown}; available: {sorted(SUITES)}")
    failed = 0
    for name, ok, detail in run_suites(names, args.jobs):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return EXIT_SELFTEST if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdq", description="Stochastic differentiable mixed-precision quantization")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="INI run configuration (defaults if omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
        sp.add_argument("--output-dir", help="run directory (overrides run.output_dir)")

    sp = sub.add_parser("generate-strategy", help="train teacher, then generate a strategy")
    with_config(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="post-train at a fixed strategy")
    with_config(sp)
    sp.add_argument("--strategy", help="strategy file (default: <run dir>/strategy.txt)")
    sp.add_argument("--teacher", help="teacher checkpoint (default: <run dir>/teacher.ckpt)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test accuracy of a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--strategy", help="evaluate quantized at this strategy")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("cost", help="BitOPs, size and compression of a strategy")
    sp.add_argument("--strategy", required=True)
    sp.add_argument("--layers", help="layer table file, or 'resnet18'")
    sp.add_argument("--act-bits", type=int, help="activation bits (default: the strategy's)")
    sp.add_argument("--hw", help="supported bitwidths, e.g. 2,4,8,16")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("report", help="export trajectory and histogram CSVs")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--out", help="output directory (default: the run dir)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("selftest", help="run the oracle suites")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--suite", action="append", help="run only this suite; repeatable")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        return _fail("usage", exc, EXIT_CONFIG)
    except NumericalAbort as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except (ContractError, OSError) as exc:
        return _fail("config", exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
