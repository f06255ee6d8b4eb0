"""Command-line entry point: ``clpu {gen-data,run,audit,train}``.

Every experiment flag has a key in the JSON config file; flags given on the
command line win over the file.  Exit codes: 0 ok, 1 usage, 2 divergence,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .checkpoint import save_checkpoint
from .errors import DivergedError, FormatError, ProtocolError
from .harness import (ExperimentConfig, audit_run_dir, format_table, report_dict, run_experiment,
                      run_sequence)
from .taskgen import build_benchmark, export_benchmark

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("clpu")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> (section, key, type); section None means a top-level config key
BENCH_FLAGS = {
    "family": ("benchmark", "family", str),
    "num_tasks": ("benchmark", "num_tasks", int),
    "num_labels": ("benchmark", "num_labels", int),
    "dim": ("benchmark", "dim", int),
    "n_train": ("benchmark", "n_train", int),
    "n_test": ("benchmark", "n_test", int),
    "noise_sigma": ("benchmark", "noise_sigma", float),
    "bench_seed": ("benchmark", "seed", int),
    "labels_per_task": ("benchmark", "labels_per_task", int),
    "idx_train_images": ("benchmark", "idx_train_images", str),
    "idx_train_labels": ("benchmark", "idx_train_labels", str),
    "idx_test_images": ("benchmark", "idx_test_images", str),
    "idx_test_labels": ("benchmark", "idx_test_labels", str),
}
STRATEGY_FLAGS = {
    "lr": ("strategy_config", "lr", float),
    "weight_decay": ("strategy_config", "weight_decay", float),
    "epochs": ("strategy_config", "epochs", int),
    "batch_size": ("strategy_config", "batch_size", int),
    "memory_size": ("strategy_config", "memory_size", int),
    "alpha1": ("strategy_config", "alpha1", float),
    "alpha2": ("strategy_config", "alpha2", float),
    "beta": ("strategy_config", "beta", float),
    "ewc_lambda": ("strategy_config", "ewc_lambda", float),
    "lwf_weight": ("strategy_config", "lwf_weight", float),
    "lwf_temperature": ("strategy_config", "lwf_temperature", float),
    "temp_init": ("strategy_config", "temp_init", str),
    "rehearsal_scope": ("strategy_config", "rehearsal_scope", str),
}
RUN_FLAGS = {
    "strategy": (None, "strategy", str),
    "hidden": (None, "hidden", str),
    "seeds": (None, "seeds", str),
    "sequence": (None, "sequence", str),
    "out": (None, "output_dir", str),
    "workers": (None, "workers", int),
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _sequence(text: str):
    """Preset name, or explicit ``task:instr`` pairs separated by commas."""
    if ":" not in text:
        return text
    pairs = []
    for item in text.split(","):
        task, _, instr = item.strip().partition(":")
        try:
            pairs.append([int(task), instr.strip().upper()])
        except ValueError:
            raise UsageError(f"bad sequence item {item!r}; expected task:R|T|F") from None
    return pairs


def _add_flags(p: argparse.ArgumentParser, table: dict):
    for flag, (_, _, typ) in table.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)


def _load_config(args, tables) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    for table in tables:
        for flag, (section, key, _) in table.items():
            value = getattr(args, flag, None)
            if value is None:
                continue
            if key == "hidden" or key == "seeds":
                value = _int_list(value)
            elif key == "sequence":
                value = _sequence(value)
            if section is None:
                raw[key] = value
            else:
                raw.setdefault(section, {})[key] = value
    if getattr(args, "no_cache", False):
        raw["cache_retain"] = False
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clpu", description="Continual learning with private unlearning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a benchmark and export it as flat arrays")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output directory")
    _add_flags(g, BENCH_FLAGS)

    r = sub.add_parser("run", help="multi-seed full and retain runs, audit and report")
    r.add_argument("--config")
    r.add_argument("--no-cache", action="store_true", help="retrain identical retain sequences")
    _add_flags(r, BENCH_FLAGS)
    _add_flags(r, STRATEGY_FLAGS)
    _add_flags(r, RUN_FLAGS)

    a = sub.add_parser("audit", help="recompute audit metrics from a run directory's checkpoints")
    a.add_argument("run_dir")

    t = sub.add_parser("train", help="run one seed over one sequence and print its accuracy matrix")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=None, help="master seed (default: first config seed)")
    t.add_argument("--checkpoint", help="write the final agent state here")
    _add_flags(t, BENCH_FLAGS)
    _add_flags(t, STRATEGY_FLAGS)
    _add_flags(t, {k: RUN_FLAGS[k] for k in ("strategy", "hidden", "sequence")})
    return p


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, [BENCH_FLAGS])
    tasks = build_benchmark(cfg.benchmark)
    export_benchmark(tasks, args.out, cfg.benchmark)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args, [BENCH_FLAGS, STRATEGY_FLAGS, RUN_FLAGS])
    if len(cfg.seeds) < 2:
        raise UsageError("auditing needs at least two seeds")
    result = run_experiment(cfg)
    sys.stdout.write(format_table([report_dict(result)]))
    if cfg.output_dir:
        print(f"report written to {cfg.output_dir}")
    return EXIT_OK


def cmd_audit(args) -> int:
    out = audit_run_dir(args.run_dir)
    print(f"IJSD mean {sum(out['ijsd']) / len(out['ijsd']):.4f}  "
          f"AJSD mean {sum(out['ajsd']) / len(out['ajsd']):.4f}  "
          f"JS-ratio {out['js_ratio']:.4f}  IRR {out['irr']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args, [BENCH_FLAGS, STRATEGY_FLAGS, {k: RUN_FLAGS[k] for k in ("strategy", "hidden", "sequence")}])
    datasets = build_benchmark(cfg.benchmark)
    requests = cfg.requests(datasets)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    res = run_sequence(requests, cfg.strategy, cfg.strategy_config, seed, cfg.sizes(datasets), datasets)
    for rec in res.records:
        log.info("t=%d %s %s", rec.t, rec.request, rec.case)
    sys.stdout.write(res.matrix.to_csv())
    if args.checkpoint:
        save_checkpoint(res.state, args.checkpoint)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "audit": cmd_audit, "train": cmd_train}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ProtocolError) as exc:
        print(f"clpu: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"clpu: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError, json.JSONDecodeError) as exc:
        print(f"clpu: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
