"""Experiment orchestration: sequences, multi-seed full/retain runs, reports."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import __version__
from . import numkern as nk
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DivergedError, ProtocolError
from .privmetrics import (AccuracyMatrix, AuditGroup, AuditReport, compute_acc_fm,
                          eval_accuracy, output_distribution)
from .protocol import (AgentState, Instruction, Request, RequestRecord, process_request,
                       update_status)
from .strategies import StrategyConfig, get_strategy
from .taskgen import BenchmarkSpec, Dataset, build_benchmark

log = logging.getLogger(__name__)

PRESETS = {
    "clpu-8": [(1, "R"), (2, "T"), (3, "T"), (4, "R"), (1, "R"), (2, "F"), (5, "T"), (5, "F")],
    "retain-4": [(1, "R"), (3, "T"), (4, "R"), (1, "R")],
}

SequenceSpec = Union[str, Sequence[Sequence]]


def _materialize(pairs: Sequence[Sequence], datasets: Mapping[int, Dataset]) -> list[Request]:
    """Attach each task's dataset to its first R/T request and validate the order."""
    seen, status, out = set(), {}, []
    for t, (task, instr) in enumerate(pairs, 1):
        task, instr = int(task), Instruction(instr)
        ds = None
        if instr is not Instruction.F and task not in seen:
            if task not in datasets:
                raise ValueError(f"no dataset for task {task}")
            ds = datasets[task]
            seen.add(task)
        req = Request(task, instr, ds, f"D{task}" if ds is not None else "-")
        status = update_status(status, req, t)  # raises ProtocolError on bad orderings
        out.append(req)
    return out


def _validate_pairs(pairs: Sequence[Sequence]) -> None:
    """Check an explicit sequence against the status rules without any data."""
    seen, status = set(), {}
    for t, (task, instr) in enumerate(pairs, 1):
        task, instr = int(task), Instruction(instr)
        ds = None
        if instr is not Instruction.F and task not in seen:
            ds, _ = object(), seen.add(task)
        status = update_status(status, Request(task, instr, ds), t)


def preset_sequence(name: str, datasets: Mapping[int, Dataset],
                    custom: Optional[Sequence[Sequence]] = None) -> list[Request]:
    if name == "custom":
        if custom is None:
            raise ValueError("custom sequence needs explicit (task, instruction) pairs")
        return _materialize(custom, datasets)
    if name not in PRESETS:
        raise ValueError(f"unknown sequence preset {name!r}; choose from {sorted(PRESETS)} or custom")
    return _materialize(PRESETS[name], datasets)


def retain_subsequence(requests: Sequence[Request], t: int) -> list[Request]:
    """Requests before ``t`` (1-based) whose task survives request ``t``."""
    if not 1 <= t <= len(requests) or requests[t - 1].instruction is not Instruction.F:
        raise ValueError(f"request {t} is not a forget request")
    status = {}
    for s, req in enumerate(requests[:t], 1):
        status = update_status(status, req, s)
    return [r for r in requests[:t - 1] if r.task_id in status]


def sequence_key(requests: Sequence[Request]) -> tuple:
    return tuple((r.task_id, r.instruction.value, r.dataset is not None) for r in requests)


# single runs ----------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    state: AgentState
    matrix: AccuracyMatrix
    records: list[RequestRecord]
    # forget requests only, keyed by request index t
    forget_outputs: dict[int, np.ndarray] = field(default_factory=dict)
    accuracy_before_forget: dict[int, float] = field(default_factory=dict)
    accuracy_after_forget: dict[int, float] = field(default_factory=dict)
    checkpoints: dict[int, str] = field(default_factory=dict)


def run_sequence(requests: Sequence[Request], strategy_name: str, cfg: StrategyConfig, seed: int,
                 sizes: Sequence[int], datasets: Mapping[int, Dataset],
                 checkpoint_dir: Optional[str] = None, checkpoint_tag: str = "full") -> RunResult:
    """Process a request list from a fresh agent; capture forget-time outputs."""
    strategy = get_strategy(strategy_name)
    state = strategy.init_state(seed, sizes)
    matrix = AccuracyMatrix()
    res = RunResult(seed, state, matrix, [])
    for req in requests:
        forget = req.instruction is Instruction.F
        if forget:
            ds = datasets[req.task_id]
            res.accuracy_before_forget[state.t + 1] = eval_accuracy(
                strategy.output_params(state, req.task_id), ds.x_test, ds.y_test, ds.mask)
        rec = process_request(state, req, strategy, cfg, datasets)
        res.records.append(rec)
        matrix.record(rec.t, rec.accuracy)
        if forget:
            model = strategy.output_params(state, req.task_id)
            res.accuracy_after_forget[rec.t] = eval_accuracy(model, ds.x_test, ds.y_test, ds.mask)
            res.forget_outputs[rec.t] = output_distribution(model, ds.x_test, ds.mask)
            if checkpoint_dir:
                res.checkpoints[rec.t] = _save(state, checkpoint_dir, f"{checkpoint_tag}_t{rec.t}.ckpt")
    if checkpoint_dir:
        res.checkpoints[0] = _save(state, checkpoint_dir, f"{checkpoint_tag}_final.ckpt")
    return res


def _save(state, directory, name) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    save_checkpoint(state, path)
    return path


# experiments ----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    strategy: str = "clpu-derpp"
    strategy_config: StrategyConfig = field(default_factory=StrategyConfig)
    hidden: list = field(default_factory=lambda: list(nk.DEFAULT_HIDDEN))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    sequence: SequenceSpec = "clpu-8"
    output_dir: Optional[str] = None
    workers: int = 1
    cache_retain: bool = True

    def __post_init__(self):
        get_strategy(self.strategy)
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if isinstance(self.sequence, str):
            if self.sequence not in PRESETS:
                raise ValueError(f"unknown sequence preset {self.sequence!r}")
        else:
            _validate_pairs(self.sequence)

    def sizes(self, datasets: Mapping[int, Dataset]) -> list[int]:
        first = next(iter(datasets.values()))
        return nk.arch_sizes(first.d_in, self.hidden, first.num_labels)

    def requests(self, datasets: Mapping[int, Dataset]) -> list[Request]:
        if isinstance(self.sequence, str):
            return preset_sequence(self.sequence, datasets)
        return preset_sequence("custom", datasets, self.sequence)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["benchmark"] = self.benchmark.to_dict()
        d["strategy_config"] = self.strategy_config.to_dict()
        if not isinstance(self.sequence, str):
            d["sequence"] = [[int(k), str(i)] for k, i in self.sequence]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "benchmark" in d:
            d["benchmark"] = BenchmarkSpec(**d["benchmark"])
        if "strategy_config" in d:
            d["strategy_config"] = StrategyConfig.from_dict(d["strategy_config"])
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SeedResult:
    seed: int
    full: RunResult
    retain: dict[int, RunResult]  # forget request t -> retain run
    acc: float
    fm: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list[SeedResult]
    forget_requests: list[tuple[int, int]]  # (t, task id)
    audit: Optional[AuditReport]

    @property
    def acc(self) -> list[float]:
        return [s.acc for s in self.seeds]

    @property
    def fm(self) -> list[float]:
        return [s.fm for s in self.seeds]


def _run_seed(cfg: ExperimentConfig, seed: int, datasets=None) -> SeedResult:
    datasets = datasets if datasets is not None else build_benchmark(cfg.benchmark)
    requests = cfg.requests(datasets)
    sizes = cfg.sizes(datasets)
    ckdir = os.path.join(cfg.output_dir, "checkpoints", f"seed{seed}") if cfg.output_dir else None
    try:
        full = run_sequence(requests, cfg.strategy, cfg.strategy_config, seed, sizes, datasets, ckdir)
    except DivergedError as exc:
        raise DivergedError(f"run seed={seed} full: {exc}") from exc
    acc, fm = compute_acc_fm(full.matrix, sorted(full.state.status))
    retain, cache = {}, {}
    for t, req in enumerate(requests, 1):
        if req.instruction is not Instruction.F:
            continue
        sub = retain_subsequence(requests, t)
        key = sequence_key(sub)
        if cfg.cache_retain and key in cache:
            retain[t] = cache[key]
            continue
        try:
            run = run_sequence(sub, cfg.strategy, cfg.strategy_config, seed, sizes, datasets,
                               ckdir, checkpoint_tag=f"retain_t{t}")
        except DivergedError as exc:
            raise DivergedError(f"run seed={seed} retain_t{t}: {exc}") from exc
        cache[key] = retain[t] = run
    return SeedResult(seed, full, retain, acc, fm)


def run_experiment(cfg: ExperimentConfig, datasets: Optional[Mapping[int, Dataset]] = None,
                   write: bool = True) -> ExperimentResult:
    """Full and retain runs for every seed, then the output-space audit."""
    datasets = datasets if datasets is not None else build_benchmark(cfg.benchmark)
    requests = cfg.requests(datasets)
    forgets = [(t, r.task_id) for t, r in enumerate(requests, 1) if r.instruction is Instruction.F]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = [pool.submit(_run_seed, cfg, s) for s in cfg.seeds]
            seeds = [f.result() for f in futures]
    else:
        seeds = [_run_seed(cfg, s, datasets) for s in cfg.seeds]
    seeds.sort(key=lambda r: r.seed)

    audit = None
    if forgets and len(cfg.seeds) >= 2:
        groups = []
        for t, task in forgets:
            full = [s.full.forget_outputs[t] for s in seeds]
            ret = [_retain_output(cfg, s.retain[t].state, task, datasets) for s in seeds]
            groups.append(AuditGroup(t, task, full, ret))
        audit = AuditReport.from_groups(groups)
    result = ExperimentResult(cfg, seeds, forgets, audit)
    if write and cfg.output_dir:
        write_report(result, cfg.output_dir)
    return result


def _retain_output(cfg, state, task, datasets):
    ds = datasets[task]
    model = get_strategy(cfg.strategy).output_params(state, task)
    return output_distribution(model, ds.x_test, ds.mask)


# reports ---------------------------------------------------------------------------

def _mean_sd(xs) -> tuple[float, float]:
    xs = np.asarray(xs, dtype=np.float64)
    return float(xs.mean()), float(xs.std(ddof=1)) if len(xs) > 1 else 0.0


def report_dict(result: ExperimentResult) -> dict:
    cfg = result.config
    acc_m, acc_sd = _mean_sd(result.acc)
    fm_m, fm_sd = _mean_sd(result.fm)
    out = {
        "config": cfg.to_dict(),
        "strategy": cfg.strategy,
        "acc": {"per_seed": result.acc, "mean": acc_m, "sd": acc_sd},
        "fm": {"per_seed": result.fm, "mean": fm_m, "sd": fm_sd},
        "forget_requests": [
            {"t": t, "task": task,
             "accuracy_before": [s.full.accuracy_before_forget[t] for s in result.seeds],
             "accuracy_after": [s.full.accuracy_after_forget[t] for s in result.seeds]}
            for t, task in result.forget_requests],
        "non_forgetting_monitor": {
            str(s.seed): [{"t": r.t, "delta": {str(k): v for k, v in r.memory_loss_delta.items()},
                           "slack_exceeded": r.slack_exceeded}
                          for r in s.full.records if r.memory_loss_delta]
            for s in result.seeds},
    }
    if result.audit is not None:
        a = result.audit
        im, isd = _mean_sd(a.ijsd)
        am, asd = _mean_sd(a.ajsd)
        out["audit"] = {"ijsd": a.ijsd, "ajsd": a.ajsd, "ijsd_mean": im, "ijsd_sd": isd,
                        "ajsd_mean": am, "ajsd_sd": asd, "js_ratio": a.js_ratio, "irr": a.irr}
    if cfg.output_dir:
        ck = {}
        for s in result.seeds:
            ck[str(s.seed)] = {
                "full": {str(t): os.path.relpath(p, cfg.output_dir) for t, p in s.full.checkpoints.items()},
                "retain": {str(t): os.path.relpath(r.checkpoints[0], cfg.output_dir)
                           for t, r in s.retain.items() if 0 in r.checkpoints},
            }
        out["checkpoints"] = ck
    return out


TABLE_HEADER = ("Method", "ACC", "FM", "IJSD", "AJSD", "JS-ratio", "IRR")


def table_row(rep: dict) -> list[str]:
    row = [rep["strategy"],
           f"{100 * rep['acc']['mean']:.2f} ± {100 * rep['acc']['sd']:.2f}",
           f"{100 * rep['fm']['mean']:.2f} ± {100 * rep['fm']['sd']:.2f}"]
    a = rep.get("audit")
    if a:
        row += [f"{a['ijsd_mean']:.3f} ± {a['ijsd_sd']:.3f}", f"{a['ajsd_mean']:.3f} ± {a['ajsd_sd']:.3f}",
                f"{a['js_ratio']:.2f}", f"{a['irr']:.2f}"]
    else:
        row += ["-"] * 4
    return row


def format_table(reports: Sequence[dict]) -> str:
    rows = [list(TABLE_HEADER)] + [table_row(r) for r in reports]
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_HEADER))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(result: ExperimentResult, outdir: str) -> dict:
    os.makedirs(outdir, exist_ok=True)
    rep = report_dict(result)
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(outdir, "table.txt"), "w") as fh:
        fh.write(format_table([rep]))
    for s in result.seeds:
        with open(os.path.join(outdir, f"accuracy_seed{s.seed}.csv"), "w") as fh:
            fh.write(s.full.matrix.to_csv())
    meta = {"written_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "clpu_version": __version__, "python": platform.python_version(),
            "numpy": np.__version__}
    with open(os.path.join(outdir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return rep


# audit from stored checkpoints -------------------------------------------------

def audit_run_dir(run_dir: str) -> dict:
    """Recompute the privacy audit from a run directory's checkpoints."""
    with open(os.path.join(run_dir, "report.json")) as fh:
        rep = json.load(fh)
    cfg = ExperimentConfig.from_dict(rep["config"])
    datasets = build_benchmark(cfg.benchmark)
    strategy = get_strategy(cfg.strategy)
    seeds = sorted(rep["checkpoints"], key=int)
    groups = []
    for f in rep["forget_requests"]:
        t, task = f["t"], f["task"]
        ds = datasets[task]
        full, ret = [], []
        for s in seeds:
            paths = rep["checkpoints"][s]
            st_full = load_checkpoint(os.path.join(run_dir, paths["full"][str(t)]))
            st_ret = load_checkpoint(os.path.join(run_dir, paths["retain"][str(t)]))
            if task in st_full.referenced_tasks():
                raise ProtocolError(f"checkpoint after forgetting task {task} still references it")
            full.append(output_distribution(strategy.output_params(st_full, task), ds.x_test, ds.mask))
            ret.append(output_distribution(strategy.output_params(st_ret, task), ds.x_test, ds.mask))
        groups.append(AuditGroup(t, task, full, ret))
    a = AuditReport.from_groups(groups)
    out = {"ijsd": a.ijsd, "ajsd": a.ajsd, "js_ratio": a.js_ratio, "irr": a.irr}
    with open(os.path.join(run_dir, "audit.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
