"""Request protocol: instructions, the task-status dictionary, model registry.

The agent state holds everything a learner keeps between requests.  Test
data and the accuracy history are *not* part of it; they belong to whoever
drives the run, so a forgotten task leaves no record inside the agent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import numkern as nk
from .detrng import RandStream
from .errors import ProtocolError
from .privmetrics import eval_accuracy
from .taskgen import Dataset


class Instruction(str, enum.Enum):
    R = "R"  # learn and keep permanently
    T = "T"  # learn temporarily
    F = "F"  # forget exactly


@dataclass
class Request:
    task_id: int
    instruction: Instruction
    dataset: Optional[Dataset] = None
    ref: str = "-"  # dataset reference used in text serialization

    def __post_init__(self):
        self.instruction = Instruction(self.instruction)
        if self.task_id < 1:
            raise ValueError("task ids start at 1")
        if self.instruction is Instruction.F and self.dataset is not None:
            raise ProtocolError("a forget request carries no dataset")

    def __str__(self) -> str:
        return f"({self.task_id}, {'D' if self.dataset is not None else '-'}, {self.instruction.value})"


@dataclass(frozen=True)
class TaskStatus:
    instruction: Instruction
    first_learned_at: int
    memory_ref: Optional[int] = None


@dataclass
class EpisodicMemory:
    task_id: int
    x: np.ndarray  # (b, d) float32
    y: np.ndarray  # (b,) int64
    h: np.ndarray  # (b, C) float32 logits at storage time
    mask: tuple

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, idx=None) -> nk.Batch:
        if idx is None:
            return nk.Batch(self.x, self.y, self.h, mask=list(self.mask))
        return nk.Batch(self.x[idx], self.y[idx], self.h[idx], mask=list(self.mask))


@dataclass
class ModelRegistry:
    main: nk.NetParams
    temp: dict[int, nk.NetParams] = field(default_factory=dict)
    memories: dict[int, EpisodicMemory] = field(default_factory=dict)


@dataclass
class AgentState:
    master_seed: int
    sizes: list[int]
    strategy: str
    registry: ModelRegistry
    status: dict[int, TaskStatus] = field(default_factory=dict)
    # strategy-specific per-task parameter blobs, e.g. EWC anchors
    extras: dict[str, dict[int, nk.NetParams]] = field(default_factory=dict)
    t: int = 0

    def referenced_tasks(self) -> set[int]:
        keys = set(self.status) | set(self.registry.temp) | set(self.registry.memories)
        for table in self.extras.values():
            keys |= set(table)
        return keys


def update_status(status: Mapping[int, TaskStatus], req: Request, t: int) -> dict[int, TaskStatus]:
    """Task-status update for request number ``t`` (1-based)."""
    out = dict(status)
    i, rho = req.task_id, req.instruction
    cur = status.get(i)
    if rho is Instruction.F:
        if cur is None:
            raise ProtocolError(f"forget of unlearned task {i}")
        if cur.instruction is Instruction.R:
            raise ProtocolError(f"cannot privately forget a permanent task ({i})")
        del out[i]
        return out
    if cur is None:
        if req.dataset is None:
            raise ProtocolError(f"task {i} is new but the request has no dataset")
        out[i] = TaskStatus(rho, t, i)
        return out
    if req.dataset is not None:
        raise ProtocolError(f"task {i} is already known; its dataset must not be resent")
    if rho is Instruction.T:
        raise ProtocolError(f"task {i} is already known; it cannot be learned temporarily again")
    out[i] = TaskStatus(Instruction.R, cur.first_learned_at, cur.memory_ref)
    return out


def route_model(reg: ModelRegistry, status: Mapping[int, TaskStatus], task_id: int) -> nk.NetParams:
    if task_id not in status:
        raise ProtocolError(f"unknown task {task_id}")
    return reg.temp.get(task_id, reg.main)


def build_memory(params: nk.NetParams, data: Dataset, b: int, stream: RandStream,
                 task_id: int) -> EpisodicMemory:
    """Sample ``b`` training points without replacement; store current logits."""
    n = len(data.y_train)
    if b > n:
        raise ValueError(f"memory size {b} exceeds dataset size {n}")
    idx = stream.sample_k(n, b)
    x = data.x_train[idx]
    h = nk.forward(params, x).astype(np.float32)
    return EpisodicMemory(task_id, x, data.y_train[idx], h, data.mask)


# dispatch ---------------------------------------------------------------------

@dataclass
class RequestRecord:
    t: int
    request: str
    case: str
    accuracy: dict[int, float]
    # change in mean memory CE for tasks retained across an R/T request
    memory_loss_delta: dict[int, float] = field(default_factory=dict)
    slack_exceeded: list[int] = field(default_factory=list)


def classify(status: Mapping[int, TaskStatus], req: Request) -> str:
    cur = status.get(req.task_id)
    if req.instruction is Instruction.F:
        return "forget"
    if req.instruction is Instruction.T:
        return "learn-temporary"
    if cur is None:
        return "learn-permanent"
    return "noop" if cur.instruction is Instruction.R else "merge"


def _memory_losses(state: AgentState, strategy, tasks) -> dict[int, float]:
    out = {}
    for i in tasks:
        mem = state.registry.memories.get(i)
        if mem is None:
            continue
        logits = nk.forward(strategy.route(state, i), mem.x)
        out[i] = nk.loss_ce(logits, mem.y, list(mem.mask))
    return out


def process_request(state: AgentState, req: Request, strategy, cfg,
                    testsets: Optional[Mapping[int, Dataset]] = None,
                    slack: float = 0.05) -> RequestRecord:
    """Apply one request in place and return its accuracy row.

    ``strategy`` provides learn/merge/forget/route; validation happens before
    any parameter is touched so a rejected request leaves the state intact.
    """
    t = state.t + 1
    new_status = update_status(state.status, req, t)
    case = classify(state.status, req)
    retained = sorted(state.status)
    before = _memory_losses(state, strategy, retained) if case != "forget" else {}

    if case == "learn-permanent":
        strategy.learn(state, req.task_id, req.dataset, True, cfg)
    elif case == "learn-temporary":
        strategy.learn(state, req.task_id, req.dataset, False, cfg)
    elif case == "merge":
        strategy.merge(state, req.task_id, cfg)
    elif case == "forget":
        strategy.forget(state, req.task_id, cfg)

    state.status = new_status
    state.t = t

    rec = RequestRecord(t, str(req), case, {})
    if before:
        after = _memory_losses(state, strategy, before)
        rec.memory_loss_delta = {i: after[i] - before[i] for i in before}
        rec.slack_exceeded = [i for i, d in rec.memory_loss_delta.items() if d > slack]
    if testsets is not None:
        for s in sorted(state.status):
            ds = testsets[s]
            rec.accuracy[s] = eval_accuracy(strategy.route(state, s), ds.x_test, ds.y_test, ds.mask)
    return rec


# text serialization -------------------------------------------------------------

def format_requests(requests: Sequence[Request]) -> str:
    lines = []
    for r in requests:
        ref = r.ref if r.dataset is not None or r.ref != "-" else "-"
        lines.append(f"{r.task_id} {r.instruction.value} {ref}")
    return "\n".join(lines) + "\n"


def parse_requests(text: str, resolve: Callable[[str], Dataset]) -> list[Request]:
    """One request per line: ``task_id instruction ref``; ``-`` marks no dataset.

    Blank lines and ``#`` comments are skipped.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'task_id instruction ref', got {line!r}")
        task, instr, ref = parts
        ds = None if ref == "-" else resolve(ref)
        out.append(Request(int(task), Instruction(instr), ds, ref))
    return out
