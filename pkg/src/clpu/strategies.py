"""Learners behind the request protocol.

Every learner implements ``learn`` (new task, permanent or temporary),
``merge`` (temporary -> permanent), ``forget`` and ``route``.  All randomness
comes from streams keyed by the request's own task id, so dropping a request
from a sequence leaves every other request's draws untouched.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import numkern as nk
from .detrng import derive_stream
from .errors import DivergedError, ProtocolError
from .protocol import AgentState, EpisodicMemory, Instruction, ModelRegistry, build_memory
from .taskgen import Dataset

SCOPES = ("permanent_only", "all_tasks")
TEMP_INITS = ("from_main", "scratch")


@dataclass
class StrategyConfig:
    lr: float = 0.01
    weight_decay: float = 0.0005
    epochs: int = 10
    batch_size: int = 32
    memory_size: int = 64
    alpha1: float = 0.5  # DER++ replay CE weight
    alpha2: float = 0.5  # DER++ replay logit-MSE weight
    beta: float = 0.5  # new-data share in the rehearsal objective
    ewc_lambda: float = 100.0
    lwf_weight: float = 1.0
    lwf_temperature: float = 2.0
    temp_init: str = "from_main"
    rehearsal_scope: str = "permanent_only"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.memory_size < 1:
            raise ValueError("batch_size and memory_size must be >= 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.temp_init not in TEMP_INITS:
            raise ValueError(f"temp_init must be one of {TEMP_INITS}")
        if self.rehearsal_scope not in SCOPES:
            raise ValueError(f"rehearsal_scope must be one of {SCOPES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown strategy config keys: {sorted(unknown)}")
        return cls(**d)


CE = nk.LossSpec()
MSE = nk.LossSpec(weight_ce=0.0, weight_mse=1.0)


# generic SGD loop ----------------------------------------------------------------

def train(params: nk.NetParams, cfg: StrategyConfig, seed: int, context: Sequence,
          data: Optional[Dataset] = None, data_spec: nk.LossSpec = CE, data_coef: float = 1.0,
          teacher_logits: Optional[np.ndarray] = None,
          replay: Sequence[tuple[EpisodicMemory, nk.LossSpec, float]] = (),
          penalty=None) -> nk.NetParams:
    """``cfg.epochs`` epochs of minibatch SGD.

    Each epoch shuffles the new data into minibatches and makes exactly one
    pass over every replayed memory, spread evenly across the epoch's steps.
    Without new data the step count is set by the largest memory.
    ``penalty(params) -> NetParams`` adds a parameter-space gradient.
    """
    replay = sorted(replay, key=lambda r: r[0].task_id)
    if data is None and not replay:
        return params
    bs = cfg.batch_size
    n = len(data.y_train) if data is not None else 0
    steps = math.ceil(n / bs) if data is not None else max(math.ceil(len(m) / bs) for m, _, _ in replay)
    for epoch in range(cfg.epochs):
        key = [*context, "epoch", epoch]
        order = derive_stream(seed, key).shuffle(n) if data is not None else None
        chunks = {m.task_id: np.array_split(derive_stream(seed, [*key, "mem", m.task_id]).shuffle(len(m)), steps)
                  for m, _, _ in replay}
        for step in range(steps):
            terms = []
            if data is not None:
                idx = order[step * bs:(step + 1) * bs]
                h = teacher_logits[idx] if teacher_logits is not None else None
                terms.append((nk.Batch(data.x_train[idx], data.y_train[idx], h, mask=list(data.mask)),
                              data_spec, data_coef))
            for mem, spec, coef in replay:
                idx = chunks[mem.task_id][step]
                if len(idx):
                    terms.append((mem.batch(idx), spec, coef))
            if not terms:
                continue
            loss, g = nk.objective_and_grad(params, terms)
            if penalty is not None:
                g = g + penalty(params)
            if not math.isfinite(loss):
                raise DivergedError(f"non-finite loss in {list(context)} epoch {epoch}")
            params = nk.sgd_step(params, g, cfg.lr, cfg.weight_decay)
    # a penalty term can blow up the weights even while the data loss stays finite
    if not np.isfinite(params.flat()).all():
        raise DivergedError(f"non-finite parameters after {list(context)}")
    return params


# base class -----------------------------------------------------------------------

class Strategy:
    name = "base"

    def init_state(self, master_seed: int, sizes: Sequence[int]) -> AgentState:
        main = nk.init_params(sizes, derive_stream(master_seed, ["init", "main"]))
        return AgentState(master_seed, list(sizes), self.name, ModelRegistry(main))

    def learn(self, state: AgentState, task_id: int, data: Dataset, permanent: bool,
              cfg: StrategyConfig):
        raise NotImplementedError

    def merge(self, state: AgentState, task_id: int, cfg: StrategyConfig):
        pass  # shared-model learners already hold the task

    def forget(self, state: AgentState, task_id: int, cfg: StrategyConfig):
        pass  # status removal only

    def route(self, state: AgentState, task_id: int) -> nk.NetParams:
        if task_id not in state.status:
            raise ProtocolError(f"unknown task {task_id}")
        return state.registry.temp.get(task_id, state.registry.main)

    def output_params(self, state: AgentState, task_id: int) -> nk.NetParams:
        """Model answering queries about ``task_id``, including unknown tasks."""
        return state.registry.temp.get(task_id, state.registry.main)

    def _memory(self, state, params, data, task_id, cfg):
        b = min(cfg.memory_size, len(data.y_train))
        stream = derive_stream(state.master_seed, ["mem", task_id])
        state.registry.memories[task_id] = build_memory(params, data, b, stream, task_id)


def _context(task_id: int, permanent: bool) -> list:
    return ["learn", task_id, "R" if permanent else "T"]


# CLPU-DER++ -----------------------------------------------------------------------

class CLPUDerpp(Strategy):
    """Main model plus isolated temporary networks, one per T task.

    With ``rehearsal_scope="permanent_only"`` the main model and new
    temporary networks only ever replay memories of permanent tasks, so
    deleting a temporary task's network and memory restores exactly the
    state a run without that task would have reached.  ``"all_tasks"``
    replays every memory in the status map, temporary ones included.
    """

    name = "clpu-derpp"

    def _scope(self, state: AgentState, cfg: StrategyConfig, exclude=()) -> list[int]:
        tasks = sorted(i for i in state.status if i not in exclude)
        if cfg.rehearsal_scope == "permanent_only":
            tasks = [i for i in tasks if state.status[i].instruction is Instruction.R]
        return [i for i in tasks if i in state.registry.memories]

    def _replay(self, state, tasks, coef):
        return [(state.registry.memories[i], MSE, coef) for i in tasks]

    def learn(self, state, task_id, data, permanent, cfg):
        if data is None or len(data.y_train) == 0:
            raise ValueError("empty dataset")
        scope = self._scope(state, cfg)
        replay = self._replay(state, scope, 1.0 / len(scope)) if scope else []
        reg = state.registry
        if permanent:
            start = reg.main
        elif cfg.temp_init == "from_main":
            start = reg.main.copy()
        else:
            start = nk.init_params(state.sizes, derive_stream(state.master_seed, ["init", task_id]))
        trained = train(start, cfg, state.master_seed, _context(task_id, permanent), data, replay=replay)
        if permanent:
            reg.main = trained
        else:
            reg.temp[task_id] = trained
        # temporary tasks store the temporary network's logits: those are what a merge distills
        self._memory(state, trained, data, task_id, cfg)

    def merge(self, state, task_id, cfg):
        reg = state.registry
        if task_id not in reg.temp or task_id not in reg.memories:
            raise ProtocolError(f"task {task_id} has no temporary network to merge")
        if cfg.rehearsal_scope == "permanent_only":
            others = self._scope(state, cfg, exclude=(task_id,))
            replay = [(reg.memories[task_id], MSE, 1.0)]
            replay += self._replay(state, others, 1.0 / len(others)) if others else []
        else:
            # literal form: own memory plus the mean over all of the updated status map
            everyone = sorted(i for i in state.status if i in reg.memories)
            replay = [(reg.memories[task_id], MSE, 1.0 + 1.0 / len(everyone))]
            replay += self._replay(state, [i for i in everyone if i != task_id], 1.0 / len(everyone))
        reg.main = train(reg.main, cfg, state.master_seed, ["merge", task_id], replay=replay)
        del reg.temp[task_id]

    def forget(self, state, task_id, cfg):
        state.registry.temp.pop(task_id, None)
        state.registry.memories.pop(task_id, None)


# baselines ------------------------------------------------------------------------

class Seq(Strategy):
    name = "seq"

    def learn(self, state, task_id, data, permanent, cfg):
        state.registry.main = train(state.registry.main, cfg, state.master_seed,
                                    _context(task_id, permanent), data)


class Ind(Strategy):
    """One fresh network per task; forgetting deletes it."""

    name = "ind"

    def _fresh(self, state, task_id):
        return nk.init_params(state.sizes, derive_stream(state.master_seed, ["init", task_id]))

    def learn(self, state, task_id, data, permanent, cfg):
        state.registry.temp[task_id] = train(self._fresh(state, task_id), cfg, state.master_seed,
                                             _context(task_id, permanent), data)

    def forget(self, state, task_id, cfg):
        state.registry.temp.pop(task_id, None)

    def output_params(self, state, task_id):
        # an unknown task is answered by the untrained network that would be created for it
        net = state.registry.temp.get(task_id)
        return net if net is not None else self._fresh(state, task_id)


def _times(a: nk.NetParams, b: nk.NetParams) -> nk.NetParams:
    return nk.NetParams([x.astype(np.float64) * y for x, y in zip(a.weights, b.weights)],
                        [x.astype(np.float64) * y for x, y in zip(a.biases, b.biases)])


class EWC(Strategy):
    """Quadratic pull towards each past task's weights, scaled by its Fisher diagonal."""

    name = "ewc"

    def learn(self, state, task_id, data, permanent, cfg):
        anchors = state.extras.setdefault("ewc_anchor", {})
        fishers = state.extras.setdefault("ewc_fisher", {})
        keys = sorted(anchors)
        lam = cfg.ewc_lambda

        def penalty(p):
            g = nk.zeros_like(p)
            p64 = p.astype(np.float64)
            for k in keys:
                diff = p64 + anchors[k].astype(np.float64).scale(-1.0)
                g = g + _times(fishers[k], diff).scale(2.0 * lam)
            return g

        reg = state.registry
        reg.main = train(reg.main, cfg, state.master_seed, _context(task_id, permanent), data,
                         penalty=penalty if keys else None)
        anchors[task_id] = reg.main.copy()
        fishers[task_id] = nk.fisher_diagonal(reg.main, data.x_train, data.y_train,
                                              list(data.mask)).astype(np.float32)

    def forget(self, state, task_id, cfg):
        for table in ("ewc_anchor", "ewc_fisher"):
            state.extras.get(table, {}).pop(task_id, None)


class LwF(Strategy):
    name = "lwf"

    def learn(self, state, task_id, data, permanent, cfg):
        reg = state.registry
        context = _context(task_id, permanent)
        if not state.status:
            reg.main = train(reg.main, cfg, state.master_seed, context, data)
            return
        teacher = nk.forward(reg.main, data.x_train)
        spec = nk.LossSpec(weight_ce=1.0, weight_distill=cfg.lwf_weight, temperature=cfg.lwf_temperature)
        reg.main = train(reg.main, cfg, state.master_seed, context, data, data_spec=spec,
                         teacher_logits=teacher)


class ER(Strategy):
    """Rehearsal with replayed cross-entropy; forgetting replays the rest."""

    name = "er"

    def replay_spec(self, cfg: StrategyConfig) -> nk.LossSpec:
        return CE

    def _replay(self, state, cfg, exclude=()):
        mems = [m for i, m in sorted(state.registry.memories.items()) if i not in exclude]
        return [(m, self.replay_spec(cfg), 1.0 - cfg.beta) for m in mems]

    def learn(self, state, task_id, data, permanent, cfg):
        reg = state.registry
        replay = self._replay(state, cfg)
        coef = cfg.beta if replay else 1.0
        reg.main = train(reg.main, cfg, state.master_seed, _context(task_id, permanent), data,
                         data_coef=coef, replay=replay)
        self._memory(state, reg.main, data, task_id, cfg)

    def forget(self, state, task_id, cfg):
        reg = state.registry
        reg.memories.pop(task_id, None)
        replay = self._replay(state, cfg)
        if replay:
            reg.main = train(reg.main, cfg, state.master_seed, ["forget", task_id], replay=replay)


class Derpp(ER):
    name = "derpp"

    def replay_spec(self, cfg):
        return nk.LossSpec(weight_ce=cfg.alpha1, weight_mse=cfg.alpha2)


STRATEGIES = {cls.name: cls for cls in (CLPUDerpp, Seq, Ind, EWC, LwF, ER, Derpp)}


def get_strategy(name: str) -> Strategy:
    try:
        return STRATEGIES[name]()
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
