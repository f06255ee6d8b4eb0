"""Continual-learning scores (ACC, FM) and output-space privacy audit.

The audit only ever sees model *outputs* (softmax over a task's labels on its
test inputs); it never inspects parameters.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Mapping, Optional, Sequence

import numpy as np

from . import numkern as nk


def eval_accuracy(params: nk.NetParams, x: np.ndarray, y: np.ndarray, mask=None) -> float:
    """Fraction correct under masked argmax; ties go to the lowest label."""
    if len(x) == 0:
        raise ValueError("empty test set")
    logits = nk.forward(params, x)
    if mask is not None:
        mm = nk.mask_matrix(list(mask), len(x), logits.shape[1])
        logits = np.where(mm, logits, -np.inf)
    pred = np.argmax(logits, axis=1)  # first maximum = lowest label
    return float(np.mean(pred == np.asarray(y)))


def output_distribution(params: nk.NetParams, x: np.ndarray, mask=None) -> np.ndarray:
    """Softmax outputs restricted to ``mask`` and renormalized, shape (n, |mask|)."""
    logits = nk.forward(params, x)
    if mask is not None:
        logits = logits[:, list(mask)]
    return nk.softmax(logits)


@dataclass
class AccuracyMatrix:
    """a[t][s]: accuracy on task s after request t; missing = task not in the status map."""

    rows: dict[int, dict[int, float]] = field(default_factory=dict)
    first_seen: dict[int, int] = field(default_factory=dict)  # tau(s)

    def record(self, t: int, row: Mapping[int, float]):
        self.rows[t] = dict(row)
        for s in row:
            self.first_seen.setdefault(s, t)

    def get(self, t: int, s: int) -> float:
        """Entry or NaN as the absent sentinel."""
        return self.rows.get(t, {}).get(s, math.nan)

    @property
    def last(self) -> int:
        return max(self.rows)

    def tasks(self) -> list[int]:
        return sorted(self.first_seen)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,s,accuracy\n")
        tasks = self.tasks()
        for t in sorted(self.rows):
            for s in tasks:
                if s in self.rows[t]:
                    buf.write(f"{t},{s},{self.rows[t][s]:.6f}\n")
                elif self.first_seen[s] <= t:
                    buf.write(f"{t},{s},NA\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        m = cls()
        lines = text.strip().splitlines()
        if lines[0].strip() != "t,s,accuracy":
            raise ValueError("bad accuracy CSV header")
        for line in lines[1:]:
            t, s, a = line.split(",")
            t, s = int(t), int(s)
            m.first_seen.setdefault(s, t)
            m.first_seen[s] = min(m.first_seen[s], t)
            m.rows.setdefault(t, {})
            if a != "NA":
                m.rows[t][s] = float(a)
        return m


def compute_acc_fm(m: AccuracyMatrix, final_tasks: Sequence[int]) -> tuple[float, float]:
    """Mean final accuracy and mean drop since first learned, over final_tasks."""
    final_tasks = list(final_tasks)
    if not final_tasks:
        raise ValueError("no tasks remain to score")
    T = m.last
    finals, drops = [], []
    for s in final_tasks:
        a_T = m.get(T, s)
        tau = m.first_seen.get(s)
        a_tau = m.get(tau, s) if tau is not None else math.nan
        if math.isnan(a_T) or math.isnan(a_tau):
            raise ValueError(f"missing accuracy entries for task {s}")
        finals.append(a_T)
        drops.append(a_tau - a_T)
    return float(np.mean(finals)), float(np.mean(drops))


@dataclass
class AuditGroup:
    """Output distributions for one forget request.

    ``full[i]`` / ``retain[i]``: (n, k) softmax outputs of the i-th seed's
    model trained on the full / retained request sequence, evaluated on the
    forgotten task's test inputs.
    """

    t: int
    task_id: int
    full: list[np.ndarray]
    retain: list[np.ndarray]

    def __post_init__(self):
        if len(self.full) != len(self.retain):
            raise ValueError("full and retain groups differ in size")
        if len(self.full) < 2:
            raise ValueError("audit needs at least two seeds per group")


def compute_ijsd_ajsd(groups: Sequence[AuditGroup]) -> tuple[list[float], list[float]]:
    """In-group distances (pairs i<j of retain models) and across-group (all i, j).

    Each distance is the test-set mean JS distance, then averaged over the
    forget requests.
    """
    if not groups:
        raise ValueError("nothing to audit")
    c = len(groups[0].full)
    if any(len(g.full) != c for g in groups):
        raise ValueError("audit groups differ in seed count")
    ijsd = np.zeros(c * (c - 1) // 2)
    ajsd = np.zeros(c * c)
    for g in groups:
        for k, (i, j) in enumerate(combinations(range(c), 2)):
            ijsd[k] += np.mean(nk.jsd_rows(g.retain[i], g.retain[j]))
        for k, (i, j) in enumerate(product(range(c), repeat=2)):
            ajsd[k] += np.mean(nk.jsd_rows(g.full[i], g.retain[j]))
    n = len(groups)
    return (ijsd / n).tolist(), (ajsd / n).tolist()


def js_ratio(ijsd: Sequence[float], ajsd: Sequence[float]) -> float:
    if len(ijsd) == 0 or len(ajsd) == 0:
        raise ValueError("empty distance set")
    mi = float(np.mean(ijsd))
    if mi == 0:
        raise ValueError("degenerate in-group: mean IJSD is zero")
    return abs(mi - float(np.mean(ajsd))) / mi


def irr(ijsd: Sequence[float], ajsd: Sequence[float]) -> float:
    """Share of across-group distances no larger than the largest in-group one."""
    if len(ijsd) == 0 or len(ajsd) == 0:
        raise ValueError("empty distance set")
    top = max(ijsd)
    return sum(1 for d in ajsd if d <= top) / len(ajsd)


@dataclass
class AuditReport:
    ijsd: list[float]
    ajsd: list[float]
    js_ratio: float
    irr: float

    @classmethod
    def from_groups(cls, groups: Sequence[AuditGroup]) -> "AuditReport":
        ijsd, ajsd = compute_ijsd_ajsd(groups)
        return cls(ijsd, ajsd, js_ratio(ijsd, ajsd), irr(ijsd, ajsd))
