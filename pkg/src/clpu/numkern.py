"""Small numpy kernel: ReLU MLP, losses, exact backprop, plain SGD, JS distance.

Parameters are stored as float32; every forward/backward pass and every
reduction runs in float64 and only the SGD update is rounded back to float32.
All functions are pure, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from .detrng import RandStream
from .errors import DivergedError, ShapeError

DEFAULT_HIDDEN = (100, 100)


@dataclass
class NetParams:
    weights: list[np.ndarray]  # (out, in)
    biases: list[np.ndarray]  # (out,)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> Iterable[np.ndarray]:
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "NetParams":
        return NetParams([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases])

    def scale(self, a: float) -> "NetParams":
        return NetParams([a * w for w in self.weights], [a * b for b in self.biases])

    def __add__(self, other: "NetParams") -> "NetParams":
        return NetParams([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def bit_equal(self, other: "NetParams") -> bool:
        if self.sizes != other.sizes:
            return False
        return all(a.dtype == b.dtype and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays(), other.arrays()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def zeros_like(p: NetParams, dtype=np.float64) -> NetParams:
    return NetParams([np.zeros(w.shape, dtype) for w in p.weights],
                     [np.zeros(b.shape, dtype) for b in p.biases])


def arch_sizes(d_in: int, hidden: Sequence[int], n_out: int) -> list[int]:
    return [int(d_in), *map(int, hidden), int(n_out)]


def init_params(sizes: Sequence[int], stream: RandStream) -> NetParams:
    """Uniform weights in +-sqrt(6 / fan_in), zero biases."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("architecture needs an input and an output size")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"zero-sized layer in architecture {sizes}")
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / n_in)
        u = stream.uniforms(n_out * n_in).reshape(n_out, n_in)
        weights.append(((2.0 * u - 1.0) * bound).astype(np.float32))
        biases.append(np.zeros(n_out, dtype=np.float32))
    return NetParams(weights, biases)


def _check_input(p: NetParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != p.d_in:
        raise ShapeError(f"input shape {x.shape} does not match d_in={p.d_in}")
    return x.astype(np.float64)


def _forward_cache(p: NetParams, x: np.ndarray):
    a = _check_input(p, x)
    acts = [a]
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = a @ w.astype(np.float64).T + b.astype(np.float64)
        a = z if i == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(p: NetParams, x: np.ndarray) -> np.ndarray:
    """Raw logits (n, C) in float64; ReLU on hidden layers, linear head."""
    return _forward_cache(p, x)[-1]


# masks --------------------------------------------------------------------

def mask_matrix(mask, n: int, n_classes: int) -> Optional[np.ndarray]:
    """Normalize a label mask to an (n, C) boolean matrix (None = all labels)."""
    if mask is None:
        return None
    m = np.asarray(mask)
    if m.dtype == bool and m.ndim == 2:
        if m.shape != (n, n_classes):
            raise ShapeError(f"mask shape {m.shape} != {(n, n_classes)}")
        return m
    row = np.zeros(n_classes, dtype=bool)
    labels = m.astype(np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("mask label out of range")
    row[labels] = True
    return np.broadcast_to(row, (n, n_classes))


def _masked(logits: np.ndarray, mm: Optional[np.ndarray]) -> np.ndarray:
    if mm is None:
        return logits
    return np.where(mm, logits, -np.inf)


def _check_labels(y: np.ndarray, n: int, n_classes: int, mm: Optional[np.ndarray]) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.shape[0] != n:
        raise ShapeError("label count does not match batch size")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError("label out of range")
    if mm is not None and not mm[np.arange(n), y].all():
        raise ValueError("label outside mask")
    return y


def softmax(logits: np.ndarray, mask=None) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    z = _masked(logits, mask_matrix(mask, n, c))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp(logits, axis=1, keepdims=True)


# losses -------------------------------------------------------------------

def _ce_rows(logits, y, mm):
    z = _masked(logits, mm)
    return logsumexp(z, axis=1) - logits[np.arange(len(y)), y]


def loss_ce(logits, y, mask=None) -> float:
    """Mean cross-entropy, log-sum-exp taken over the masked labels only."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, c = logits.shape
    mm = mask_matrix(mask, n, c)
    y = _check_labels(y, n, c, mm)
    return float(np.mean(_ce_rows(logits, y, mm)))


def loss_mse_logits(logits, h) -> float:
    """Mean over the batch of 0.5 * ||f - h||^2."""
    f = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if f.shape != h.shape:
        raise ShapeError(f"logit shapes differ: {f.shape} vs {h.shape}")
    return float(np.mean(0.5 * np.sum((f - h) ** 2, axis=1)))


def _kl_rows(logits, h, temperature):
    lp = log_softmax(logits / temperature)
    lq = log_softmax(h / temperature)
    p = np.exp(lp)
    return np.sum(p * (lp - lq), axis=1), p, lp, lq


def loss_distill(logits, h, temperature: float = 1.0) -> float:
    """Mean KL(softmax(f/T) || softmax(h/T)); ``h`` are stored teacher logits."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    f = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if f.shape != h.shape:
        raise ShapeError(f"logit shapes differ: {f.shape} vs {h.shape}")
    return float(np.mean(_kl_rows(f, h, temperature)[0]))


# objective + gradient -----------------------------------------------------

@dataclass
class Batch:
    """Rows of a training objective.

    ``weight`` holds per-row weights; by default each row gets 1/n so the
    objective is a batch mean.  Concatenating batches with their own weights
    gives a weighted sum of batch means in one pass.
    """

    x: np.ndarray
    y: np.ndarray
    h: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    weight: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.x) < 1:
            raise ValueError("empty batch")
        if len(self.y) != len(self.x):
            raise ShapeError("inputs and labels differ in length")
        if self.h is not None and len(self.h) != len(self.x):
            raise ShapeError("inputs and stored logits differ in length")

    def __len__(self) -> int:
        return len(self.x)

    def row_weights(self) -> np.ndarray:
        if self.weight is None:
            return np.full(len(self), 1.0 / len(self))
        return np.asarray(self.weight, dtype=np.float64)


@dataclass(frozen=True)
class LossSpec:
    weight_ce: float = 1.0
    weight_mse: float = 0.0
    weight_distill: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        ws = (self.weight_ce, self.weight_mse, self.weight_distill)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def needs_logits(self) -> bool:
        return self.weight_mse > 0 or self.weight_distill > 0


def _logit_grad(f: np.ndarray, batch: Batch, spec: LossSpec):
    """Loss value and d(loss)/d(logits) for one batch given its logits."""
    if spec.needs_logits and batch.h is None:
        raise ValueError("stored logits required by this loss spec")
    n, c = f.shape
    mm = mask_matrix(batch.mask, n, c)
    y = _check_labels(batch.y, n, c, mm)
    w = batch.row_weights()
    loss = 0.0
    g = np.zeros_like(f)
    if spec.weight_ce > 0:
        loss += spec.weight_ce * float(w @ _ce_rows(f, y, mm))
        pr = softmax(f, mm)
        pr[np.arange(n), y] -= 1.0
        g += spec.weight_ce * w[:, None] * pr
    if spec.needs_logits:
        h = np.asarray(batch.h, dtype=np.float64)
        if h.shape != f.shape:
            raise ShapeError(f"stored logits shape {h.shape} != {f.shape}")
    if spec.weight_mse > 0:
        r = f - h
        loss += spec.weight_mse * float(w @ (0.5 * np.sum(r * r, axis=1)))
        g += spec.weight_mse * w[:, None] * r
    if spec.weight_distill > 0:
        t = spec.temperature
        kl, pr, lp, lq = _kl_rows(f, h, t)
        loss += spec.weight_distill * float(w @ kl)
        g += spec.weight_distill * w[:, None] * (pr * (lp - lq - kl[:, None])) / t
    return loss, g


def _backward(p: NetParams, acts, g_out) -> NetParams:
    gw, gb = [None] * len(p.weights), [None] * len(p.weights)
    dz = g_out
    for i in range(len(p.weights) - 1, -1, -1):
        gw[i] = dz.T @ acts[i]
        gb[i] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ p.weights[i].astype(np.float64)) * (acts[i] > 0)
    return NetParams(gw, gb)


Term = tuple  # (Batch, LossSpec, coefficient)


def objective_and_grad(p: NetParams, terms: Sequence[Term]) -> tuple[float, NetParams]:
    """Value and gradient of sum_k coef_k * loss(batch_k, spec_k).

    All batches go through one stacked forward and backward pass.
    """
    if not terms:
        raise ValueError("objective has no terms")
    x = np.concatenate([np.asarray(b.x) for b, _, _ in terms])
    acts = _forward_cache(p, x)
    f = acts[-1]
    g_out = np.empty_like(f)
    total = 0.0
    start = 0
    for b, spec, coef in terms:
        stop = start + len(b)
        loss, g = _logit_grad(f[start:stop], b, spec)
        total += coef * loss
        g_out[start:stop] = coef * g
        start = stop
    return total, _backward(p, acts, g_out)


def loss_value(p: NetParams, batch: Batch, spec: LossSpec) -> float:
    return _logit_grad(forward(p, batch.x), batch, spec)[0]


def loss_and_grad(p: NetParams, batch: Batch, spec: LossSpec) -> tuple[float, NetParams]:
    return objective_and_grad(p, [(batch, spec, 1.0)])


def grad(p: NetParams, batch: Batch, spec: LossSpec) -> NetParams:
    """Exact reverse-mode gradient (float64) of the weighted objective."""
    return loss_and_grad(p, batch, spec)[1]


def fisher_diagonal(p: NetParams, x: np.ndarray, y: np.ndarray, mask=None) -> NetParams:
    """Mean squared per-example gradient of the log-likelihood of ``y``.

    For a linear layer the per-example weight gradient is an outer product
    delta_i a_i^T, so its elementwise square sums to (delta^2)^T (a^2).
    """
    n = len(x)
    batch = Batch(x, y, mask=mask, weight=np.ones(n))
    acts = _forward_cache(p, x)
    _, g_out = _logit_grad(acts[-1], batch, LossSpec())
    fw, fb = [None] * len(p.weights), [None] * len(p.weights)
    dz = g_out
    for i in range(len(p.weights) - 1, -1, -1):
        a_prev = acts[i]
        fw[i] = (dz * dz).T @ (a_prev * a_prev) / n
        fb[i] = (dz * dz).sum(axis=0) / n
        if i > 0:
            dz = (dz @ p.weights[i].astype(np.float64)) * (acts[i] > 0)
    return NetParams(fw, fb)


def sgd_step(p: NetParams, g: NetParams, lr: float, weight_decay: float = 0.0) -> NetParams:
    """p - lr * (g + weight_decay * p), evaluated in float64, stored float32."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    new_w, new_b = [], []
    for a, ga in zip(p.arrays(), g.arrays()):
        if not np.all(np.isfinite(ga)):
            raise DivergedError("diverged")
        a64 = a.astype(np.float64)
        (new_w if a.ndim == 2 else new_b).append(
            (a64 - lr * (ga + weight_decay * a64)).astype(np.float32))
    return NetParams(new_w, new_b)


# Jensen-Shannon ------------------------------------------------------------

def _check_prob(p: np.ndarray, name: str):
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} is not a normalized probability vector")


def jsd_rows(P, Q) -> np.ndarray:
    """Row-wise Jensen-Shannon distance (natural log) between (n, C) arrays."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ShapeError("distribution shapes differ")
    _check_prob(P, "P")
    _check_prob(Q, "Q")
    M = 0.5 * (P + Q)
    kl_pm = np.sum(xlogy(P, P) - xlogy(P, M), axis=-1)
    kl_qm = np.sum(xlogy(Q, Q) - xlogy(Q, M), axis=-1)
    div = 0.5 * kl_pm + 0.5 * kl_qm
    return np.sqrt(np.clip(div, 0.0, np.log(2.0)))


def jsd(P, Q) -> float:
    """sqrt(JS divergence), natural log; lies in [0, sqrt(ln 2)]."""
    return float(jsd_rows(np.atleast_2d(P), np.atleast_2d(Q))[0])
