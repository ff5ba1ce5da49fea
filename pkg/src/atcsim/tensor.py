"""Numeric kernels, AdamW, seeded substreams and finite-difference checking.

Tensors are plain ``float64`` numpy arrays. Every reduction runs in a fixed
index order so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DegenerateBatchError, DimensionError, NumericError, ZeroVectorError

Params = dict[str, np.ndarray]

IGNORE_INDEX = -100


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_rows(x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=1)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_logits(logits, targets, ignore_index: int = IGNORE_INDEX):
    """Mean token cross-entropy and its gradient w.r.t. ``logits``.

    Positions whose target equals ``ignore_index`` contribute neither loss nor
    gradient. Raises :class:`DegenerateBatchError` when every position is ignored.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} incompatible with targets {targets.shape}")
    keep = targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise DegenerateBatchError("all positions are ignored")
    n_cls = logits.shape[1]
    if np.any((targets[keep] < 0) | (targets[keep] >= n_cls)):
        raise DimensionError("target index out of range")
    rows = np.nonzero(keep)[0]
    logp = log_softmax(logits[rows], axis=1)
    picked = logp[np.arange(rows.size), targets[rows]]
    loss = -float(picked.sum()) / count
    grad = np.zeros_like(logits)
    g = np.exp(logp)
    g[np.arange(rows.size), targets[rows]] -= 1.0
    grad[rows] = g / count
    return loss, grad


def cosine_similarity(a, b) -> float:
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def cosine_similarity_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Cosine similarity and its gradient w.r.t. ``a`` (``b`` held fixed)."""
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector")
    sim = float(a @ b) / (na * nb)
    grad = b / (na * nb) - sim * a / (na * na)
    return sim, grad


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[Params, AdamState]:
    """One decoupled-weight-decay Adam step over the keys present in ``grads``.

    Returns new parameter and state objects; the inputs are left untouched.
    Parameters without a gradient are carried over unchanged.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params = dict(params)
    m_new = dict(state.m)
    v_new = dict(state.v)
    for k in sorted(grads):
        g = grads[k]
        w = params[k]
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * (g * g)
        w = w - lr * weight_decay * w
        w = w - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[k] = w
        m_new[k] = m
        v_new[k] = v
    return new_params, AdamState(m=m_new, v=v_new, step=t)


def linear_warmup_decay(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warm-up over ``warmup_frac`` of the schedule, then linear decay to zero."""
    if total_steps <= 0:
        return base_lr
    warmup = int(round(warmup_frac * total_steps))
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    remaining = total_steps - warmup
    if remaining <= 0:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / remaining)


# -- gradient verification ---------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_error:
            return ("", 0.0)
        key = max(self.max_rel_error, key=self.max_rel_error.get)
        return key, self.max_rel_error[key]


def finite_diff_check(
    loss_fn: Callable[[Params], float],
    params: Mapping[str, np.ndarray],
    analytic_grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-6,
    keys=None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences, elementwise.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, atol)``; the
    floor keeps entries whose true gradient is ~0 from amplifying round-off.
    Keys absent from ``analytic_grads`` are treated as having zero gradient.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    report: dict[str, float] = {}
    for key in keys if keys is not None else sorted(work):
        w = work[key]
        flat = w.reshape(-1)
        analytic = np.asarray(analytic_grads.get(key, np.zeros_like(w)), dtype=np.float64).reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn(work)
            flat[i] = orig - h
            f_minus = loss_fn(work)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), atol)
            worst = max(worst, err)
        report[key] = worst
    return GradCheckReport(report, tol)


# -- randomness --------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """A named, counter-addressed substream of a 64-bit seed.

    Streams are backed by Philox, a counter-based generator, keyed by a hash
    of ``(seed, name)``. ``child`` derives independent named substreams, so a
    client's draws never depend on how many draws another client made.
    """

    seed: int
    name: str = "root"
    counter: int = 0

    def child(self, *parts) -> RngStream:
        suffix = "/".join(str(p) for p in parts)
        return RngStream(self.seed, f"{self.name}/{suffix}", 0)

    def advance(self, n: int = 1) -> RngStream:
        return RngStream(self.seed, self.name, self.counter + n)

    def _key(self) -> int:
        digest = hashlib.blake2b(
            f"{self.seed & 0xFFFFFFFFFFFFFFFF}|{self.name}".encode(), digest_size=16
        ).digest()
        return int.from_bytes(digest, "little")

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self._key(), counter=self.counter)
        return np.random.Generator(bitgen)


def truncated_normal(gen: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal draws resampled until they fall inside ``±bound·std``."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def flatten(params: Mapping[str, np.ndarray], keys=None) -> np.ndarray:
    keys = sorted(params) if keys is None else keys
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in keys])
