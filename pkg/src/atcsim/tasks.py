"""Local training objectives.

Server-assigned self-supervised tasks (``mlm``, ``dr``), the clients' own
objectives (classification, span extraction, generation) and the
representation-level contrastive loss used in the Contrast stage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import layers as nn
from . import model as M
from .errors import DegenerateBatchError, DimensionError, UsageError, ZeroVectorError
from .model import BOS, EOS, MASK, NUM_SPECIAL, ModelConfig
from .tensor import IGNORE_INDEX, cosine_similarity_grad, cross_entropy_logits

logger = logging.getLogger(__name__)

MLM, DR = "mlm", "dr"
CLASSIFICATION, SPAN, GENERATION = "classification", "span_extraction", "generation"
ASSIGNED_TASKS = (MLM, DR)

TRAINABLE_REGIONS = {
    MLM: frozenset({"encoder", "mlm_head"}),
    DR: frozenset({"encoder", "decoder"}),
    CLASSIFICATION: frozenset({"encoder", "task_head"}),
    SPAN: frozenset({"encoder", "task_head"}),
    GENERATION: frozenset({"encoder", "decoder", "task_head"}),
}

# regions the contrastive term reaches through the summary path
CONTRAST_REGIONS = frozenset({"encoder", "decoder", "contrast_head"})


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 1.0
    k: int = 3
    weight: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.weight < 0:
            raise ValueError("contrast weight must be non-negative")


@dataclass
class ObjectiveOutput:
    loss: float
    grads: dict
    count: int


# -- corruption --------------------------------------------------------------


def corrupt_mlm(tokens, mask_ratio: float, gen: np.random.Generator):
    """Replace ``ceil(mask_ratio * n)`` non-special positions by ``MASK``.

    Returns ``(corrupted, targets)`` with ``IGNORE_INDEX`` at unmasked positions.
    """
    tokens = list(tokens)
    if not tokens:
        raise DegenerateBatchError("empty sequence")
    eligible = [i for i, t in enumerate(tokens) if t >= NUM_SPECIAL]
    n_mask = min(len(eligible), math.ceil(mask_ratio * len(eligible) - 1e-9))
    if n_mask == 0:
        raise DegenerateBatchError("no position selected for masking")
    chosen = sorted(int(i) for i in gen.choice(eligible, size=n_mask, replace=False))
    corrupted = list(tokens)
    targets = [IGNORE_INDEX] * len(tokens)
    for i in chosen:
        targets[i] = tokens[i]
        corrupted[i] = MASK
    return corrupted, targets


def corrupt_dr(tokens, gen: np.random.Generator, span_mean: float = 3.0, delete_prob: float = 0.1):
    """Span infilling plus independent token deletion.

    A contiguous span with Poisson length (clipped to the sequence) is replaced
    by a single ``MASK``; each remaining token is then dropped with
    ``delete_prob``. The target is the original framed by ``BOS``/``EOS``.
    """
    tokens = list(tokens)
    if not tokens:
        raise DegenerateBatchError("empty sequence")
    n = len(tokens)
    span = min(int(gen.poisson(span_mean)), n)
    start = int(gen.integers(0, n - span + 1))
    keep = gen.random(n) >= delete_prob
    noised = []
    for i, t in enumerate(tokens):
        if i == start:
            noised.append(MASK)
        if start <= i < start + span:
            continue
        if keep[i]:
            noised.append(t)
    if start == n:
        noised.append(MASK)
    return noised, [BOS] + tokens + [EOS]


# -- batch preparation -------------------------------------------------------


def _targets_matrix(rows, width):
    out = np.full((len(rows), width), IGNORE_INDEX, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _seq2seq_arrays(sources, targets, cfg: ModelConfig):
    """Encoder inputs plus shifted decoder inputs/labels for framed targets."""
    src_tok, src_mask = M.pad_batch(sources)
    dec_in = [t[:-1] for t in targets]
    dec_out = [t[1:] for t in targets]
    dec_tok, dec_mask = M.pad_batch(dec_in)
    return {
        "src": src_tok,
        "src_mask": src_mask,
        "dec": dec_tok,
        "dec_mask": dec_mask,
        "dec_targets": _targets_matrix(dec_out, dec_tok.shape[1]),
    }


def prepare_batch(kind: str, instances, cfg: ModelConfig, gen: np.random.Generator | None = None, mask_ratio=0.15):
    """Array batch for ``kind``; ``gen`` drives the corruption of mlm/dr."""
    if not instances:
        raise DegenerateBatchError("empty batch")
    sources = [list(inst.source) for inst in instances]
    for s in sources:
        if len(s) > cfg.max_seq_len:
            raise DimensionError(f"instance of length {len(s)} exceeds max_seq_len")
    if kind == MLM:
        pairs = [corrupt_mlm(s, mask_ratio, gen) for s in sources]
        tok, mask = M.pad_batch([p[0] for p in pairs])
        return {"src": tok, "src_mask": mask, "targets": _targets_matrix([p[1] for p in pairs], tok.shape[1])}
    if kind == DR:
        pairs = [corrupt_dr(s, gen) for s in sources]
        return _seq2seq_arrays([p[0] for p in pairs], [p[1] for p in pairs], cfg)
    if kind == CLASSIFICATION:
        tok, mask = M.pad_batch(sources)
        return {"src": tok, "src_mask": mask, "labels": np.array([i.label for i in instances])}
    if kind == SPAN:
        tok, mask = M.pad_batch(sources)
        spans = np.array([i.span for i in instances])
        return {"src": tok, "src_mask": mask, "starts": spans[:, 0], "ends": spans[:, 1]}
    if kind == GENERATION:
        targets = [[BOS] + list(i.target) + [EOS] for i in instances]
        return _seq2seq_arrays(sources, targets, cfg)
    raise UsageError(f"unknown task kind {kind!r}")


# -- objectives --------------------------------------------------------------


def _check_head(kind, params, cfg: ModelConfig):
    expected = {CLASSIFICATION: cfg.num_classes, SPAN: 2, GENERATION: cfg.vocab_size}.get(kind)
    if expected is None:
        return
    w = params.get("task_head.w")
    if w is None or w.shape != (cfg.d_model, expected):
        raise UsageError(f"params carry no task head suitable for {kind}")


def _seq_ce(logits, targets):
    B, T, V = logits.shape
    loss, g = cross_entropy_logits(logits.reshape(B * T, V), targets.reshape(-1))
    count = int((targets != IGNORE_INDEX).sum())
    return loss, g.reshape(B, T, V), count


def objective_loss(kind: str, params, cfg: ModelConfig, batch) -> ObjectiveOutput:
    """Loss and gradients of one task on one prepared batch.

    Gradients are returned only for keys the task touches, which are always
    inside ``TRAINABLE_REGIONS[kind]``.
    """
    if kind not in TRAINABLE_REGIONS:
        raise UsageError(f"unknown task kind {kind!r}")
    _check_head(kind, params, cfg)
    src, src_mask = batch["src"], batch["src_mask"]
    enc, c_enc = M.encoder_forward(params, cfg, src, src_mask)

    if kind == MLM:
        targets = batch["targets"]
        rows, cols = np.nonzero(targets != IGNORE_INDEX)
        if rows.size == 0:
            raise DegenerateBatchError("no masked positions in batch")
        logits, c_head = M.mlm_head_forward(params, enc[rows, cols])
        loss, dlogits = cross_entropy_logits(logits, targets[rows, cols])
        count = int(rows.size)
        d_sel, grads = M.mlm_head_backward(dlogits, c_head)
        d_enc = np.zeros_like(enc)
        d_enc[rows, cols] = d_sel
    elif kind in (DR, GENERATION):
        dec, c_dec = M.decoder_forward(params, cfg, batch["dec"], batch["dec_mask"], enc, src_mask)
        head = "decoder.out" if kind == DR else "task_head"
        logits, c_head = nn.linear_forward(dec, params, head)
        loss, dlogits, count = _seq_ce(logits, batch["dec_targets"])
        d_dec, grads = nn.linear_backward(dlogits, c_head)
        g_dec, d_enc = M.decoder_backward(d_dec, c_dec)
        nn.add_grads(grads, g_dec)
    elif kind == CLASSIFICATION:
        w = src_mask / src_mask.sum(axis=1, keepdims=True)
        pooled = (enc * w[..., None]).sum(axis=1)
        logits, c_head = nn.linear_forward(pooled, params, "task_head")
        loss, dlogits = cross_entropy_logits(logits, batch["labels"])
        count = len(batch["labels"])
        d_pooled, grads = nn.linear_backward(dlogits, c_head)
        d_enc = d_pooled[:, None, :] * w[..., None]
    else:  # SPAN
        logits, c_head = nn.linear_forward(enc, params, "task_head")
        bias = np.where(src_mask, 0.0, nn.MASK_FILL)
        start_logits = logits[..., 0] + bias
        end_logits = logits[..., 1] + bias
        loss_s, g_s = cross_entropy_logits(start_logits, batch["starts"])
        loss_e, g_e = cross_entropy_logits(end_logits, batch["ends"])
        loss = loss_s + loss_e
        count = len(batch["starts"])
        d_enc, grads = nn.linear_backward(np.stack([g_s, g_e], axis=-1), c_head)

    nn.add_grads(grads, M.encoder_backward(d_enc, c_enc))
    return ObjectiveOutput(loss, grads, count)


def objective_value(kind: str, params, cfg: ModelConfig, batch) -> float:
    return objective_loss(kind, params, cfg, batch).loss


# -- contrastive loss --------------------------------------------------------


def contrastive_loss(h_n, all_h, positives, negatives, tau: float):
    """``-log(s+ / (s+ + s-))`` and its gradient w.r.t. ``h_n``.

    ``s+`` uses the similarity to the mean of the positives' representations,
    ``s-`` sums over each negative separately. Other clients' vectors are
    constants. With no negatives the loss is ``-log(1) = 0``.
    """
    h_n = np.asarray(h_n, dtype=np.float64)
    positives = list(positives)
    negatives = list(negatives)
    if not positives:
        raise UsageError("contrastive loss needs at least one positive")
    for j in positives + negatives:
        if np.asarray(all_h[j]).shape != h_n.shape:
            raise DimensionError("representation widths differ")
    if not np.any(h_n):
        raise ZeroVectorError("zero-norm representation")
    if not negatives:
        logger.debug("contrastive loss with an empty negative set is defined as 0")
        return 0.0, np.zeros_like(h_n)
    pos_mean = np.mean([np.asarray(all_h[i], dtype=np.float64) for i in positives], axis=0)
    sims, dsims = [], []
    for other in [pos_mean] + [np.asarray(all_h[j], dtype=np.float64) for j in negatives]:
        s, ds = cosine_similarity_grad(h_n, other)
        sims.append(s / tau)
        dsims.append(ds / tau)
    logits = np.array(sims)
    top = logits.max()
    log_z = top + math.log(float(np.exp(logits - top).sum()))
    loss = log_z - logits[0]
    probs = np.exp(logits - log_z)
    coef = probs.copy()
    coef[0] -= 1.0
    grad = np.zeros_like(h_n)
    for c, ds in zip(coef, dsims):
        grad = grad + c * ds
    return float(loss), grad


def joint_objective(kind: str, params, cfg: ModelConfig, batch, synthetic_inputs, contrast) -> ObjectiveOutput:
    """Own-task loss plus ``weight`` times the contrastive loss.

    ``contrast`` is a mapping with keys ``all_h``, ``positives``,
    ``negatives``, ``tau`` and ``weight``; its representations are frozen.
    """
    out = objective_loss(kind, params, cfg, batch)
    weight = contrast["weight"]
    if weight == 0.0 or not contrast["negatives"]:
        return out
    h, cache = M.summary_forward(params, cfg, synthetic_inputs)
    c_loss, d_h = contrastive_loss(h, contrast["all_h"], contrast["positives"], contrast["negatives"], contrast["tau"])
    grads = M.summary_backward(weight * d_h, cache)
    nn.add_grads(grads, out.grads)
    return ObjectiveOutput(out.loss + weight * c_loss, grads, out.count)
