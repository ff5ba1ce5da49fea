"""Per-task metrics and client evaluation.

Accuracy for classification, exact match / F1 over answer positions for span
extraction, and unigram / LCS ROUGE F1 for generation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import layers as nn
from . import model as M
from .errors import DegenerateBatchError, InputError
from .model import BOS, EOS, ModelConfig

PRIMARY_METRIC = {"classification": "acc", "span_extraction": "f1", "generation": "rougeL"}


@dataclass
class MetricReport:
    client_id: int
    task_kind: str
    metrics: dict[str, float] = field(default_factory=dict)
    round: int = 0
    split: str = "test"

    @property
    def primary(self) -> float:
        return self.metrics[PRIMARY_METRIC[self.task_kind]]


def accuracy(preds, golds) -> float:
    preds, golds = list(preds), list(golds)
    if not golds or len(preds) != len(golds):
        raise DegenerateBatchError("accuracy needs equal, non-empty prediction and gold lists")
    return sum(int(p == g) for p, g in zip(preds, golds)) / len(golds)


def span_em_f1(pred_span, gold_span) -> tuple[int, float]:
    (ps, pe), (gs, ge) = pred_span, gold_span
    if pe < ps or ge < gs:
        raise InputError("span end precedes span start")
    em = int(ps == gs and pe == ge)
    overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
    if overlap == 0:
        return em, 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return em, 2 * precision * recall / (precision + recall)


def _f1(match: int, n_pred: int, n_ref: int) -> float:
    if match == 0:
        return 0.0
    precision = match / n_pred
    recall = match / n_ref
    return 2 * precision * recall / (precision + recall)


def rouge1_f1(pred_tokens, ref_tokens) -> float:
    pred, ref = list(pred_tokens), list(ref_tokens)
    if not ref:
        raise InputError("reference must be non-empty")
    if not pred:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    return _f1(overlap, len(pred), len(ref))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rougeL_f1(pred_tokens, ref_tokens) -> float:
    pred, ref = list(pred_tokens), list(ref_tokens)
    if not ref:
        raise InputError("reference must be non-empty")
    if not pred:
        return 0.0
    return _f1(lcs_length(pred, ref), len(pred), len(ref))


# -- model predictions -------------------------------------------------------


def predict_classes(params, cfg: ModelConfig, instances) -> list[int]:
    tok, mask = M.pad_batch([i.source for i in instances])
    enc, _ = M.encoder_forward(params, cfg, tok, mask)
    w = mask / mask.sum(axis=1, keepdims=True)
    logits, _ = nn.linear_forward((enc * w[..., None]).sum(axis=1), params, "task_head")
    return [int(c) for c in logits.argmax(axis=1)]


def predict_spans(params, cfg: ModelConfig, instances, max_answer: int | None = None) -> list[tuple[int, int]]:
    """Best ``(start, end)`` with ``start <= end`` by summed start/end logits."""
    tok, mask = M.pad_batch([i.source for i in instances])
    enc, _ = M.encoder_forward(params, cfg, tok, mask)
    logits, _ = nn.linear_forward(enc, params, "task_head")
    L = tok.shape[1]
    allowed = np.triu(np.ones((L, L), dtype=bool))
    if max_answer is not None:
        allowed &= ~np.triu(np.ones((L, L), dtype=bool), k=max_answer)
    out = []
    for b in range(len(instances)):
        n = int(mask[b].sum())
        s, e = logits[b, :n, 0], logits[b, :n, 1]
        score = np.where(allowed[:n, :n], s[:, None] + e[None, :], -np.inf)
        i = int(np.argmax(score))
        out.append((i // n, i % n))
    return out


def greedy_decode(params, cfg: ModelConfig, instances, head: str = "task_head", max_len: int | None = None):
    """Greedy generation without the ``BOS``/``EOS`` frame."""
    max_len = cfg.max_seq_len if max_len is None else max_len
    src, src_mask = M.pad_batch([i.source for i in instances])
    enc, _ = M.encoder_forward(params, cfg, src, src_mask)
    B = len(instances)
    seqs = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len - 1):
        dec, _ = M.decoder_forward(params, cfg, seqs, np.ones_like(seqs, dtype=bool), enc, src_mask)
        logits, _ = nn.linear_forward(dec[:, -1], params, head)
        nxt = np.where(done, EOS, logits.argmax(axis=1))
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in seqs[:, 1:]:
        toks = []
        for t in row:
            if t == EOS:
                break
            toks.append(int(t))
        out.append(toks)
    return out


def evaluate_client(params, cfg: ModelConfig, dataset, split: str = "test", round_index: int = 0) -> MetricReport:
    instances = dataset.split(split)
    if not instances:
        raise DegenerateBatchError(f"split {split!r} is empty")
    kind = dataset.task_kind
    report = MetricReport(dataset.client_id, kind, round=round_index, split=split)
    if kind == "classification":
        preds = predict_classes(params, cfg, instances)
        report.metrics["acc"] = accuracy(preds, [i.label for i in instances])
    elif kind == "span_extraction":
        preds = predict_spans(params, cfg, instances)
        scores = [span_em_f1(p, i.span) for p, i in zip(preds, instances)]
        report.metrics["em"] = float(np.mean([s[0] for s in scores]))
        report.metrics["f1"] = float(np.mean([s[1] for s in scores]))
    else:
        preds = greedy_decode(params, cfg, instances)
        report.metrics["rouge1"] = float(np.mean([rouge1_f1(p, i.target) for p, i in zip(preds, instances)]))
        report.metrics["rougeL"] = float(np.mean([rougeL_f1(p, i.target) for p, i in zip(preds, instances)]))
    return report


def aggregate_scores(reports) -> dict[str, float]:
    """Unweighted mean of each client's primary metric, per task kind and overall."""
    by_kind: dict[str, list[float]] = {}
    for r in reports:
        by_kind.setdefault(r.task_kind, []).append(r.primary)
    out = {kind: float(np.mean(v)) for kind, v in sorted(by_kind.items())}
    out["overall"] = float(np.mean([r.primary for r in reports]))
    return out
