"""Finite-difference gradient suite on a micro model.

Every objective (MLM, DR, classification, span, generation), the contrastive
loss on its own and the joint objective through the summary path are checked
against central differences.
"""

from __future__ import annotations

import numpy as np

from . import model as M
from . import tasks as T
from .corpus import Instance
from .model import NUM_SPECIAL, ModelConfig
from .tensor import GradCheckReport, RngStream, finite_diff_check

MICRO = ModelConfig(
    vocab_size=16, d_model=8, num_heads=1, num_layers=1, ffn_dim=16,
    max_seq_len=8, mlp_summary_dim=8, num_classes=4,
)
OBJECTIVES = (T.MLM, T.DR, T.CLASSIFICATION, T.SPAN, T.GENERATION)


def micro_instances(gen: np.random.Generator, cfg: ModelConfig = MICRO) -> list[Instance]:
    def seq(n):
        return tuple(int(t) for t in gen.integers(NUM_SPECIAL, cfg.vocab_size, size=n))

    return [
        Instance(seq(6), label=1, span=(1, 3), target=seq(3)),
        Instance(seq(5), label=3, span=(2, 2), target=seq(4)),
    ]


def micro_params(kind: str, seed: int = 0, cfg: ModelConfig = MICRO, scale: float = 0.3):
    """Micro model with weights jittered away from the tiny initialisation."""
    head = kind if kind in M.TASK_KINDS else "classification"
    params = M.init_model(cfg, RngStream(seed, "gradcheck"), head)
    gen = RngStream(seed, "gradcheck-jitter").generator()
    return {k: v + gen.normal(0.0, scale, v.shape) for k, v in params.items()}


def check_objective(kind: str, seed: int = 0, tol: float = 1e-4) -> GradCheckReport:
    gen = RngStream(seed, "gradcheck-data", 0).generator()
    params = micro_params(kind, seed)
    batch = T.prepare_batch(kind, micro_instances(gen), MICRO, gen, mask_ratio=0.4)
    out = T.objective_loss(kind, params, MICRO, batch)
    return finite_diff_check(lambda q: T.objective_value(kind, q, MICRO, batch), params, out.grads, tol=tol)


def check_contrastive(seed: int = 0, tol: float = 1e-4) -> GradCheckReport:
    gen = RngStream(seed, "gradcheck-contrast").generator()
    all_h = {j: gen.normal(size=6) for j in range(5)}
    pos, neg = [1, 2], [3, 4]
    loss, grad = T.contrastive_loss(all_h[0], all_h, pos, neg, tau=0.7)

    def f(p):
        return T.contrastive_loss(p["h"], all_h, pos, neg, tau=0.7)[0]

    return finite_diff_check(f, {"h": all_h[0].copy()}, {"h": grad}, tol=tol)


def check_joint(kind: str = T.CLASSIFICATION, seed: int = 0, tol: float = 1e-4) -> GradCheckReport:
    gen = RngStream(seed, "gradcheck-joint").generator()
    params = micro_params(kind, seed)
    batch = T.prepare_batch(kind, micro_instances(gen), MICRO, gen)
    synth = M.summary_inputs([inst.source for inst in micro_instances(gen)], MICRO)
    others = {j: gen.normal(size=MICRO.mlp_summary_dim) for j in range(1, 4)}
    contrast = {"all_h": others, "positives": [1], "negatives": [2, 3], "tau": 0.5, "weight": 0.7}
    out = T.joint_objective(kind, params, MICRO, batch, synth, contrast)
    return finite_diff_check(
        lambda q: T.joint_objective(kind, q, MICRO, batch, synth, contrast).loss, params, out.grads, tol=tol
    )


def run_suite(seed: int = 0, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    reports = {kind: check_objective(kind, seed, tol) for kind in OBJECTIVES}
    reports["contrastive"] = check_contrastive(seed, tol)
    reports["joint"] = check_joint(seed=seed, tol=tol)
    return reports
