import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcsim import model as M
from atcsim import tasks as T
from atcsim.corpus import build_corpus
from atcsim.errors import DegenerateBatchError, UsageError, ZeroVectorError
from atcsim.gradcheck import check_contrastive
from atcsim.model import BOS, EOS, MASK, NUM_SPECIAL
from atcsim.tensor import IGNORE_INDEX, RngStream

CFG = M.ModelConfig()


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(sizes=(128, 4, 4), seed=0)


def test_region_sets():
    assert T.TRAINABLE_REGIONS[T.MLM] == {"encoder", "mlm_head"}
    assert T.TRAINABLE_REGIONS[T.DR] == {"encoder", "decoder"}
    assert T.TRAINABLE_REGIONS[T.CLASSIFICATION] == {"encoder", "task_head"}
    assert T.TRAINABLE_REGIONS[T.SPAN] == {"encoder", "task_head"}
    assert T.TRAINABLE_REGIONS[T.GENERATION] == {"encoder", "decoder", "task_head"}


def test_corrupt_mlm_counts_and_targets():
    toks = list(range(NUM_SPECIAL, NUM_SPECIAL + 20))
    corrupted, targets = T.corrupt_mlm(toks, 0.15, np.random.default_rng(0))
    masked = [i for i, t in enumerate(corrupted) if t == MASK]
    assert len(masked) == 3
    for i, (t, y) in enumerate(zip(toks, targets)):
        assert y == (t if i in masked else IGNORE_INDEX)
    with pytest.raises(DegenerateBatchError):
        T.corrupt_mlm(toks, 0.0, np.random.default_rng(0))
    with pytest.raises(DegenerateBatchError):
        T.corrupt_mlm([BOS, EOS, 4], 0.5, np.random.default_rng(0))


@settings(max_examples=40)
@given(st.lists(st.integers(0, 68), min_size=1, max_size=30), st.integers(0, 10_000))
def test_corrupt_mlm_never_masks_specials(tokens, seed):
    if all(t < NUM_SPECIAL for t in tokens):
        return
    corrupted, targets = T.corrupt_mlm(tokens, 0.3, np.random.default_rng(seed))
    for t, c, y in zip(tokens, corrupted, targets):
        if t < NUM_SPECIAL:
            assert c == t and y == IGNORE_INDEX


@settings(max_examples=40)
@given(st.lists(st.integers(NUM_SPECIAL, 68), min_size=1, max_size=30), st.integers(0, 10_000))
def test_corrupt_dr_properties(tokens, seed):
    noised, target = T.corrupt_dr(tokens, np.random.default_rng(seed))
    assert len(noised) <= len(tokens) + 1
    assert noised.count(MASK) == 1
    assert target == [BOS] + tokens + [EOS]
    again, _ = T.corrupt_dr(tokens, np.random.default_rng(seed))
    assert again == noised


def test_untrained_classifier_near_uniform(corpus):
    ds = corpus[0]
    params = M.init_model(CFG, RngStream(0), "classification")
    rng = RngStream(1)
    losses = []
    for b in range(100):
        gen = rng.child(b).generator()
        idx = gen.choice(ds.size, size=16, replace=False)
        batch = T.prepare_batch(T.CLASSIFICATION, [ds.train[i] for i in idx], CFG)
        losses.append(T.objective_value(T.CLASSIFICATION, params, CFG, batch))
    assert abs(np.mean(losses) - math.log(4)) < 0.2


def test_span_loss_peaked_logits(monkeypatch, corpus):
    insts = corpus[2].train[:4]
    batch = T.prepare_batch(T.SPAN, insts, CFG)
    B, L = batch["src"].shape
    enc = np.zeros((B, L, CFG.d_model))
    for b, inst in enumerate(insts):
        enc[b, inst.span[0], 0] = 20.0
        enc[b, inst.span[1], 1] += 20.0
    monkeypatch.setattr(T.M, "encoder_forward", lambda p, c, t, m: (enc, None))
    monkeypatch.setattr(T.M, "encoder_backward", lambda d, c: {})
    params = M.init_model(CFG, RngStream(0), "span_extraction")
    params["task_head.w"] = np.zeros((CFG.d_model, 2))
    params["task_head.w"][0, 0] = params["task_head.w"][1, 1] = 1.0
    assert T.objective_value(T.SPAN, params, CFG, batch) < 1e-6


@pytest.mark.parametrize("kind", [T.MLM, T.DR, T.CLASSIFICATION, T.SPAN, T.GENERATION])
def test_grads_stay_in_regions(kind, corpus):
    ds = {T.CLASSIFICATION: corpus[0], T.SPAN: corpus[2], T.GENERATION: corpus[5]}.get(kind, corpus[7])
    head = kind if kind in M.TASK_KINDS else None
    params = M.init_model(CFG, RngStream(2), head)
    batch = T.prepare_batch(kind, ds.train[:8], CFG, np.random.default_rng(0))
    out = T.objective_loss(kind, params, CFG, batch)
    assert {M.region_of(k) for k in out.grads} <= T.TRAINABLE_REGIONS[kind]
    assert np.isfinite(out.loss) and out.count > 0


def test_head_mismatch_is_usage_error(corpus):
    params = M.init_model(CFG, RngStream(2), "classification")
    batch = T.prepare_batch(T.SPAN, corpus[2].train[:4], CFG)
    with pytest.raises(UsageError):
        T.objective_loss(T.SPAN, params, CFG, batch)


# -- contrastive loss --------------------------------------------------------


def _vec(angle):
    return np.array([math.cos(angle), math.sin(angle)])


def test_contrastive_closed_forms():
    h = {0: _vec(0), 1: _vec(0), 2: _vec(math.pi / 2)}
    loss, _ = T.contrastive_loss(h[0], h, [1], [2], tau=1.0)
    assert abs(loss - math.log(1 + math.exp(-1))) <= 1e-6
    assert abs(loss - 0.313262) <= 1e-6
    loss, _ = T.contrastive_loss(h[0], h, [1], [2], tau=0.5)
    assert abs(loss - 0.126928) <= 1e-6
    same = {0: _vec(0), 1: _vec(1.0), 2: _vec(-1.0)}
    loss, _ = T.contrastive_loss(same[0], same, [1], [2], tau=1.0)
    assert abs(loss - math.log(2)) <= 1e-12


def test_contrastive_positive_mean_and_empty_negatives():
    h = {0: _vec(0), 1: _vec(0.3), 2: _vec(-0.3), 3: _vec(2.0)}
    loss, _ = T.contrastive_loss(h[0], h, [1, 2], [3], tau=1.0)
    pos = (h[1] + h[2]) / 2
    s_pos = math.exp(pos @ h[0] / np.linalg.norm(pos))
    s_neg = math.exp(h[3] @ h[0])
    assert loss == pytest.approx(-math.log(s_pos / (s_pos + s_neg)), abs=1e-12)
    loss, grad = T.contrastive_loss(h[0], h, [1, 2, 3], [], tau=1.0)
    assert loss == 0.0 and not np.any(grad)


def test_contrastive_errors():
    h = {0: np.zeros(3), 1: np.ones(3), 2: -np.ones(3)}
    with pytest.raises(ZeroVectorError):
        T.contrastive_loss(h[0], h, [1], [2], tau=1.0)
    with pytest.raises(UsageError):
        T.contrastive_loss(h[1], h, [], [2], tau=1.0)


def test_contrastive_monotone_in_positive_similarity():
    neg = _vec(2.0)
    losses = []
    for angle in np.linspace(math.pi, 0.0, 25):
        h = {0: _vec(0), 1: _vec(angle), 2: neg}
        losses.append(T.contrastive_loss(h[0], h, [1], [2], tau=0.7)[0])
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_contrastive_gradient():
    assert check_contrastive().passed


def test_joint_objective_zero_weight_equals_own_loss(corpus):
    params = M.init_model(CFG, RngStream(3), "classification")
    batch = T.prepare_batch(T.CLASSIFICATION, corpus[0].train[:8], CFG)
    synth = M.summary_inputs([i.source for i in corpus[1].train[:4]], CFG)
    h = {j: np.random.default_rng(j).normal(size=CFG.mlp_summary_dim) for j in range(1, 4)}
    base = T.objective_loss(T.CLASSIFICATION, params, CFG, batch)
    joint = T.joint_objective(
        T.CLASSIFICATION, params, CFG, batch, synth,
        {"all_h": h, "positives": [1], "negatives": [2, 3], "tau": 1.0, "weight": 0.0},
    )
    assert joint.loss == base.loss
    assert all(np.array_equal(joint.grads[k], base.grads[k]) for k in base.grads)
    active = T.joint_objective(
        T.CLASSIFICATION, params, CFG, batch, synth,
        {"all_h": h, "positives": [1], "negatives": [2, 3], "tau": 1.0, "weight": 1.0},
    )
    assert {M.region_of(k) for k in active.grads} == {"encoder", "decoder", "task_head", "contrast_head"}
