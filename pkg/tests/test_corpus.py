import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcsim.corpus import (
    DEFAULT_PLAN,
    SPAN_CLOSE,
    SPAN_OPEN,
    ClientPlan,
    DomainSpec,
    build_corpus,
    classification_rule,
    default_domains,
    dump_corpus,
    load_corpus,
    make_batches,
    n_batches,
    take_batches,
    unigram_distribution,
)
from atcsim.errors import DegenerateBatchError, GenerationError
from atcsim.model import NUM_SPECIAL, SEP, ModelConfig
from atcsim.tensor import RngStream

SMALL = (48, 16, 16)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(sizes=SMALL, seed=3)


def test_default_topology(corpus):
    assert [(d.task_kind, d.domain_id) for d in corpus] == [(p.task_kind, p.domain_id) for p in DEFAULT_PLAN]
    assert [d.client_id for d in corpus] == list(range(8))
    full = build_corpus(seed=0)
    assert all((len(d.train), len(d.val), len(d.test)) == (512, 128, 128) for d in full)


def test_deterministic(corpus):
    again = build_corpus(sizes=SMALL, seed=3)
    assert [d.train + d.val + d.test for d in again] == [d.train + d.val + d.test for d in corpus]
    other = build_corpus(sizes=SMALL, seed=4)
    assert other[0].train != corpus[0].train


def test_tokens_and_lengths_valid(corpus):
    V, L = ModelConfig().vocab_size, ModelConfig().max_seq_len
    for d in corpus:
        for inst in d.train + d.val + d.test:
            assert 0 < len(inst.source) <= L
            assert all(NUM_SPECIAL <= t < V or t == SEP for t in inst.source)


def test_labels_follow_rules(corpus):
    domains = {s.domain_id: s for s in default_domains()}
    for d in corpus:
        for inst in d.train + d.test:
            if d.task_kind == "classification":
                kw = domains[d.domain_id].keywords(4)
                assert inst.label == classification_rule(inst.source, kw)
            elif d.task_kind == "span_extraction":
                s, e = inst.span
                assert 1 <= s <= e < len(inst.source) - 1
                assert inst.source[s - 1] == SPAN_OPEN and inst.source[e + 1] == SPAN_CLOSE
                assert SPAN_OPEN not in inst.source[s : e + 1] and SPAN_CLOSE not in inst.source[s : e + 1]
            else:
                k = inst.source.index(SEP)
                assert tuple(inst.source[k + 1 :]) == inst.target
                assert 3 <= len(inst.target) <= 8


def test_classification_rule_ties_to_lowest():
    kw = [(10, 11), (12, 13), (14, 15)]
    assert classification_rule([12, 10, 20], kw) == 0
    assert classification_rule([13, 12, 10], kw) == 1
    assert classification_rule([20, 21], kw) == 0


def test_classes_are_balanced_enough():
    ds = build_corpus(sizes=(512, 8, 8), seed=0)[0]
    counts = np.bincount([i.label for i in ds.train], minlength=4)
    assert counts.min() > 512 / 4 * 0.6


def test_default_domains_overlap_below_half():
    a, b = default_domains()
    assert len(set(a.preferred) & set(b.preferred)) / len(a.preferred) < 0.5
    assert SPAN_OPEN not in a.preferred + b.preferred


def test_disjoint_domains_far_apart_in_unigram_space():
    regular = [NUM_SPECIAL + i for i in range(64) if NUM_SPECIAL + i not in (SPAN_OPEN, SPAN_CLOSE)]
    doms = [DomainSpec("A", tuple(regular[:30])), DomainSpec("B", tuple(regular[30:60]))]
    plan = (ClientPlan("classification", "A"), ClientPlan("generation", "B"))
    a, b = build_corpus(doms, plan, sizes=(256, 1, 1), seed=1)
    pa = unigram_distribution(i.source for i in a.train)
    pb = unigram_distribution(i.source for i in b.train)
    assert 0.5 * np.abs(pa - pb).sum() > 0.3


def test_default_domains_distinguishable_by_naive_bayes():
    """Multinomial naive Bayes on unigrams separates the two default domains."""
    data = build_corpus(sizes=(256, 8, 128), seed=2)
    vocab = 64 + NUM_SPECIAL
    counts = {"A": np.ones(vocab), "B": np.ones(vocab)}
    for d in data:
        for inst in d.train:
            np.add.at(counts[d.domain_id], list(inst.source), 1)
    logp = {k: np.log(v / v.sum()) for k, v in counts.items()}
    correct = total = 0
    for d in data:
        for inst in d.test:
            scores = {k: lp[list(inst.source)].sum() for k, lp in logp.items()}
            correct += max(scores, key=scores.get) == d.domain_id
            total += 1
    assert correct / total >= 0.9


def test_infeasible_plans_rejected():
    with pytest.raises(GenerationError):
        build_corpus(plan=(ClientPlan("classification", "A"), ClientPlan("classification", "B")))
    with pytest.raises(GenerationError):
        build_corpus(domains=default_domains()[:1])
    with pytest.raises(GenerationError):
        build_corpus(plan=(ClientPlan("classification", "Z"), ClientPlan("generation", "A")))
    tiny = [DomainSpec("A", (5, 6, 7), length_range=(3, 3)), DomainSpec("B", (8, 9, 10), length_range=(3, 3))]
    with pytest.raises(GenerationError):
        build_corpus(tiny, (ClientPlan("span_extraction", "A"), ClientPlan("generation", "B")), sizes=(50, 1, 1))


@settings(max_examples=30)
@given(st.integers(1, 70), st.integers(1, 20), st.integers(0, 1000))
def test_make_batches_epoch(n, bs, seed):
    items = list(range(n))
    batches = make_batches(items, bs, RngStream(seed))
    assert len(batches) == n_batches(n, bs) == math.ceil(n / bs)
    assert sorted(x for b in batches for x in b) == items
    assert batches == make_batches(items, bs, RngStream(seed))


def test_take_batches_spans_epochs():
    got = take_batches(list(range(10)), 4, RngStream(0), 7)
    assert len(got) == 7
    assert sorted(x for b in got[:3] for x in b) == list(range(10))
    with pytest.raises(DegenerateBatchError):
        make_batches([], 4, RngStream(0))


def test_dump_load_round_trip(tmp_path, corpus):
    path = tmp_path / "corpus.tsv"
    dump_corpus(corpus, path)
    back = load_corpus(path)
    assert [(d.client_id, d.task_kind, d.domain_id) for d in back] == [
        (d.client_id, d.task_kind, d.domain_id) for d in corpus
    ]
    for a, b in zip(corpus, back):
        assert (a.train, a.val, a.test) == (b.train, b.val, b.test)
    dump_corpus(back, tmp_path / "again.tsv")
    assert (tmp_path / "again.tsv").read_bytes() == path.read_bytes()
