"""Synthetic multi-domain corpora, client partitioning and batching.

Each domain draws tokens from a Zipf profile over its own preferred slice of
the vocabulary. Task labels are derived from the tokens by fixed rules:

* classification: the class whose domain keywords occur most often
  (ties go to the lower class id);
* span extraction: the tokens between a planted open marker and close marker;
* generation: the tokens following the ``SEP`` marker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateBatchError, GenerationError
from .model import NUM_SPECIAL, SEP, TASK_KINDS
from .tensor import RngStream

N_REGULAR = 64
SPAN_OPEN = NUM_SPECIAL + 31
SPAN_CLOSE = NUM_SPECIAL + 32
KEYWORD_RANKS = range(16, 24)  # zero-based Zipf ranks used as class keywords
KEYWORDS_PER_CLASS = 2
PLANTED_KEYWORDS = 3


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    preferred: tuple[int, ...]  # regular token ids, most frequent first
    zipf_exponent: float = 1.1
    length_range: tuple[int, int] = (14, 24)
    in_domain_prob: float = 0.9

    def keywords(self, num_classes: int) -> list[tuple[int, ...]]:
        """Keyword tokens of each class, taken from mid-frequency ranks."""
        ranks = list(KEYWORD_RANKS)
        need = num_classes * KEYWORDS_PER_CLASS
        if need > len(ranks):
            raise GenerationError(f"{num_classes} classes need {need} keyword ranks, have {len(ranks)}")
        kw = [self.preferred[r] for r in ranks[:need]]
        return [tuple(kw[c * KEYWORDS_PER_CLASS : (c + 1) * KEYWORDS_PER_CLASS]) for c in range(num_classes)]

    def token_probs(self, n_regular: int = N_REGULAR) -> np.ndarray:
        """Unigram distribution over regular tokens (index 0 = first regular id)."""
        ranks = np.arange(1, len(self.preferred) + 1, dtype=np.float64)
        zipf = ranks**-self.zipf_exponent
        zipf /= zipf.sum()
        p = np.full(n_regular, (1.0 - self.in_domain_prob) / n_regular)
        for tok, q in zip(self.preferred, zipf):
            p[tok - NUM_SPECIAL] += self.in_domain_prob * q
        return p


def default_domains(n_regular: int = N_REGULAR, subset: int = 40) -> list[DomainSpec]:
    """Two domains whose preferred slices overlap in 18 of 40 tokens.

    Domain A ranks its slice from the low end of the vocabulary, domain B
    from the high end, so their frequent tokens are disjoint.
    """
    excluded = {SPAN_OPEN, SPAN_CLOSE}
    regular = [NUM_SPECIAL + i for i in range(n_regular) if NUM_SPECIAL + i not in excluded]
    return [
        DomainSpec("A", tuple(regular[:subset])),
        DomainSpec("B", tuple(reversed(regular))[:subset]),
    ]


@dataclass(frozen=True)
class Instance:
    source: tuple[int, ...]
    label: int | None = None
    span: tuple[int, int] | None = None
    target: tuple[int, ...] | None = None


@dataclass
class ClientDataset:
    client_id: int
    task_kind: str
    domain_id: str
    train: list[Instance] = field(default_factory=list)
    val: list[Instance] = field(default_factory=list)
    test: list[Instance] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.train)

    def split(self, name: str) -> list[Instance]:
        return getattr(self, name)


@dataclass(frozen=True)
class ClientPlan:
    task_kind: str
    domain_id: str


DEFAULT_PLAN = (
    ClientPlan("classification", "A"),
    ClientPlan("classification", "B"),
    ClientPlan("span_extraction", "A"),
    ClientPlan("span_extraction", "B"),
    ClientPlan("span_extraction", "B"),
    ClientPlan("generation", "B"),
    ClientPlan("generation", "B"),
    ClientPlan("generation", "A"),
)


def classification_rule(tokens, keywords) -> int:
    counts = [sum(1 for t in tokens if t in set(group)) for group in keywords]
    return int(np.argmax(counts))


class _Sampler:
    def __init__(self, spec: DomainSpec, gen: np.random.Generator, exclude=()):
        p = spec.token_probs()
        for t in exclude:
            p[t - NUM_SPECIAL] = 0.0
        self.p = p / p.sum()
        self.spec = spec
        self.gen = gen

    def tokens(self, n: int) -> list[int]:
        return [int(t) + NUM_SPECIAL for t in self.gen.choice(len(self.p), size=n, p=self.p)]

    def length(self) -> int:
        lo, hi = self.spec.length_range
        return int(self.gen.integers(lo, hi + 1))


def _classification_instance(sampler: _Sampler, keywords) -> Instance:
    gen = sampler.gen
    doc = sampler.tokens(sampler.length())
    cls = int(gen.integers(len(keywords)))
    where = gen.choice(len(doc), size=PLANTED_KEYWORDS, replace=False)
    for pos in sorted(int(i) for i in where):
        doc[pos] = int(gen.choice(keywords[cls]))
    return Instance(tuple(doc), label=classification_rule(doc, keywords))


def _span_instance(sampler: _Sampler, max_answer: int = 3) -> Instance:
    gen = sampler.gen
    n = sampler.length()
    ans_len = int(gen.integers(1, max_answer + 1))
    if ans_len + 2 > n:
        raise GenerationError(f"answer of {ans_len} tokens does not fit a document of {n}")
    body = sampler.tokens(n - ans_len - 2)
    start_at = int(gen.integers(0, len(body) + 1))
    answer = sampler.tokens(ans_len)
    doc = body[:start_at] + [SPAN_OPEN] + answer + [SPAN_CLOSE] + body[start_at:]
    start = start_at + 1
    return Instance(tuple(doc), span=(start, start + ans_len - 1))


def _generation_instance(sampler: _Sampler, target_range=(3, 8)) -> Instance:
    gen = sampler.gen
    n = sampler.length()
    t_len = int(gen.integers(target_range[0], target_range[1] + 1))
    if t_len + 2 > n:
        raise GenerationError(f"target of {t_len} tokens does not fit a document of {n}")
    head = sampler.tokens(n - t_len - 1)
    tail = sampler.tokens(t_len)
    doc = head + [SEP] + tail
    return Instance(tuple(doc), target=tuple(tail))


def build_corpus(
    domains=None,
    plan=DEFAULT_PLAN,
    sizes=(512, 128, 128),
    seed: int = 0,
    num_classes: int = 4,
    max_len: int = 32,
) -> list[ClientDataset]:
    """Generate one :class:`ClientDataset` per entry of ``plan``."""
    domains = default_domains() if domains is None else list(domains)
    by_id = {d.domain_id: d for d in domains}
    if len(by_id) < 2:
        raise GenerationError("need at least two domains")
    if len({p.task_kind for p in plan}) < 2:
        raise GenerationError("need at least two task kinds in the plan")
    for d in domains:
        if d.length_range[1] + 2 > max_len:
            raise GenerationError(f"domain {d.domain_id} documents exceed max length {max_len}")
    root = RngStream(seed, "corpus")
    out = []
    for cid, entry in enumerate(plan):
        if entry.task_kind not in TASK_KINDS:
            raise GenerationError(f"unknown task kind {entry.task_kind!r}")
        if entry.domain_id not in by_id:
            raise GenerationError(f"unknown domain {entry.domain_id!r}")
        spec = by_id[entry.domain_id]
        ds = ClientDataset(cid, entry.task_kind, entry.domain_id)
        for split, n in zip(("train", "val", "test"), sizes):
            gen = root.child("client", cid, split).generator()
            if entry.task_kind == "span_extraction":
                sampler = _Sampler(spec, gen, exclude=(SPAN_OPEN, SPAN_CLOSE))
                items = [_span_instance(sampler) for _ in range(n)]
            elif entry.task_kind == "generation":
                sampler = _Sampler(spec, gen)
                items = [_generation_instance(sampler) for _ in range(n)]
            else:
                sampler = _Sampler(spec, gen)
                kw = spec.keywords(num_classes)
                items = [_classification_instance(sampler, kw) for _ in range(n)]
            setattr(ds, split, items)
        if ds.size == 0:
            raise GenerationError(f"client {cid} has an empty training split")
        out.append(ds)
    return out


# -- batching ----------------------------------------------------------------


def make_batches(instances, batch_size: int, rng: RngStream):
    """One shuffled epoch; the final short batch is kept."""
    if not instances:
        raise DegenerateBatchError("cannot batch an empty split")
    order = rng.generator().permutation(len(instances))
    return [[instances[i] for i in order[s : s + batch_size]] for s in range(0, len(order), batch_size)]


def take_batches(instances, batch_size: int, rng: RngStream, n_batches: int):
    """The first ``n_batches`` batches of consecutive shuffled epochs."""
    out = []
    epoch = 0
    while len(out) < n_batches:
        out.extend(make_batches(instances, batch_size, rng.child("epoch", epoch)))
        epoch += 1
    return out[:n_batches]


def n_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# -- text dump ---------------------------------------------------------------

_HEADER = "# client\tsplit\tkind\tdomain\tsource\tpayload"


def _payload(kind: str, inst: Instance) -> str:
    if kind == "classification":
        return str(inst.label)
    if kind == "span_extraction":
        return f"{inst.span[0]} {inst.span[1]}"
    return " ".join(str(t) for t in inst.target)


def dump_corpus(datasets, path) -> None:
    lines = [_HEADER]
    for ds in datasets:
        for split in ("train", "val", "test"):
            for inst in ds.split(split):
                src = " ".join(str(t) for t in inst.source)
                lines.append(
                    f"{ds.client_id}\t{split}\t{ds.task_kind}\t{ds.domain_id}\t{src}\t{_payload(ds.task_kind, inst)}"
                )
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus(path) -> list[ClientDataset]:
    found: dict[int, ClientDataset] = {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        cid, split, kind, domain, src, payload = line.split("\t")
        ds = found.setdefault(int(cid), ClientDataset(int(cid), kind, domain))
        source = tuple(int(t) for t in src.split())
        nums = tuple(int(t) for t in payload.split())
        if kind == "classification":
            inst = Instance(source, label=nums[0])
        elif kind == "span_extraction":
            inst = Instance(source, span=(nums[0], nums[1]))
        else:
            inst = Instance(source, target=nums)
        ds.split(split).append(inst)
    return [found[k] for k in sorted(found)]


def unigram_distribution(docs, n_regular: int = N_REGULAR) -> np.ndarray:
    counts = np.zeros(n_regular)
    for doc in docs:
        for t in doc:
            if t >= NUM_SPECIAL:
                counts[t - NUM_SPECIAL] += 1
    return counts / counts.sum()
