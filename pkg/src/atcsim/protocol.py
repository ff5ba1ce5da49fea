"""Federated round state machines.

The server keeps one personalized backbone per client. Each round it
broadcasts, clients train locally and upload parameter deltas, and the server
aggregates:

* Assign: clients train a server-assigned self-supervised task; uploads are
  clustered by cosine similarity and each client's model absorbs the
  size-weighted mean delta of its cluster.
* Contrast: clients train their own objective plus a contrastive term over
  summarized representations of a shared synthetic dataset; only encoder
  deltas are uploaded and each client absorbs the deltas of itself and its
  K most similar peers.
* FedAvg / Isolated baselines.

All reductions run in ascending client-id order, so results do not depend on
the order in which clients finish.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tasks as T
from .config import ExperimentConfig
from .corpus import ClientDataset, take_batches
from .errors import ConfigError, ProtocolError, UsageError
from .model import NUM_SPECIAL, Params
from .tensor import AdamState, RngStream, adamw_step, flatten, linear_warmup_decay

logger = logging.getLogger(__name__)

ASSIGN, CONTRAST, FEDAVG, ISOLATED = "assign", "contrast", "fedavg", "isolated"
SERVER = "server"

UPLOAD_KINDS = frozenset({"update", "encoder_states", "summary"})
DOWNLOAD_KINDS = frozenset({"weights", "task", "synthetic", "summaries", "neighbors"})


# -- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    round: int
    stage: str
    sender: str
    receiver: str
    kind: str
    keys: tuple[str, ...] = ()
    nbytes: int = 0


@dataclass
class Channel:
    """In-process transport that records every message for auditing."""

    messages: list[Message] = field(default_factory=list)

    def send(self, round_, stage, sender, receiver, kind, payload=None, keys=()) -> None:
        self.messages.append(Message(round_, stage, str(sender), str(receiver), kind, tuple(keys), _nbytes(payload)))

    @property
    def bytes_sent(self) -> int:
        return sum(m.nbytes for m in self.messages)

    def bytes_in_round(self, round_: int) -> int:
        return sum(m.nbytes for m in self.messages if m.round == round_)


def _nbytes(payload) -> int:
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if isinstance(payload, dict):
        return sum(_nbytes(v) for v in payload.values())
    if isinstance(payload, (list, tuple)):
        return sum(_nbytes(v) for v in payload)
    if isinstance(payload, (int, np.integer)):
        return 8
    return 0


def audit_messages(messages) -> list[str]:
    """Privacy-boundary and stage-order violations found in a message trace."""
    problems = []
    last_assign = max((i for i, m in enumerate(messages) if m.stage == ASSIGN), default=-1)
    for i, m in enumerate(messages):
        uploading = m.receiver == SERVER
        if uploading and m.kind not in UPLOAD_KINDS:
            problems.append(f"#{i}: client->server message of kind {m.kind!r}")
        if not uploading and m.kind not in DOWNLOAD_KINDS:
            problems.append(f"#{i}: server->client message of kind {m.kind!r}")
        private = [k for k in m.keys if M.region_of(k) in M.PRIVATE]
        if private:
            problems.append(f"#{i}: private parameters {private[:3]} left their client")
        if m.stage == CONTRAST and m.kind == "update":
            extra = [k for k in m.keys if M.region_of(k) != "encoder"]
            if extra:
                problems.append(f"#{i}: Contrast upload carries non-encoder keys {extra[:3]}")
        if m.stage == CONTRAST and i < last_assign:
            problems.append(f"#{i}: Contrast message precedes the final Assign round")
    return problems


# -- server-side records -----------------------------------------------------


@dataclass
class ModelUpdate:
    client_id: int
    round: int
    stage: str
    deltas: dict[str, np.ndarray]
    num_samples: int

    def flat(self, keys=None) -> np.ndarray:
        keys = sorted(self.deltas) if keys is None else keys
        return np.concatenate(
            [self.deltas[k].ravel() if k in self.deltas else np.zeros(0) for k in keys]
        ) if keys else np.zeros(0)

    @property
    def norm(self) -> float:
        f = self.flat()
        return float(np.sqrt(f @ f))


@dataclass
class ClusterAssignment:
    round: int
    labels: list[int]

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels))

    def members(self, cluster: int) -> list[int]:
        return [i for i, c in enumerate(self.labels) if c == cluster]

    def cluster_of(self, client: int) -> list[int]:
        return self.members(self.labels[client])


@dataclass
class NeighborAssignment:
    round: int
    positives: dict[int, list[int]]
    negatives: dict[int, list[int]]
    ranking: dict[int, list[int]] = field(default_factory=dict)
    similarity: np.ndarray | None = None


@dataclass
class SyntheticDataset:
    instances: list[tuple[int, ...]]
    round: int
    digest: str


# -- similarity, clustering, neighbor selection ------------------------------


def _flat_updates(updates) -> tuple[list[int], list[np.ndarray]]:
    ordered = sorted(updates, key=lambda u: u.client_id)
    keys = sorted(set().union(*(u.deltas for u in ordered)))
    vecs = []
    for u in ordered:
        parts = [u.deltas[k].ravel() if k in u.deltas else None for k in keys]
        if any(p is None for p in parts):
            shapes = {k: v.shape for w in ordered for k, v in w.deltas.items()}
            parts = [u.deltas[k].ravel() if k in u.deltas else np.zeros(int(np.prod(shapes[k]))) for k in keys]
        vecs.append(np.concatenate(parts) if parts else np.zeros(0))
    return [u.client_id for u in ordered], vecs


def similarity_matrix(vectors) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine similarities and a mask of zero-norm vectors."""
    norms = np.array([float(np.sqrt(v @ v)) for v in vectors])
    n = len(vectors)
    sim = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                sim[i, j] = -1.0
            else:
                sim[i, j] = float(vectors[i] @ vectors[j]) / (norms[i] * norms[j])
    return np.clip(sim, -1.0, 1.0), norms == 0.0


def agglomerative_average(dist: np.ndarray, n_clusters: int) -> list[list[int]]:
    """Average-linkage agglomerative clustering by exhaustive pair search.

    Merges the closest pair until ``n_clusters`` remain; equal distances go to
    the pair with the smallest ``(min member, min member)`` index. Returns
    clusters sorted by their smallest member.
    """
    m = dist.shape[0]
    if not 1 <= n_clusters <= max(m, 1):
        raise ValueError(f"cannot form {n_clusters} clusters from {m} items")
    clusters = [[i] for i in range(m)]
    while len(clusters) > n_clusters:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = float(dist[np.ix_(clusters[a], clusters[b])].mean())
                key = (d, clusters[a][0], clusters[b][0])
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        merged = sorted(clusters[a] + clusters[b])
        clusters = [c for i, c in enumerate(clusters) if i not in (a, b)] + [merged]
        clusters.sort(key=lambda c: c[0])
    return clusters


def dense_labels(clusters, n: int) -> list[int]:
    """Cluster ids 0..c-1 in order of each cluster's smallest member."""
    labels = [-1] * n
    for cid, members in enumerate(sorted((sorted(c) for c in clusters), key=lambda c: c[0])):
        for i in members:
            labels[i] = cid
    return labels


def cluster_clients(updates, n_clusters: int, round_index: int = 0) -> ClusterAssignment:
    """Group clients by average-linkage clustering on ``1 - cosine`` of their deltas.

    Zero-norm updates are left out of the similarity computation and joined
    to the largest cluster afterwards (lowest id on ties).
    """
    ids, vecs = _flat_updates(updates)
    n = len(ids)
    if ids != list(range(n)):
        raise ProtocolError("cluster_clients expects updates from clients 0..N-1")
    if not 1 <= n_clusters <= n:
        raise ConfigError(f"n_clusters must be in [1, {n}]", key="n_clusters")
    sim, zero = similarity_matrix(vecs)
    live = [i for i in range(n) if not zero[i]]
    if not live:
        return ClusterAssignment(round_index, [0] * n)
    sub = 1.0 - sim[np.ix_(live, live)]
    groups = [[live[i] for i in c] for c in agglomerative_average(sub, min(n_clusters, len(live)))]
    for i in range(n):
        if zero[i]:
            largest = max(range(len(groups)), key=lambda g: (len(groups[g]), -groups[g][0]))
            groups[largest] = sorted(groups[largest] + [i])
    return ClusterAssignment(round_index, dense_labels(groups, n))


def rank_neighbors(sim: np.ndarray, n: int) -> list[int]:
    others = [j for j in range(sim.shape[0]) if j != n]
    return sorted(others, key=lambda j: (-sim[n, j], j))


def select_neighbors(updates, k: int, round_index: int = 0) -> NeighborAssignment:
    """Each client's ``k`` most similar peers by update cosine become positives."""
    ids, vecs = _flat_updates(updates)
    n = len(ids)
    if not 1 <= k < n:
        raise ConfigError(f"K must be in [1, {n - 1}]", key="k")
    sim, _ = similarity_matrix(vecs)
    pos, neg, ranking = {}, {}, {}
    for i in range(n):
        order = rank_neighbors(sim, i)
        ranking[ids[i]] = [ids[j] for j in order]
        pos[ids[i]] = [ids[j] for j in order[:k]]
        neg[ids[i]] = [ids[j] for j in order[k:]]
    return NeighborAssignment(round_index, pos, neg, ranking, sim)


def initial_neighbors(updates, assignment: ClusterAssignment | None, k: int, n: int, round_index: int = 0):
    """Positives for the first Contrast round.

    Final-Assign cluster co-members come first, then everyone else, each group
    ordered by similarity of the last Assign deltas; the list is cut to ``k``.
    Without Assign history all similarities tie and ids decide.
    """
    if updates:
        _, vecs = _flat_updates(updates)
        sim, _ = similarity_matrix(vecs)
    else:
        sim = np.zeros((n, n))
    pos, neg, ranking = {}, {}, {}
    for i in range(n):
        mates = set(assignment.cluster_of(i)) if assignment is not None else set()
        order = sorted((j for j in range(n) if j != i), key=lambda j: (j not in mates, -sim[i, j], j))
        ranking[i] = order
        pos[i] = order[:k]
        neg[i] = order[k:]
    return NeighborAssignment(round_index, pos, neg, ranking, sim)


# -- aggregation -------------------------------------------------------------


def group_weights(updates_by_id, members) -> dict[int, float]:
    total = sum(updates_by_id[i].num_samples for i in members)
    if total <= 0:
        raise ProtocolError("aggregation weights sum to zero")
    return {i: updates_by_id[i].num_samples / total for i in members}


def aggregate_groups(weights: dict[int, Params], updates, groups: dict[int, list[int]]) -> dict[int, Params]:
    """``w_n + sum_{i in group(n)} |D_i| / |D_group| * delta_i`` for every n.

    Only keys present in the updates change. For each key the weights are
    normalised over the group members that uploaded it.
    """
    by_id = {u.client_id: u for u in updates}
    out = {}
    for n in sorted(weights):
        members = sorted(groups[n])
        w = dict(weights[n])
        keys = sorted(set().union(*(by_id[i].deltas for i in members)))
        for key in keys:
            contrib = [i for i in members if key in by_id[i].deltas]
            coef = group_weights(by_id, contrib)
            acc = np.zeros_like(w[key])
            for i in contrib:
                acc = acc + coef[i] * by_id[i].deltas[key]
            w[key] = w[key] + acc
        out[n] = w
    return out


def _weights_of(server_or_weights) -> dict[int, Params]:
    return server_or_weights.weights if hasattr(server_or_weights, "weights") else server_or_weights


def aggregate_clustered(server, updates, assignment: ClusterAssignment):
    """Cluster-wise update; ``server`` may be a :class:`Server` or a weights mapping."""
    weights = _weights_of(server)
    groups = {n: assignment.cluster_of(n) for n in sorted(weights)}
    return aggregate_groups(weights, updates, groups)


def aggregate_neighbors(server, updates, neighbors: NeighborAssignment):
    weights = _weights_of(server)
    groups = {n: sorted({n, *neighbors.positives[n]}) for n in sorted(weights)}
    return aggregate_groups(weights, updates, groups)


def aggregate_fedavg(server, updates):
    weights = _weights_of(server)
    everyone = sorted(u.client_id for u in updates)
    return aggregate_groups(weights, updates, {n: everyone for n in sorted(weights)})


# -- participants ------------------------------------------------------------


class Client:
    """One participant: private data, full local model, local training."""

    def __init__(self, dataset: ClientDataset, params: Params, cfg: ExperimentConfig, rng: RngStream):
        self.dataset = dataset
        self.params = params
        self.cfg = cfg
        self.mcfg = cfg.model
        self.rng = rng
        self.synthetic: list[tuple[int, ...]] | None = None
        self.summaries: dict[int, np.ndarray] | None = None
        self.positives: list[int] = []
        self.negatives: list[int] = []

    @property
    def id(self) -> int:
        return self.dataset.client_id

    @property
    def kind(self) -> str:
        return self.dataset.task_kind

    @property
    def num_samples(self) -> int:
        return self.dataset.size

    def load(self, weights: Params) -> None:
        for k, v in weights.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ProtocolError(f"broadcast key {k} does not match the local backbone")
            self.params[k] = v.copy()

    def snapshot(self, regions) -> Params:
        return {k: self.params[k].copy() for k in M.keys_in(self.params, regions)}

    def train(self, task: str, steps: int, batch_size: int, round_index: int, lr_at, contrast: dict | None = None) -> float:
        """Run ``steps`` AdamW steps of ``task`` (plus the contrastive term if given)."""
        cfg = self.cfg
        stream = self.rng.child("round", round_index)
        batches = take_batches(self.dataset.train, batch_size, stream.child("batches"), steps) if steps else []
        corrupt = stream.child("corrupt").generator()
        allowed = T.TRAINABLE_REGIONS[task] | (T.CONTRAST_REGIONS if contrast else frozenset())
        state = AdamState()
        params = self.params
        losses = []
        for s, instances in enumerate(batches):
            batch = T.prepare_batch(task, instances, self.mcfg, corrupt, cfg.mask_ratio)
            if contrast is None:
                out = T.objective_loss(task, params, self.mcfg, batch)
            else:
                active = contrast["weight"] != 0.0 and contrast["negatives"]
                synth = self._synthetic_inputs(stream.child("synthetic", s)) if active else None
                out = T.joint_objective(task, params, self.mcfg, batch, synth, contrast)
            touched = {M.region_of(k) for k in out.grads}
            if not touched <= allowed:
                raise UsageError(f"{task} produced gradients outside its regions: {sorted(touched - allowed)}")
            params, state = adamw_step(
                params, out.grads, state, lr_at(s), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay
            )
            losses.append(out.loss)
        self.params = params
        return float(np.mean(losses)) if losses else 0.0

    def _synthetic_inputs(self, rng: RngStream):
        data = self.synthetic
        size = self.cfg.synthetic_batch
        if size < len(data):
            idx = np.sort(rng.generator().choice(len(data), size=size, replace=False))
            data = [data[i] for i in idx]
        return M.summary_inputs(data, self.mcfg)

    def summary(self) -> np.ndarray:
        if not self.synthetic:
            raise ProtocolError(f"client {self.id} has no synthetic dataset")
        return M.summary_representation(self.params, self.mcfg, self.synthetic)

    def encoder_features(self, count: int, rng: RngStream):
        """Encoder states of ``count`` random local instances, padded to L."""
        gen = rng.generator()
        picks = gen.integers(0, self.num_samples, size=count)
        seqs = [self.dataset.train[int(i)].source for i in picks]
        tok, mask = M.pad_batch(seqs, self.mcfg.max_seq_len)
        states, _ = M.encoder_forward(self.params, self.mcfg, tok, mask)
        return states, mask


class Server:
    """Personalized backbones, round counters and assignment history."""

    def __init__(self, cfg: ExperimentConfig, backbone: Params, sizes: dict[int, int], channel: Channel | None = None):
        self.cfg = cfg
        self.sizes = dict(sizes)
        self.weights: dict[int, Params] = {n: {k: v.copy() for k, v in backbone.items()} for n in sorted(sizes)}
        self.channel = channel if channel is not None else Channel()
        self.rng = RngStream(cfg.seed, "server")
        self.round = 0
        self.stage = ASSIGN
        self.stage_round = 0
        self.cluster_history: list[ClusterAssignment] = []
        self.neighbor_history: list[NeighborAssignment] = []
        self.neighbors: NeighborAssignment | None = None
        self.last_updates: list[ModelUpdate] = []
        self.synthetic: SyntheticDataset | None = None
        self.mlm_head: Params | None = None
        self.logs: list[dict] = []

    @property
    def n_clients(self) -> int:
        return len(self.weights)

    def enter_stage(self, stage: str) -> None:
        if stage != self.stage:
            self.stage = stage
            self.stage_round = 0

    def lr_schedule(self, steps: int, total_rounds: int):
        base = self.stage_round * steps
        total = max(total_rounds, 1) * steps
        cfg = self.cfg
        return lambda s: linear_warmup_decay(base + s, total, cfg.lr, cfg.warmup)


# -- round helpers -----------------------------------------------------------


def _check_clients(server: Server, clients) -> list[Client]:
    clients = sorted(clients, key=lambda c: c.id)
    if [c.id for c in clients] != sorted(server.weights):
        raise ProtocolError("client set does not match the server's personalized models")
    return clients


def broadcast(server: Server, clients, regions=M.BACKBONE, stage: str | None = None) -> None:
    """Send each client its personalized weights restricted to ``regions``."""
    _broadcast(server, sorted(clients, key=lambda c: c.id), regions, stage or server.stage)


def _broadcast(server: Server, clients, regions, stage: str) -> None:
    for c in clients:
        payload = M.select(server.weights[c.id], regions)
        server.channel.send(server.round, stage, SERVER, c.id, "weights", payload, keys=sorted(payload))
        c.load(payload)


def _upload(server: Server, client: Client, before: Params, regions, stage: str) -> ModelUpdate:
    deltas = {k: client.params[k] - before[k] for k in sorted(before) if M.region_of(k) in regions}
    update = ModelUpdate(client.id, server.round, stage, deltas, client.num_samples)
    server.channel.send(server.round, stage, client.id, SERVER, "update", deltas, keys=sorted(deltas))
    return update


def _finish_round(server: Server, entry: dict) -> dict:
    entry["bytes"] = server.channel.bytes_in_round(server.round)
    server.logs.append(entry)
    server.round += 1
    server.stage_round += 1
    return entry


def _weights_log(updates, groups) -> dict:
    by_id = {u.client_id: u for u in updates}
    return {str(n): {str(i): w for i, w in group_weights(by_id, groups[n]).items()} for n in sorted(groups)}


def _norms(updates) -> dict:
    return {str(u.client_id): u.norm for u in updates}


# -- rounds ------------------------------------------------------------------


def run_assign_round(server: Server, clients, assigned_task: str) -> dict:
    """One Assign round: broadcast, assigned-task training, clustered aggregation."""
    cfg = server.cfg
    clients = _check_clients(server, clients)
    if len(clients) < 2:
        raise ProtocolError("the Assign stage needs at least two clients")
    if assigned_task not in T.ASSIGNED_TASKS:
        raise ProtocolError(f"{assigned_task!r} is not an assignable task")
    server.enter_stage(ASSIGN)
    regions = T.TRAINABLE_REGIONS[assigned_task] & set(M.BACKBONE)
    _broadcast(server, clients, M.BACKBONE, ASSIGN)
    lr_at = server.lr_schedule(cfg.assign_steps, cfg.assign_rounds)
    losses, updates = {}, []
    for c in clients:
        server.channel.send(server.round, ASSIGN, SERVER, c.id, "task")
        before = c.snapshot(regions)
        losses[str(c.id)] = c.train(assigned_task, cfg.assign_steps, cfg.assign_batch, server.round, lr_at)
        updates.append(_upload(server, c, before, regions, ASSIGN))
    assignment = cluster_clients(updates, cfg.n_clusters, server.round)
    groups = {n: assignment.cluster_of(n) for n in sorted(server.weights)}
    server.weights = aggregate_groups(server.weights, updates, groups)
    server.cluster_history.append(assignment)
    server.last_updates = updates
    return _finish_round(server, {
        "round": server.round,
        "stage": ASSIGN,
        "task": assigned_task,
        "loss": losses,
        "update_norm": _norms(updates),
        "clusters": assignment.labels,
        "weights": _weights_log(updates, groups),
    })


def run_fedavg_round(server: Server, clients, task: str | None = None, regions=M.BACKBONE, stage: str = FEDAVG) -> dict:
    """FedAvg over ``regions``; clients train their own objective unless ``task`` is given."""
    cfg = server.cfg
    clients = _check_clients(server, clients)
    server.enter_stage(stage)
    assigned = task in T.ASSIGNED_TASKS
    steps, batch, rounds = (
        (cfg.assign_steps, cfg.assign_batch, cfg.assign_rounds) if assigned
        else (cfg.contrast_steps, cfg.contrast_batch, cfg.contrast_rounds)
    )
    _broadcast(server, clients, regions, stage)
    lr_at = server.lr_schedule(steps, rounds)
    losses, updates = {}, []
    for c in clients:
        kind = task or c.kind
        up_regions = T.TRAINABLE_REGIONS[kind] & set(regions)
        before = c.snapshot(up_regions)
        losses[str(c.id)] = c.train(kind, steps, batch, server.round, lr_at)
        updates.append(_upload(server, c, before, up_regions, stage))
    everyone = sorted(server.weights)
    groups = {n: everyone for n in everyone}
    server.weights = aggregate_groups(server.weights, updates, groups)
    server.last_updates = updates
    return _finish_round(server, {
        "round": server.round,
        "stage": stage,
        "task": task or "own",
        "loss": losses,
        "update_norm": _norms(updates),
        "weights": _weights_log(updates, groups),
    })


def run_isolated_round(server: Server, clients) -> dict:
    """Local training on the clients' own objectives with no communication."""
    cfg = server.cfg
    clients = sorted(clients, key=lambda c: c.id)
    server.enter_stage(ISOLATED)
    lr_at = server.lr_schedule(cfg.contrast_steps, cfg.contrast_rounds)
    losses = {}
    for c in clients:
        losses[str(c.id)] = c.train(c.kind, cfg.contrast_steps, cfg.contrast_batch, server.round, lr_at)
    return _finish_round(server, {"round": server.round, "stage": ISOLATED, "task": "own", "loss": losses})


def designated_mlm_head(server: Server, source: str = "assign") -> Params:
    """MLM head used to reconstruct synthetic tokens.

    ``assign`` averages the clients' Assign-stage heads weighted by data size;
    ``fresh`` draws a new random head.
    """
    if source == "fresh":
        fresh = M.init_model(server.cfg.model, server.rng.child("fresh_mlm_head"))
        return M.select(fresh, ("mlm_head",))
    total = sum(server.sizes.values())
    ids = sorted(server.weights)
    head = {}
    for k in M.keys_in(server.weights[ids[0]], ("mlm_head",)):
        acc = np.zeros_like(server.weights[ids[0]][k])
        for n in ids:
            acc = acc + (server.sizes[n] / total) * server.weights[n][k]
        head[k] = acc
    return head


def reconstruct_tokens(head: Params, states: np.ndarray) -> tuple[int, ...]:
    """Greedy MLM reconstruction restricted to regular (non-special) tokens."""
    logits, _ = M.mlm_head_forward(head, states)
    return tuple(int(t) + NUM_SPECIAL for t in logits[:, NUM_SPECIAL:].argmax(axis=1))


def synthesize_instance(features, masks, alpha, head: Params) -> tuple[int, ...]:
    """Mix per-client encoder states with weights ``alpha`` and decode tokens.

    The instance covers the positions where the ``alpha``-weighted padding
    mask is at least one half.
    """
    mix = np.zeros_like(features[0])
    cover = np.zeros(masks[0].shape)
    for a, f, m in zip(alpha, features, masks):
        mix = mix + a * f
        cover = cover + a * m
    length = max(1, int((cover >= 0.5 - 1e-12).sum()))
    return reconstruct_tokens(head, mix[:length])


def generate_synthetic_dataset(server: Server, clients, size: int, rng: RngStream | None = None) -> SyntheticDataset:
    """Build and broadcast ``size`` synthetic instances from mixed encoder features."""
    if size < 1:
        raise ConfigError("synthetic dataset size must be >= 1", key="synthetic_size")
    clients = _check_clients(server, clients)
    rng = server.rng.child("synthetic") if rng is None else rng
    stage = CONTRAST
    _broadcast(server, clients, M.BACKBONE, stage)
    feats, masks = [], []
    for c in clients:
        f, m = c.encoder_features(size, c.rng.child("synthetic_features"))
        server.channel.send(server.round, stage, c.id, SERVER, "encoder_states", [f, m.astype(np.float64)])
        feats.append(f)
        masks.append(m.astype(np.float64))
    if server.mlm_head is None:
        server.mlm_head = designated_mlm_head(server, server.cfg.mlm_head_source)
    gen = rng.generator()
    instances = []
    for j in range(size):
        alpha = gen.dirichlet(np.ones(len(clients)))
        instances.append(synthesize_instance([f[j] for f in feats], [m[j] for m in masks], alpha, server.mlm_head))
    digest = hashlib.sha256(repr(instances).encode()).hexdigest()[:16]
    data = SyntheticDataset(instances, server.round, digest)
    for c in clients:
        server.channel.send(server.round, stage, SERVER, c.id, "synthetic", np.array([t for s in instances for t in s]))
        c.synthetic = list(instances)
    server.synthetic = data
    return data


def run_contrast_round(server: Server, clients) -> dict:
    """One Contrast round; neighbors used in training come from the previous round."""
    cfg = server.cfg
    clients = _check_clients(server, clients)
    if server.synthetic is None:
        raise ProtocolError("Contrast stage requires a synthetic dataset")
    if server.neighbors is None:
        raise ProtocolError("Contrast stage requires an initial neighbor assignment")
    server.enter_stage(CONTRAST)
    _broadcast(server, clients, ("encoder",), CONTRAST)
    summaries = {}
    for c in clients:
        h = c.summary()
        server.channel.send(server.round, CONTRAST, c.id, SERVER, "summary", h)
        summaries[c.id] = h
    if sorted(summaries) != sorted(server.weights):
        raise ProtocolError("missing summarized representation")
    prev = server.neighbors
    for c in clients:
        server.channel.send(server.round, CONTRAST, SERVER, c.id, "summaries", list(summaries.values()))
        server.channel.send(server.round, CONTRAST, SERVER, c.id, "neighbors", prev.positives[c.id])
        c.summaries = dict(summaries)
        c.positives = list(prev.positives[c.id])
        c.negatives = list(prev.negatives[c.id])
    lr_at = server.lr_schedule(cfg.contrast_steps, cfg.contrast_rounds)
    losses, updates = {}, []
    for c in clients:
        contrast = {
            "all_h": c.summaries,
            "positives": c.positives,
            "negatives": c.negatives,
            "tau": cfg.tau,
            "weight": cfg.contrast_weight,
        }
        before = c.snapshot(("encoder",))
        losses[str(c.id)] = c.train(c.kind, cfg.contrast_steps, cfg.contrast_batch, server.round, lr_at, contrast)
        updates.append(_upload(server, c, before, ("encoder",), CONTRAST))
    chosen = select_neighbors(updates, cfg.k, server.round)
    groups = {n: sorted({n, *chosen.positives[n]}) for n in sorted(server.weights)}
    server.weights = aggregate_groups(server.weights, updates, groups)
    server.neighbors = chosen
    server.neighbor_history.append(chosen)
    server.last_updates = updates
    return _finish_round(server, {
        "round": server.round,
        "stage": CONTRAST,
        "task": "own+contrast",
        "loss": losses,
        "update_norm": _norms(updates),
        "trained_positives": {str(n): prev.positives[n] for n in sorted(prev.positives)},
        "neighbors": {str(n): chosen.positives[n] for n in sorted(chosen.positives)},
        "ranking": {str(n): chosen.ranking[n] for n in sorted(chosen.ranking)},
        "weights": _weights_log(updates, groups),
        "summary_norm": {str(n): float(np.linalg.norm(h)) for n, h in sorted(summaries.items())},
    })


def start_contrast(server: Server, clients) -> SyntheticDataset:
    """Stage switch: synthetic dataset plus first-round neighbors."""
    cfg = server.cfg
    clients = _check_clients(server, clients)
    server.enter_stage(CONTRAST)
    data = generate_synthetic_dataset(server, clients, cfg.synthetic_size)
    last_assign = server.cluster_history[-1] if server.cluster_history else None
    updates = server.last_updates if last_assign is not None else []
    server.neighbors = initial_neighbors(updates, last_assign, cfg.k, len(clients), server.round)
    return data
