import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from atcsim import model as M
from atcsim import protocol as P
from atcsim.config import preset
from atcsim.errors import ConfigError, ProtocolError
from atcsim.experiment import Experiment
from atcsim.tensor import RngStream

# -- oracles -----------------------------------------------------------------


def make_updates(deltas, sizes, stage=P.ASSIGN):
    return [P.ModelUpdate(i, 0, stage, d, s) for i, (d, s) in enumerate(zip(deltas, sizes))]


def brute_force_aggregate(weights, deltas, sizes, groups):
    """Per-client weighted sum written out element by element."""
    out = {}
    for n, w in weights.items():
        members = groups[n]
        total = float(sum(sizes[i] for i in members))
        new = {}
        for key, value in w.items():
            flat = value.ravel().copy()
            for e in range(flat.size):
                acc = 0.0
                for i in members:
                    acc += sizes[i] / total * deltas[i][key].ravel()[e]
                flat[e] += acc
            new[key] = flat.reshape(value.shape)
        out[n] = new
    return out


def random_instance(gen, n):
    shapes = {"encoder.a": (int(gen.integers(1, 4)),), "encoder.b": (int(gen.integers(1, 3)), 2)}
    weights = {i: {k: gen.normal(size=s) for k, s in shapes.items()} for i in range(n)}
    deltas = [{k: gen.normal(size=s) for k, s in shapes.items()} for _ in range(n)]
    sizes = [int(gen.integers(1, 500)) for _ in range(n)]
    return weights, deltas, sizes


def test_weighted_sum_hand_example():
    weights = {i: {"encoder.w": np.array([0.0])} for i in range(3)}
    ups = make_updates([{"encoder.w": np.array([x])} for x in (9.0, 0.4, 0.8)], [50, 100, 300])
    out = P.aggregate_clustered(weights, ups, P.ClusterAssignment(0, [0, 1, 1]))
    assert out[1]["encoder.w"][0] == pytest.approx(0.7, abs=1e-15)
    assert out[2]["encoder.w"][0] == pytest.approx(0.7, abs=1e-15)
    assert out[0]["encoder.w"][0] == 9.0  # singleton: w + own delta


def test_opposite_deltas_cancel():
    weights = {i: {"encoder.w": np.array([1.5, -2.0])} for i in range(2)}
    d = np.array([0.25, 1.0])
    ups = make_updates([{"encoder.w": d}, {"encoder.w": -d}], [10, 10])
    out = P.aggregate_fedavg(weights, ups)
    assert np.array_equal(out[0]["encoder.w"], weights[0]["encoder.w"])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_clustered_aggregation_matches_brute_force(seed, n):
    gen = np.random.default_rng(seed)
    weights, deltas, sizes = random_instance(gen, n)
    labels = P.dense_labels(_groups_from(gen.integers(0, n, size=n)), n)
    assign = P.ClusterAssignment(0, labels)
    got = P.aggregate_clustered(weights, make_updates(deltas, sizes), assign)
    ref = brute_force_aggregate(weights, deltas, sizes, {i: assign.cluster_of(i) for i in range(n)})
    for i in range(n):
        for k in weights[i]:
            assert np.max(np.abs(got[i][k] - ref[i][k])) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_neighbor_aggregation_matches_brute_force(seed, n):
    gen = np.random.default_rng(seed)
    weights, deltas, sizes = random_instance(gen, n)
    k = int(gen.integers(1, n))
    ups = make_updates(deltas, sizes, P.CONTRAST)
    nb = P.select_neighbors(ups, k)
    got = P.aggregate_neighbors(weights, ups, nb)
    ref = brute_force_aggregate(weights, deltas, sizes, {i: sorted({i, *nb.positives[i]}) for i in range(n)})
    for i in range(n):
        for key in weights[i]:
            assert np.max(np.abs(got[i][key] - ref[i][key])) <= 1e-12


def _groups_from(raw):
    groups = {}
    for i, g in enumerate(raw):
        groups.setdefault(int(g), []).append(i)
    return list(groups.values())


def test_aggregation_only_touches_uploaded_keys():
    weights = {i: {"encoder.w": np.ones(2), "decoder.w": np.ones(2), "task_head.w": np.ones(2)} for i in range(2)}
    ups = make_updates([{"encoder.w": np.ones(2)}, {"encoder.w": np.ones(2)}], [1, 3])
    out = P.aggregate_fedavg(weights, ups)
    assert np.array_equal(out[0]["decoder.w"], np.ones(2))
    assert out[0]["task_head.w"] is weights[0]["task_head.w"]


def test_zero_weight_sum_is_protocol_error():
    weights = {0: {"encoder.w": np.zeros(1)}}
    with pytest.raises(ProtocolError):
        P.aggregate_fedavg(weights, make_updates([{"encoder.w": np.ones(1)}], [0]))


# -- clustering --------------------------------------------------------------


def flat_updates(vectors):
    return make_updates([{"encoder.w": np.asarray(v, dtype=float)} for v in vectors], [1] * len(vectors))


def test_cluster_hand_example():
    ups = flat_updates([[1, 0], [0.9, 0.1], [0, 1], [0.1, 0.9]])
    a = P.cluster_clients(ups, 2)
    assert a.labels == [0, 0, 1, 1]
    assert a.n_clusters == 2


def test_cluster_extremes():
    gen = np.random.default_rng(0)
    ups = flat_updates(gen.normal(size=(5, 3)))
    assert P.cluster_clients(ups, 5).labels == [0, 1, 2, 3, 4]
    assert P.cluster_clients(ups, 1).labels == [0] * 5
    with pytest.raises(ConfigError):
        P.cluster_clients(ups, 6)


def test_zero_norm_update_joins_largest_cluster():
    ups = flat_updates([[1, 0], [0, 0], [0.95, 0.05], [0, 1]])
    a = P.cluster_clients(ups, 2)
    assert a.labels[1] == a.labels[0] == a.labels[2]
    assert a.labels[3] != a.labels[0]
    assert P.cluster_clients(flat_updates([[0, 0], [0, 0]]), 2).labels == [0, 0]


def scipy_reference(vectors, n_clusters):
    v = np.asarray(vectors, dtype=float)
    unit = v / np.linalg.norm(v, axis=1, keepdims=True)
    dist = np.clip(1.0 - unit @ unit.T, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    if len(v) == 1:
        return [0]
    z = linkage(squareform(dist, checks=False), method="average")
    raw = fcluster(z, t=n_clusters, criterion="maxclust")
    return P.dense_labels(_groups_from(raw), len(v))


def brute_force_average_linkage(vectors, n_clusters):
    """Naive recomputation: linkage from raw cosines every merge, pair scan in index order."""
    v = [np.asarray(x, dtype=float) for x in vectors]
    cos = [[float(a @ b / np.linalg.norm(a) / np.linalg.norm(b)) for b in v] for a in v]
    clusters = [[i] for i in range(len(v))]
    while len(clusters) > n_clusters:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = sum(1.0 - cos[i][j] for i in clusters[a] for j in clusters[b])
                d /= len(clusters[a]) * len(clusters[b])
                if best is None or d < best[0] - 1e-12:
                    best = (d, a, b)
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    return P.dense_labels(clusters, len(v))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.data())
def test_clustering_matches_references(seed, n, data):
    gen = np.random.default_rng(seed)
    vectors = gen.normal(size=(n, 4))
    c = data.draw(st.integers(1, n))
    got = P.cluster_clients(flat_updates(vectors), c).labels
    assert got == brute_force_average_linkage(vectors, c)
    # continuous random data has no ties, so scipy's tree cut agrees too
    assert got == scipy_reference(vectors, c)


def test_cluster_tie_break_prefers_smallest_pair():
    # all four updates mutually orthogonal: every pair is at distance 1
    a = P.cluster_clients(flat_updates(np.eye(4)), 3)
    assert a.labels == [0, 0, 1, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.data())
def test_cluster_ids_dense(seed, n, data):
    vectors = np.random.default_rng(seed).normal(size=(n, 3))
    c = data.draw(st.integers(1, n))
    labels = P.cluster_clients(flat_updates(vectors), c).labels
    assert sorted(set(labels)) == list(range(c))
    assert len(labels) == n


# -- neighbors ---------------------------------------------------------------


def test_select_neighbors_hand_example():
    nb = P.select_neighbors(flat_updates([[1, 0], [1, 0.1], [0, 1]]), 1)
    assert nb.positives == {0: [1], 1: [0], 2: [1]}
    assert nb.negatives == {0: [2], 1: [2], 2: [0]}


def test_select_neighbors_exhaustive_and_duplicates():
    gen = np.random.default_rng(1)
    vecs = gen.normal(size=(5, 3))
    nb = P.select_neighbors(flat_updates(vecs), 4)
    assert all(nb.negatives[i] == [] for i in range(5))
    dup = np.vstack([vecs[:3], vecs[0] * 2.0])
    nb = P.select_neighbors(flat_updates(dup), 1)
    assert nb.positives[0] == [3] and nb.positives[3] == [0]
    with pytest.raises(ConfigError):
        P.select_neighbors(flat_updates(vecs), 5)


def test_select_neighbors_zero_norm_ranks_last():
    nb = P.select_neighbors(flat_updates([[1, 0], [0, 0], [-1, 0.2], [0.5, 0.5]]), 2)
    assert nb.positives[0] == [3, 2]
    assert nb.similarity[1, 0] == -1.0
    assert nb.positives[1] == [0, 2]  # all ties at -1: ascending id


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.data())
def test_neighbor_assignment_invariants(seed, n, data):
    k = data.draw(st.integers(1, n - 1))
    nb = P.select_neighbors(flat_updates(np.random.default_rng(seed).normal(size=(n, 4))), k)
    for i in range(n):
        pos, neg = nb.positives[i], nb.negatives[i]
        assert len(pos) == k
        assert not set(pos) & set(neg)
        assert set(pos) | set(neg) == set(range(n)) - {i}


def test_initial_neighbors_start_from_cluster_mates():
    ups = flat_updates([[1, 0], [0.9, 0.1], [0, 1], [0.1, 0.9], [0.5, 0.5]])
    assign = P.ClusterAssignment(0, [0, 0, 1, 1, 0])
    nb = P.initial_neighbors(ups, assign, 2, 5)
    assert nb.positives[0] == [1, 4]
    assert nb.positives[2] == [3, 4]  # one mate, padded by similarity
    nb = P.initial_neighbors(ups, assign, 1, 5)
    assert nb.positives[0] == [1]  # truncated by similarity
    nb = P.initial_neighbors([], None, 2, 4)
    assert nb.positives[3] == [0, 1]


# -- synthetic data ----------------------------------------------------------


@pytest.fixture(scope="module")
def head():
    params = M.init_model(M.ModelConfig(), RngStream(4))
    gen = np.random.default_rng(0)
    return {k: v + gen.normal(0, 0.3, v.shape) for k, v in M.select(params, ["mlm_head"]).items()}


def test_synthesize_identical_features_ignore_alpha(head):
    gen = np.random.default_rng(1)
    f = gen.normal(size=(32, 32))
    m = np.r_[np.ones(20), np.zeros(12)]
    a = P.synthesize_instance([f, f, f], [m, m, m], [0.2, 0.3, 0.5], head)
    b = P.synthesize_instance([f, f, f], [m, m, m], [0.9, 0.05, 0.05], head)
    assert a == b and len(a) == 20


def test_synthesize_one_hot_and_single_source(head):
    gen = np.random.default_rng(2)
    feats = [gen.normal(size=(32, 32)) for _ in range(3)]
    masks = [np.r_[np.ones(n), np.zeros(32 - n)] for n in (10, 15, 25)]
    direct = P.reconstruct_tokens(head, feats[1][:15])
    assert P.synthesize_instance(feats, masks, [0.0, 1.0, 0.0], head) == direct
    assert P.synthesize_instance(feats[1:2], masks[1:2], [1.0], head) == direct
    assert all(t >= M.NUM_SPECIAL for t in direct)


# -- rounds on a small federation -------------------------------------------

SMALL = preset().replace(
    n_train=24, n_val=4, n_test=4, d_model=16, ffn_dim=16, mlp_summary_dim=8,
    assign_steps=2, assign_batch=8, contrast_steps=2, contrast_batch=8,
    assign_rounds=2, contrast_rounds=2, synthetic_size=6, synthetic_batch=3,
)


def _encoders(server):
    return {n: M.select(w, ["encoder"]) for n, w in server.weights.items()}


def _same(a, b):
    return all(np.array_equal(a[n][k], b[n][k]) for n in a for k in a[n])


def test_assign_round_regions_and_log():
    exp = Experiment(SMALL)
    log = P.run_assign_round(exp.server, exp.clients, "mlm")
    ups = exp.server.last_updates
    assert all({M.region_of(k) for k in u.deltas} == {"encoder", "mlm_head"} for u in ups)
    assert log["round"] == 0 and log["task"] == "mlm" and len(log["clusters"]) == 8
    for w in log["weights"].values():
        assert abs(sum(w.values()) - 1.0) <= 1e-12
    P.run_assign_round(exp.server, exp.clients, "dr")
    assert all({M.region_of(k) for k in u.deltas} == {"encoder", "decoder"} for u in exp.server.last_updates)
    with pytest.raises(ProtocolError):
        P.run_assign_round(exp.server, exp.clients, "classification")


def test_zero_steps_leave_weights_unchanged():
    exp = Experiment(SMALL.replace(assign_steps=0))
    before = {n: {k: v.copy() for k, v in w.items()} for n, w in exp.server.weights.items()}
    P.run_assign_round(exp.server, exp.clients, "mlm")
    assert all(u.norm == 0.0 for u in exp.server.last_updates)
    assert _same(before, exp.server.weights)


def test_assign_needs_two_clients():
    exp = Experiment(SMALL)
    exp.server.weights = {0: exp.server.weights[0]}
    with pytest.raises(ProtocolError):
        P.run_assign_round(exp.server, exp.clients[:1], "mlm")


def test_contrast_round_requires_switch_and_uploads_encoder_only():
    exp = Experiment(SMALL)
    with pytest.raises(ProtocolError):
        P.run_contrast_round(exp.server, exp.clients)
    exp.run_assign_stage()
    exp.switch()
    synth = exp.server.synthetic
    assert len(synth.instances) == SMALL.synthetic_size
    assert all(c.synthetic == synth.instances for c in exp.clients)
    assert all(0 < len(s) <= SMALL.max_seq_len and max(s) < SMALL.vocab_size for s in synth.instances)
    log = P.run_contrast_round(exp.server, exp.clients)
    assert all({M.region_of(k) for k in u.deltas} == {"encoder"} for u in exp.server.last_updates)
    assert all(len(p) == SMALL.k for p in log["neighbors"].values())
    assert not P.audit_messages(exp.server.channel.messages)


def test_fedavg_single_client_is_local_training():
    cfg = SMALL.replace(mode="isolated", n_clusters=1, k=1)
    a, b = Experiment(cfg), Experiment(cfg)
    for exp in (a, b):
        exp.clients = exp.clients[:1]
        exp.server.weights = {0: exp.server.weights[0]}
    P.run_fedavg_round(a.server, a.clients)
    P.run_isolated_round(b.server, b.clients)
    # FedAvg of one client: server model = local model after training
    for k in M.keys_in(a.clients[0].params, ["encoder"]):
        assert np.allclose(a.server.weights[0][k], b.clients[0].params[k], rtol=0, atol=1e-15)


def test_degeneration_matches_fedavg_bit_for_bit():
    cfg = SMALL.replace(n_clusters=1, contrast_weight=0.0, k=7)
    atc, ref = Experiment(cfg), Experiment(cfg)
    for r in range(cfg.assign_rounds):
        task = cfg.task_schedule[r % 2]
        P.run_assign_round(atc.server, atc.clients, task)
        P.run_fedavg_round(ref.server, ref.clients, task=task, stage=P.ASSIGN)
        assert _same(atc.server.weights, ref.server.weights)
    P.start_contrast(atc.server, atc.clients)
    P.broadcast(ref.server, ref.clients, M.BACKBONE, P.FEDAVG)
    for _ in range(cfg.contrast_rounds):
        P.run_contrast_round(atc.server, atc.clients)
        P.run_fedavg_round(ref.server, ref.clients, regions=("encoder",))
        assert _same(_encoders(atc.server), _encoders(ref.server))


# -- audit -------------------------------------------------------------------


def test_audit_flags_violations():
    ok = [
        P.Message(0, P.ASSIGN, "server", "0", "weights", ("encoder.x",)),
        P.Message(0, P.ASSIGN, "0", "server", "update", ("encoder.x",)),
        P.Message(1, P.CONTRAST, "0", "server", "summary"),
    ]
    assert P.audit_messages(ok) == []
    bad = [
        P.Message(0, P.ASSIGN, "0", "server", "raw_instances"),
        P.Message(0, P.ASSIGN, "0", "server", "update", ("task_head.w",)),
        P.Message(1, P.CONTRAST, "0", "server", "update", ("decoder.x",)),
    ]
    assert len(P.audit_messages(bad)) == 3
    out_of_order = [ok[2], ok[1]]
    assert any("precedes" in p for p in P.audit_messages(out_of_order))
