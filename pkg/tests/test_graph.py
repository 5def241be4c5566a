import networkx as netx
import numpy as np
import pytest
from sklearn.base import clone

from xrec.graph import (EmbeddingTable, GnnConfig, InteractionGraph, KCoreFilter, LightGCN, bpr_loss,
                        k_core_filter, lightgcn_propagate, ranking_auc, train_gnn)


def peel_oracle(num_users, num_items, edges, k):
    """Repeatedly drop every node below k until nothing changes (no queue, no compaction)."""
    users, items = set(range(num_users)), set(range(num_items))
    while True:
        live = [(u, i) for u, i in edges if u in users and i in items]
        du = {u: 0 for u in users}
        di = {i: 0 for i in items}
        for u, i in live:
            du[u] += 1
            di[i] += 1
        drop_u = {u for u, d in du.items() if d < k}
        drop_i = {i for i, d in di.items() if d < k}
        if not drop_u and not drop_i:
            return users, items
        users -= drop_u
        items -= drop_i


def random_graph(rng, max_nodes=20):
    nu = int(rng.integers(1, max_nodes))
    ni = int(rng.integers(1, max_nodes - nu + 1))
    p = rng.uniform(0.1, 0.8)
    edges = [(u, i) for u in range(nu) for i in range(ni) if rng.random() < p]
    return nu, ni, edges


def core_sets(core):
    return set(core.user_ids.tolist()), set(core.item_ids.tolist())


def test_graph_dedups_and_indexes():
    g = InteractionGraph(2, 3, [(0, 1), (0, 1), (1, 2), (0, 0)])
    assert g.num_edges == 3
    assert g.user_neighbors[0] == [0, 1]
    assert g.item_neighbors[1] == [0]
    assert sum(map(len, g.user_neighbors)) == sum(map(len, g.item_neighbors)) == 3
    with pytest.raises(ValueError):
        InteractionGraph(1, 1, [(0, 1)])


def test_kcore_k1_drops_isolated_only():
    g = InteractionGraph(3, 3, [(0, 0), (1, 0)])
    core = k_core_filter(g, 1)
    assert core_sets(core) == ({0, 1}, {0})
    assert core.num_edges == 2


def test_kcore_path_collapses():
    g = InteractionGraph(2, 2, [(0, 0), (1, 0), (1, 1)])
    core = k_core_filter(g, 2)
    assert core.num_users == core.num_items == core.num_edges == 0


def test_kcore_complete_bipartite_unchanged():
    edges = [(u, i) for u in range(3) for i in range(3)]
    core = k_core_filter(InteractionGraph(3, 3, edges), 3)
    assert core.edges == edges


def test_kcore_rejects_zero():
    with pytest.raises(ValueError):
        k_core_filter(InteractionGraph(1, 1, [(0, 0)]), 0)


@pytest.mark.parametrize("seed", range(25))
def test_kcore_matches_peeling_and_networkx(seed):
    rng = np.random.default_rng(seed)
    nu, ni, edges = random_graph(rng)
    k = int(rng.integers(1, 5))
    core = k_core_filter(InteractionGraph(nu, ni, edges), k)
    assert core_sets(core) == peel_oracle(nu, ni, edges, k)

    G = netx.Graph()
    G.add_nodes_from(("u", u) for u in range(nu))
    G.add_nodes_from(("i", i) for i in range(ni))
    G.add_edges_from((("u", u), ("i", i)) for u, i in edges)
    ref = netx.k_core(G, k)
    assert core_sets(core) == ({n for s, n in ref if s == "u"}, {n for s, n in ref if s == "i"})


def test_kcore_maximality():
    rng = np.random.default_rng(99)
    for _ in range(20):
        nu, ni, edges = random_graph(rng)
        k = 2
        core = k_core_filter(InteractionGraph(nu, ni, edges), k)
        users, items = core_sets(core)
        for u in range(nu):
            if u not in users:
                assert sum(1 for a, i in edges if a == u and i in items) < k
        for i in range(ni):
            if i not in items:
                assert sum(1 for u, b in edges if b == i and u in users) < k


def test_kcore_estimator():
    kc = KCoreFilter(k=2)
    assert kc.get_params() == {"k": 2}
    g = InteractionGraph(2, 2, [(0, 0), (0, 1), (1, 0), (1, 1)])
    assert kc.fit_transform(g).num_edges == 4
    assert clone(kc).k == 2


def test_propagation_three_nodes():
    g = InteractionGraph(1, 2, [(0, 0), (0, 1)])
    base = EmbeddingTable([[0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
    out = lightgcn_propagate(g, base, 1)
    np.testing.assert_allclose(out.user_vectors[0], [0.5 / np.sqrt(2)] * 2)
    np.testing.assert_allclose(out.user_vectors[0], [0.35355339] * 2, atol=1e-8)


def test_propagation_is_linear_and_keeps_isolated():
    rng = np.random.default_rng(0)
    g = InteractionGraph(4, 5, [(0, 0), (0, 1), (1, 1), (2, 3)])
    base = EmbeddingTable(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
    scaled = EmbeddingTable(2.5 * base.user_vectors, 2.5 * base.item_vectors)
    a, b = lightgcn_propagate(g, base, 2), lightgcn_propagate(g, scaled, 2)
    np.testing.assert_allclose(b.user_vectors, 2.5 * a.user_vectors)
    np.testing.assert_allclose(b.item_vectors, 2.5 * a.item_vectors)
    np.testing.assert_allclose(a.user_vectors[3], base.user_vectors[3], rtol=1e-12)
    np.testing.assert_allclose(a.item_vectors[4], base.item_vectors[4], rtol=1e-12)


def test_propagation_shape_mismatch():
    g = InteractionGraph(2, 2, [(0, 0)])
    with pytest.raises(ValueError):
        lightgcn_propagate(g, EmbeddingTable(np.zeros((3, 2)), np.zeros((2, 2))), 1)


def test_bpr_values():
    u, p, n = np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.array([0.0, 1.0])
    assert bpr_loss(u, p, n).item() == pytest.approx(-np.log(1 / (1 + np.exp(-2.0))))
    assert bpr_loss(u, n, n).item() == pytest.approx(np.log(2))
    assert bpr_loss(u, p, n, 0.5, 4.0).item() == pytest.approx(-np.log(1 / (1 + np.exp(-2.0))) + 2.0)


def test_bpr_decreases_with_margin():
    u = np.array([1.0, 0.0])
    losses = [bpr_loss(u, np.array([m, 0.0]), np.zeros(2), 0.1, 1.0).item() for m in np.linspace(-3, 3, 13)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def brute_auc(table, held_out, train_graph):
    hits = total = 0.0
    for u, i in held_out:
        s = table.user_vectors[u] @ table.item_vectors[i]
        held = {b for a, b in held_out if a == u}
        for j in range(len(table.item_vectors)):
            if j in held or train_graph.has_edge(u, j):
                continue
            t = table.user_vectors[u] @ table.item_vectors[j]
            hits += 1.0 if s > t else 0.5 if s == t else 0.0
            total += 1
    return hits / total


def test_two_disjoint_users_rank_well():
    train = [(0, i) for i in range(5)] + [(1, i) for i in range(6, 11)]
    held = [(0, 5), (1, 11)]
    g = InteractionGraph(2, 12, train)
    cfg = GnnConfig(embed_dim=8, learning_rate=1e-2, epochs=200, batch_size=16, plateau_tol=-np.inf, seed=1)
    table = train_gnn(g, cfg)
    auc = brute_auc(table, held, g)
    assert auc > 0.8
    assert ranking_auc(table, held, g) == pytest.approx(auc)


def test_zero_epochs_returns_propagated_init():
    g = InteractionGraph(2, 3, [(0, 0), (1, 1), (1, 2)])
    cfg = GnnConfig(embed_dim=4, epochs=0, seed=5)
    rng = np.random.default_rng(5)
    base = EmbeddingTable(rng.uniform(-0.1, 0.1, (2, 4)), rng.uniform(-0.1, 0.1, (3, 4)))
    expected = lightgcn_propagate(g, base, cfg.num_layers)
    out = train_gnn(g, cfg)
    np.testing.assert_array_equal(out.user_vectors, expected.user_vectors)
    np.testing.assert_array_equal(out.item_vectors, expected.item_vectors)


def test_train_deterministic():
    g = InteractionGraph(3, 6, [(0, 0), (0, 1), (1, 2), (2, 4), (2, 5)])
    cfg = GnnConfig(embed_dim=4, epochs=5, seed=3)
    a, b = train_gnn(g, cfg), train_gnn(g, cfg)
    assert np.array_equal(a.user_vectors, b.user_vectors) and np.array_equal(a.item_vectors, b.item_vectors)


def test_train_rejects_saturated_user_and_empty_graph():
    with pytest.raises(ValueError, match="every item"):
        train_gnn(InteractionGraph(1, 2, [(0, 0), (0, 1)]), GnnConfig(epochs=1))
    with pytest.raises(ValueError):
        train_gnn(InteractionGraph(1, 2, []), GnnConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        GnnConfig(num_layers=0)
    with pytest.raises(ValueError):
        GnnConfig(embed_dim=1)


def test_lightgcn_estimator():
    g = InteractionGraph(2, 6, [(0, 0), (0, 1), (1, 3), (1, 4)])
    est = LightGCN(embed_dim=4, epochs=3, seed=2)
    assert clone(est).get_params() == est.get_params()
    table = est.fit_transform(g)
    assert table.user_vectors.shape == (2, 4)
    scores = est.predict([(0, 0), (1, 3)])
    assert scores.shape == (2,)
    assert 0.0 <= est.score([(0, 2), (1, 5)]) <= 1.0


def test_embedding_table_rejects_nan():
    with pytest.raises(ValueError):
        EmbeddingTable([[np.nan]], [[0.0]])
