"""User-item interaction graph, k-core filtering, LightGCN propagation and BPR training."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx

log = logging.getLogger(__name__)


class InteractionGraph:
    """Bipartite user-item graph with per-side neighbour lists.

    ``user_ids`` / ``item_ids`` map the compact ids back to the ids of whatever
    graph this one was derived from (identity for a freshly built graph).
    """

    def __init__(self, num_users: int, num_items: int, edges, user_ids=None, item_ids=None):
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        pairs = sorted({(int(u), int(i)) for u, i in edges})
        for u, i in pairs:
            if not (0 <= u < self.num_users and 0 <= i < self.num_items):
                raise ValueError(f"edge ({u}, {i}) out of range for {self.num_users}x{self.num_items} graph")
        self.edges: list[tuple[int, int]] = pairs
        self.user_neighbors: list[list[int]] = [[] for _ in range(self.num_users)]
        self.item_neighbors: list[list[int]] = [[] for _ in range(self.num_items)]
        for u, i in pairs:
            self.user_neighbors[u].append(i)
            self.item_neighbors[i].append(u)
        self.user_ids = np.arange(self.num_users) if user_ids is None else np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.arange(self.num_items) if item_ids is None else np.asarray(item_ids, dtype=np.int64)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def user_degree(self, u: int) -> int:
        return len(self.user_neighbors[u])

    def item_degree(self, i: int) -> int:
        return len(self.item_neighbors[i])

    def has_edge(self, u: int, i: int) -> bool:
        return (u, i) in self._edge_set

    @property
    def _edge_set(self) -> set[tuple[int, int]]:
        cached = getattr(self, "_edges_cache", None)
        if cached is None:
            cached = self._edges_cache = set(self.edges)
        return cached

    def normalized_adjacency(self) -> np.ndarray:
        """Dense ``num_users x num_items`` matrix with entries 1/sqrt(|N(u)| |N(i)|)."""
        adj = np.zeros((self.num_users, self.num_items))
        if self.edges:
            du = np.array([len(n) for n in self.user_neighbors], dtype=np.float64)
            di = np.array([len(n) for n in self.item_neighbors], dtype=np.float64)
            us, its = np.array(self.edges).T
            adj[us, its] = 1.0 / np.sqrt(du[us] * di[its])
        return adj

    def __repr__(self) -> str:
        return f"InteractionGraph(users={self.num_users}, items={self.num_items}, edges={self.num_edges})"


@dataclass
class GnnConfig:
    num_layers: int = 2
    embed_dim: int = 32
    learning_rate: float = 1e-3
    l2_lambda: float = 1e-4
    num_neg_samples: int = 1
    epochs: int = 400
    seed: int = 0
    batch_size: int = 128
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.num_neg_samples < 1:
            raise ValueError("num_neg_samples must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class EmbeddingTable:
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.user_vectors = np.asarray(self.user_vectors, dtype=np.float64)
        self.item_vectors = np.asarray(self.item_vectors, dtype=np.float64)
        if self.user_vectors.ndim != 2 or self.item_vectors.ndim != 2:
            raise ValueError("embedding tables must be 2-D")
        if self.user_vectors.shape[1] != self.item_vectors.shape[1]:
            raise ValueError("user and item vectors must share a dimension")
        if not (np.isfinite(self.user_vectors).all() and np.isfinite(self.item_vectors).all()):
            raise ValueError("embedding table contains non-finite values")

    @property
    def dim(self) -> int:
        return self.user_vectors.shape[1]

    def user(self, uid: int) -> np.ndarray:
        if not 0 <= uid < len(self.user_vectors):
            raise KeyError(f"no embedding for user {uid}")
        return self.user_vectors[uid]

    def item(self, iid: int) -> np.ndarray:
        if not 0 <= iid < len(self.item_vectors):
            raise KeyError(f"no embedding for item {iid}")
        return self.item_vectors[iid]


# ---------------------------------------------------------------------------
# k-core
# ---------------------------------------------------------------------------

def k_core_filter(graph: InteractionGraph, k: int) -> InteractionGraph:
    """Maximal subgraph where every remaining user and item has degree >= k.

    Ids in the result are compacted; ``result.user_ids[u]`` is the id of ``u``
    in ``graph``'s original id space.  No k-core gives an empty graph.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    udeg = [len(n) for n in graph.user_neighbors]
    ideg = [len(n) for n in graph.item_neighbors]
    u_alive = [True] * graph.num_users
    i_alive = [True] * graph.num_items
    queue: deque[tuple[str, int]] = deque()
    for u, d in enumerate(udeg):
        if d < k:
            u_alive[u] = False
            queue.append(("u", u))
    for i, d in enumerate(ideg):
        if d < k:
            i_alive[i] = False
            queue.append(("i", i))
    while queue:
        side, node = queue.popleft()
        if side == "u":
            for i in graph.user_neighbors[node]:
                if i_alive[i]:
                    ideg[i] -= 1
                    if ideg[i] < k:
                        i_alive[i] = False
                        queue.append(("i", i))
        else:
            for u in graph.item_neighbors[node]:
                if u_alive[u]:
                    udeg[u] -= 1
                    if udeg[u] < k:
                        u_alive[u] = False
                        queue.append(("u", u))

    keep_u = [u for u in range(graph.num_users) if u_alive[u]]
    keep_i = [i for i in range(graph.num_items) if i_alive[i]]
    unew = {u: n for n, u in enumerate(keep_u)}
    inew = {i: n for n, i in enumerate(keep_i)}
    edges = [(unew[u], inew[i]) for u, i in graph.edges if u in unew and i in inew]
    return InteractionGraph(
        len(keep_u), len(keep_i), edges,
        user_ids=graph.user_ids[keep_u] if keep_u else np.zeros(0, dtype=np.int64),
        item_ids=graph.item_ids[keep_i] if keep_i else np.zeros(0, dtype=np.int64),
    )


class KCoreFilter(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`k_core_filter`."""

    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, graph: InteractionGraph, y=None):
        if not isinstance(graph, InteractionGraph):
            raise TypeError("KCoreFilter expects an InteractionGraph")
        self.n_users_in_ = graph.num_users
        self.n_items_in_ = graph.num_items
        return self

    def transform(self, graph: InteractionGraph) -> InteractionGraph:
        check_is_fitted(self, "n_users_in_")
        return k_core_filter(graph, self.k)


# ---------------------------------------------------------------------------
# LightGCN
# ---------------------------------------------------------------------------

def _propagate_tensors(graph: InteractionGraph, users: nx.Tensor, items: nx.Tensor, num_layers: int,
                       adjacency: np.ndarray | None = None):
    adj_np = graph.normalized_adjacency() if adjacency is None else adjacency
    adj, adj_t = nx.constant(adj_np), nx.constant(adj_np.T)
    d = users.shape[1]
    u_iso = np.array([len(n) == 0 for n in graph.user_neighbors], dtype=np.float64)
    i_iso = np.array([len(n) == 0 for n in graph.item_neighbors], dtype=np.float64)
    u_keep = nx.constant(np.repeat(u_iso[:, None], d, axis=1)) if u_iso.any() else None
    i_keep = nx.constant(np.repeat(i_iso[:, None], d, axis=1)) if i_iso.any() else None

    u_cur, i_cur = users, items
    u_sum, i_sum = users, items
    for _ in range(num_layers):
        u_next = nx.matmul(adj, i_cur)
        i_next = nx.matmul(adj_t, u_cur)
        # isolated nodes carry their base vector through every layer
        if u_keep is not None:
            u_next = nx.add(u_next, nx.multiply(users, u_keep))
        if i_keep is not None:
            i_next = nx.add(i_next, nx.multiply(items, i_keep))
        u_cur, i_cur = u_next, i_next
        u_sum = nx.add(u_sum, u_cur)
        i_sum = nx.add(i_sum, i_cur)
    inv = 1.0 / (num_layers + 1)
    return nx.scale(u_sum, inv), nx.scale(i_sum, inv)


def lightgcn_propagate(graph: InteractionGraph, base: EmbeddingTable, num_layers: int) -> EmbeddingTable:
    """Mean over layers 0..L of symmetric-normalised neighbour aggregation."""
    if base.user_vectors.shape[0] != graph.num_users or base.item_vectors.shape[0] != graph.num_items:
        raise ValueError(
            f"embedding table {base.user_vectors.shape[0]}x{base.item_vectors.shape[0]} "
            f"does not match graph {graph.num_users}x{graph.num_items}"
        )
    with nx.no_tape():
        u, i = _propagate_tensors(graph, nx.constant(base.user_vectors), nx.constant(base.item_vectors), num_layers)
    return EmbeddingTable(u.data.copy(), i.data.copy())


def _row_dot(a: nx.Tensor, b: nx.Tensor) -> nx.Tensor:
    if a.data.ndim == 1:
        return nx.matmul(a, b)
    return nx.matmul(nx.multiply(a, b), nx.constant(np.ones(a.shape[-1])))


def bpr_loss(user, pos_item, neg_item, l2_lambda: float = 0.0, params_norm_sq=0.0) -> nx.Tensor:
    """-ln sigmoid(<u,pos> - <u,neg>) + l2_lambda * params_norm_sq.

    Accepts single vectors or row-aligned batches (the log term is averaged over
    rows).  ``params_norm_sq`` may be a float or a scalar tensor.
    """
    u, p, n = (x if isinstance(x, nx.Tensor) else nx.constant(x) for x in (user, pos_item, neg_item))
    if not (u.shape == p.shape == n.shape):
        raise nx.ShapeError(f"bpr_loss: shape mismatch {u.shape}, {p.shape}, {n.shape}")
    diff = nx.add(_row_dot(u, p), nx.scale(_row_dot(u, n), -1.0))
    rank = nx.scale(nx.mean(nx.log(nx.sigmoid(diff))), -1.0)
    if isinstance(params_norm_sq, nx.Tensor):
        return nx.add(rank, nx.scale(params_norm_sq, l2_lambda))
    if l2_lambda and params_norm_sq:
        return nx.add(rank, nx.constant(l2_lambda * float(params_norm_sq)))
    return rank


def sample_negatives(graph: InteractionGraph, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(len(users), dtype=np.int64)
    for j, u in enumerate(users):
        if graph.user_degree(u) >= graph.num_items:
            raise ValueError(f"user {u} interacted with every item; no negatives to sample")
        while True:
            cand = int(rng.integers(graph.num_items))
            if not graph.has_edge(int(u), cand):
                out[j] = cand
                break
    return out


def train_gnn(graph: InteractionGraph, config: GnnConfig) -> EmbeddingTable:
    """BPR-train base embeddings through LightGCN propagation (Adam, mini-batches)."""
    if graph.num_edges == 0:
        raise ValueError("cannot train on an empty graph")
    for u in range(graph.num_users):
        if graph.user_degree(u) >= graph.num_items:
            raise ValueError(f"user {u} interacted with every item; no negatives to sample")
    rng = np.random.default_rng(config.seed)
    d = config.embed_dim
    users = nx.parameter(rng.uniform(-0.1, 0.1, (graph.num_users, d)), name="user_base")
    items = nx.parameter(rng.uniform(-0.1, 0.1, (graph.num_items, d)), name="item_base")
    opt = nx.Adam([users, items], lr=config.learning_rate)
    adj = graph.normalized_adjacency()
    edges = np.array(graph.edges, dtype=np.int64)

    prev = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(edges))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = edges[order[start:start + config.batch_size]]
            bu = np.repeat(batch[:, 0], config.num_neg_samples)
            bp = np.repeat(batch[:, 1], config.num_neg_samples)
            bn = sample_negatives(graph, bu, rng)
            with nx.Tape() as tape:
                pu, pi = _propagate_tensors(graph, users, items, config.num_layers, adj)
                eu = nx.embedding(pu, bu)
                ep = nx.embedding(pi, bp)
                en = nx.embedding(pi, bn)
                reg = nx.scale(
                    nx.add(nx.add(nx.total(nx.multiply(nx.embedding(users, bu), nx.embedding(users, bu))),
                                  nx.total(nx.multiply(nx.embedding(items, bp), nx.embedding(items, bp)))),
                           nx.total(nx.multiply(nx.embedding(items, bn), nx.embedding(items, bn)))),
                    1.0 / len(bu))
                loss = bpr_loss(eu, ep, en, config.l2_lambda, reg)
            opt.zero_grad()
            nx.backward(loss, tape)
            opt.step()
            losses.append(loss.item())
        cur = float(np.mean(losses))
        if prev is not None and (prev - cur) / max(abs(prev), 1e-12) < config.plateau_tol:
            log.info("gnn plateau at epoch %d (loss %.5f)", epoch + 1, cur)
            break
        prev = cur

    base = EmbeddingTable(users.data, items.data)
    table = lightgcn_propagate(graph, base, config.num_layers)
    table.meta = {"num_layers": config.num_layers, "embed_dim": d, "seed": config.seed}
    return table


def ranking_auc(table: EmbeddingTable, positives, exclude: InteractionGraph | None = None) -> float:
    """AUC of held-out positive pairs against each user's non-interacted items."""
    pos_by_user: dict[int, set[int]] = {}
    for u, i in positives:
        pos_by_user.setdefault(int(u), set()).add(int(i))
    scores = table.user_vectors @ table.item_vectors.T
    hits = total = 0.0
    for u, pos in pos_by_user.items():
        seen = set(exclude.user_neighbors[u]) if exclude is not None else set()
        negs = [i for i in range(scores.shape[1]) if i not in pos and i not in seen]
        if not negs:
            continue
        neg_scores = np.sort(scores[u, negs])
        for i in pos:
            s = scores[u, i]
            hits += np.searchsorted(neg_scores, s, side="left")
            hits += 0.5 * (np.searchsorted(neg_scores, s, side="right") - np.searchsorted(neg_scores, s, side="left"))
            total += len(negs)
    return hits / total if total else float("nan")


class LightGCN(BaseEstimator):
    """Estimator facade: ``fit(graph)`` trains, ``transform`` returns the table."""

    def __init__(self, num_layers=2, embed_dim=32, learning_rate=1e-3, l2_lambda=1e-4,
                 num_neg_samples=1, epochs=400, batch_size=128, seed=0):
        self.num_layers = num_layers
        self.embed_dim = embed_dim
        self.learning_rate = learning_rate
        self.l2_lambda = l2_lambda
        self.num_neg_samples = num_neg_samples
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, graph: InteractionGraph, y=None):
        cfg = GnnConfig(**self.get_params())
        self.embeddings_ = train_gnn(graph, cfg)
        self.graph_ = graph
        return self

    def transform(self, graph=None) -> EmbeddingTable:
        check_is_fitted(self, "embeddings_")
        return self.embeddings_

    def fit_transform(self, graph, y=None):
        return self.fit(graph).embeddings_

    def predict(self, pairs) -> np.ndarray:
        check_is_fitted(self, "embeddings_")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        t = self.embeddings_
        return np.einsum("nd,nd->n", t.user_vectors[pairs[:, 0]], t.item_vectors[pairs[:, 1]])

    def score(self, positives, y=None) -> float:
        check_is_fitted(self, "embeddings_")
        return ranking_auc(self.embeddings_, positives, exclude=self.graph_)
