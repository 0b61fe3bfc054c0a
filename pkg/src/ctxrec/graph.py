"""Session-item bipartite multigraph and an inductive neighborhood encoder.

The graph has one session node per session with at least one train-visible
interaction, one item node per vocabulary item, and one edge per interaction
occurrence (repeats create parallel edges). The encoder is a two-layer mean
aggregator with L2-normalized layer outputs, trained unsupervised: each edge
(session, item) is pushed together against degree^0.75-sampled negative
items. Because every session node shares one base feature vector, an item's
first-layer neighbor mean equals that vector exactly, so only the session
side needs second-hop sampling.

Neighbor sampling (with replacement) is used only while training; every
embedding that feeds clustering or downstream features comes from the
deterministic full-neighborhood forward pass, so results are reproducible
and an unseen session built from the same item multiset embeds identically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import SplitCorpus, TEST
from .nn import engine
from .nn.engine import Parameter
from .nn.layers import DenseLayer
from .nn.optim import Adam, clip_global_norm


@dataclass
class BipartiteMultigraph:
    num_items: int
    session_ids: np.ndarray        # corpus session id per session node
    edges: np.ndarray              # (E, 2) rows (session_node, item_id)
    # CSR adjacency, one entry per edge occurrence
    session_adj: np.ndarray = field(init=False)
    session_off: np.ndarray = field(init=False)
    item_adj: np.ndarray = field(init=False)
    item_off: np.ndarray = field(init=False)
    node_of_session: dict[int, int] = field(init=False)

    def __post_init__(self):
        s = self.num_session_nodes
        self.node_of_session = {int(sid): k for k, sid in enumerate(self.session_ids)}
        s_counts = np.bincount(self.edges[:, 0], minlength=s) if len(self.edges) else np.zeros(s, dtype=int)
        i_counts = (np.bincount(self.edges[:, 1], minlength=self.num_items)
                    if len(self.edges) else np.zeros(self.num_items, dtype=int))
        self.session_off = np.concatenate([[0], np.cumsum(s_counts)]).astype(np.intp)
        self.item_off = np.concatenate([[0], np.cumsum(i_counts)]).astype(np.intp)
        order_s = np.argsort(self.edges[:, 0], kind="stable") if len(self.edges) else np.array([], dtype=np.intp)
        order_i = np.argsort(self.edges[:, 1], kind="stable") if len(self.edges) else np.array([], dtype=np.intp)
        self.session_adj = self.edges[order_s, 1].astype(np.intp) if len(self.edges) else np.array([], dtype=np.intp)
        self.item_adj = self.edges[order_i, 0].astype(np.intp) if len(self.edges) else np.array([], dtype=np.intp)

    @property
    def num_session_nodes(self) -> int:
        return len(self.session_ids)

    @property
    def num_nodes(self) -> int:
        return self.num_session_nodes + self.num_items

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def session_items(self, node: int) -> np.ndarray:
        """Item neighbor multiset of a session node."""
        return self.session_adj[self.session_off[node]:self.session_off[node + 1]]

    def item_sessions(self, item: int) -> np.ndarray:
        return self.item_adj[self.item_off[item]:self.item_off[item + 1]]

    def item_degree(self, item: int) -> int:
        return int(self.item_off[item + 1] - self.item_off[item])

    def session_degree(self, node: int) -> int:
        return int(self.session_off[node + 1] - self.session_off[node])


def build_graph(item_lists: list[list[int]], num_items: int,
                session_ids: list[int] | None = None) -> BipartiteMultigraph:
    """Build the multigraph from per-session item lists.

    Sessions with empty lists are dropped; every vocabulary item gets a node
    whether or not it appears. One edge per occurrence, so a session that
    repeats an item contributes parallel edges.
    """
    if session_ids is None:
        session_ids = list(range(len(item_lists)))
    kept_ids = []
    edge_rows = []
    for sid, items in zip(session_ids, item_lists):
        if not items:
            continue
        node = len(kept_ids)
        kept_ids.append(sid)
        for item in items:
            if not 0 <= item < num_items:
                raise ValueError(f"item id {item} out of range [0, {num_items})")
            edge_rows.append((node, item))
    edges = (np.asarray(edge_rows, dtype=np.intp) if edge_rows
             else np.zeros((0, 2), dtype=np.intp))
    return BipartiteMultigraph(num_items=num_items,
                               session_ids=np.asarray(kept_ids, dtype=np.intp),
                               edges=edges)


def build_graph_from_corpus(corpus: SplitCorpus) -> BipartiteMultigraph:
    """Graph over train+val interactions only; test targets never become edges."""
    item_lists: list[list[int]] = []
    sids: list[int] = []
    for s in corpus.sessions:
        items = [corpus.interactions[k].item_id
                 for k in corpus.interaction_range(s.session_id)
                 if corpus.splits[k] != TEST]
        if items:
            sids.append(s.session_id)
            item_lists.append(items)
    return build_graph(item_lists, corpus.num_items, sids)


def _sample_neighbors(adj: np.ndarray, off: np.ndarray, nodes: np.ndarray,
                      fanout: int, rng: np.random.Generator) -> np.ndarray:
    """(len(nodes), fanout) neighbor draw with replacement; degrees must be > 0."""
    deg = off[nodes + 1] - off[nodes]
    r = rng.random((len(nodes), fanout))
    idx = off[nodes, None] + np.floor(r * deg[:, None]).astype(np.intp)
    return adj[idx]


class SageEncoder:
    """Two-layer mean-aggregation encoder over the bipartite multigraph."""

    def __init__(self, num_items: int, base_dim: int = 64, out_dim: int = 64,
                 fanout: tuple[int, int] = (10, 10),
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.num_items = num_items
        self.base_dim = base_dim
        self.out_dim = out_dim
        self.fanout = fanout
        self.item_feat = Parameter("graph.item_feat",
                                   rng.normal(0.0, 0.1, size=(num_items, base_dim)))
        self.session_feat = Parameter("graph.session_feat",
                                      rng.normal(0.0, 0.1, size=base_dim))
        self.layer1 = DenseLayer("graph.layer1", 2 * base_dim, out_dim, rng)
        self.layer2 = DenseLayer("graph.layer2", 2 * out_dim, out_dim, rng)

    def params(self) -> list[Parameter]:
        return ([self.item_feat, self.session_feat]
                + self.layer1.params() + self.layer2.params())

    # -- deterministic full-neighborhood forward (plain numpy) ---------------

    def _phi1(self, self_feat: np.ndarray, neigh_mean: np.ndarray) -> np.ndarray:
        x = np.concatenate([self_feat, neigh_mean], axis=-1)
        h = x @ self.layer1.weight.value.T + self.layer1.bias.value
        h = np.maximum(h, 0.0)
        return _l2n(h)

    def _phi2_raw(self, h1_self: np.ndarray, h1_neigh_mean: np.ndarray) -> np.ndarray:
        x = np.concatenate([h1_self, h1_neigh_mean], axis=-1)
        return x @ self.layer2.weight.value.T + self.layer2.bias.value

    def _phi2(self, h1_self: np.ndarray, h1_neigh_mean: np.ndarray) -> np.ndarray:
        return _l2n(self._phi2_raw(h1_self, h1_neigh_mean))

    def _item_h1(self) -> np.ndarray:
        # every session node shares one base feature, so the neighbor mean of
        # any item is exactly that vector
        tiles = np.broadcast_to(self.session_feat.value,
                                (self.num_items, self.base_dim))
        return self._phi1(self.item_feat.value, tiles)

    def _embed_from_items(self, items: np.ndarray, item_h1: np.ndarray) -> np.ndarray:
        # canonical (sorted) aggregation order so identical multisets embed
        # bitwise identically regardless of how the caller ordered them
        items = np.sort(np.asarray(items, dtype=np.intp))
        feat_mean = self.item_feat.value[items].mean(axis=0)
        h1_self = self._phi1(self.session_feat.value, feat_mean)
        h1_neigh = item_h1[items].mean(axis=0)
        return self._phi2(h1_self, h1_neigh)

    def embed_session(self, graph: BipartiteMultigraph, session_id: int) -> np.ndarray:
        """Deterministic full-neighborhood embedding of a training session."""
        if session_id not in graph.node_of_session:
            raise ValueError(f"session {session_id} has no node in the graph")
        node = graph.node_of_session[session_id]
        items = graph.session_items(node)
        if len(items) == 0:
            raise ValueError(f"session {session_id} is isolated")
        return self._embed_from_items(items, self._item_h1())

    def embed_new_session(self, graph: BipartiteMultigraph,
                          items: list[int]) -> np.ndarray:
        """Inductive embedding for an unseen item list; the graph is unchanged.

        Items outside the training vocabulary (unknown id or degree zero) are
        dropped with a warning; an empty or fully-unseen list is an error.
        """
        if len(items) == 0:
            raise ValueError("cannot embed an empty item list")
        known = [i for i in items
                 if 0 <= i < graph.num_items and graph.item_degree(i) > 0]
        if len(known) < len(items):
            warnings.warn(f"dropping {len(items) - len(known)} item(s) outside "
                          "the training vocabulary")
        if not known:
            raise ValueError("all items are outside the training vocabulary")
        return self._embed_from_items(np.asarray(known, dtype=np.intp),
                                      self._item_h1())

    def embed_all_sessions(self, graph: BipartiteMultigraph) -> np.ndarray:
        """(num_session_nodes, out_dim) deterministic embeddings.

        Uses the same per-session aggregation path as embed_session so stored
        matrices match single-session calls bit for bit.
        """
        item_h1 = self._item_h1()
        out = np.empty((graph.num_session_nodes, self.out_dim))
        for node in range(graph.num_session_nodes):
            out[node] = self._embed_from_items(graph.session_items(node), item_h1)
        return out

    # -- sampled forward for training (autodiff graph) -----------------------

    def _session_z(self, graph: BipartiteMultigraph, nodes: np.ndarray,
                   rng: np.random.Generator) -> engine.Var:
        """Sampled session embeddings, pre-normalization (training loss side)."""
        f1, f2 = self.fanout
        own = _sample_neighbors(graph.session_adj, graph.session_off, nodes, f2, rng)
        own_mean = engine.mean_axis(engine.lookup(self.item_feat, own), 1)
        self_feat = engine.broadcast_param(self.session_feat, (len(nodes),))
        h1_self = self._phi1_var(engine.concat([self_feat, own_mean]))

        hop = _sample_neighbors(graph.session_adj, graph.session_off, nodes, f1, rng)
        hop_feat = engine.lookup(self.item_feat, hop)      # (N, f1, b)
        hop_tile = engine.broadcast_param(self.session_feat, hop.shape)
        h1_items = self._phi1_var(engine.concat([hop_feat, hop_tile]))
        return self._phi2_raw_var(h1_self, engine.mean_axis(h1_items, 1))

    def _item_z(self, graph: BipartiteMultigraph, items: np.ndarray,
                rng: np.random.Generator) -> engine.Var:
        f1, f2 = self.fanout
        self_feat = engine.lookup(self.item_feat, items)
        tiles = engine.broadcast_param(self.session_feat, (len(items),))
        h1_self = self._phi1_var(engine.concat([self_feat, tiles]))

        sess = _sample_neighbors(graph.item_adj, graph.item_off, items, f1, rng)
        sess_items = _sample_neighbors(graph.session_adj, graph.session_off,
                                       sess.reshape(-1), f2, rng).reshape(len(items), f1, f2)
        neigh_mean = engine.mean_axis(engine.lookup(self.item_feat, sess_items), 2)
        sess_tile = engine.broadcast_param(self.session_feat, sess.shape)
        h1_sess = self._phi1_var(engine.concat([sess_tile, neigh_mean]))
        return self._phi2_raw_var(h1_self, engine.mean_axis(h1_sess, 1))

    def _phi1_var(self, x: engine.Var) -> engine.Var:
        return engine.l2_normalize_rows(engine.relu(self.layer1(x)))

    def _phi2_raw_var(self, h1_self: engine.Var, h1_neigh: engine.Var) -> engine.Var:
        # the edge loss sees the unnormalized second-layer output: normalizing
        # first caps the logit at +-1 and the loss saturates before the item
        # features spread; every exported embedding is still L2-normalized
        return self.layer2(engine.concat([h1_self, h1_neigh]))


def _l2n(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    return x / norms


def _edge_loss_det(encoder: SageEncoder, graph: BipartiteMultigraph,
                   edges: np.ndarray, negatives: np.ndarray) -> float:
    """Holdout loss under deterministic full neighborhoods, fixed negatives.

    Computed on the same pre-normalization outputs the training loss sees.
    """
    item_h1 = encoder._item_h1()
    n = graph.num_session_nodes
    feat_sum = np.zeros((n, encoder.base_dim))
    h1_sum = np.zeros((n, encoder.out_dim))
    np.add.at(feat_sum, graph.edges[:, 0], encoder.item_feat.value[graph.edges[:, 1]])
    np.add.at(h1_sum, graph.edges[:, 0], item_h1[graph.edges[:, 1]])
    deg_s = np.maximum((graph.session_off[1:] - graph.session_off[:-1]), 1)[:, None]
    h1_sess = encoder._phi1(
        np.broadcast_to(encoder.session_feat.value, (n, encoder.base_dim)),
        feat_sum / deg_s)
    z_s_all = encoder._phi2_raw(h1_sess, h1_sum / deg_s)
    # item-side second layer: neighbor sessions' full h1
    h1_sess_sum = np.zeros((graph.num_items, encoder.out_dim))
    np.add.at(h1_sess_sum, graph.edges[:, 1], h1_sess[graph.edges[:, 0]])
    deg_i = np.maximum((graph.item_off[1:] - graph.item_off[:-1]), 1)[:, None]
    z_i_all = encoder._phi2_raw(item_h1, h1_sess_sum / deg_i)

    z_s = z_s_all[edges[:, 0]]
    pos = (z_s * z_i_all[edges[:, 1]]).sum(axis=1)
    neg = (z_s[:, None, :] * z_i_all[negatives]).sum(axis=2)
    loss = -(np.log(engine.stable_sigmoid(pos) + 1e-300).sum()
             + np.log(engine.stable_sigmoid(-neg) + 1e-300).sum())
    return float(loss / len(edges))


def negative_sampling_weights(graph: BipartiteMultigraph, power: float = 0.75) -> np.ndarray:
    deg = (graph.item_off[1:] - graph.item_off[:-1]).astype(np.float64)
    w = deg ** power
    total = w.sum()
    if total <= 0:
        raise ValueError("graph has no edges to sample negatives from")
    return w / total


def train_encoder(graph: BipartiteMultigraph, base_dim: int = 64,
                  out_dim: int = 64, epochs: int = 10, batch_size: int = 512,
                  fanout: tuple[int, int] = (10, 10), num_negatives: int = 5,
                  lr: float = 0.001, clip_norm: float = 5.0,
                  holdout_frac: float = 0.05,
                  seed: int = 0) -> tuple[SageEncoder, dict]:
    """Unsupervised encoder training; returns the encoder and loss history.

    history["holdout_loss"][0] is the pre-training loss on the held-out 5%
    edge sample (or on all edges when the graph is too small to hold any out).
    """
    if graph.num_edges == 0:
        raise ValueError("cannot train on a graph with zero edges")
    rng = np.random.default_rng(seed)
    encoder = SageEncoder(graph.num_items, base_dim, out_dim, fanout, rng)
    weights = negative_sampling_weights(graph)

    n_hold = int(round(holdout_frac * graph.num_edges))
    if graph.num_edges - n_hold < 1:
        n_hold = 0
    perm = rng.permutation(graph.num_edges)
    hold_idx = perm[:n_hold]
    train_idx = perm[n_hold:]
    hold_edges = graph.edges[hold_idx] if n_hold else graph.edges
    hold_negs = rng.choice(graph.num_items, size=(len(hold_edges), num_negatives),
                           p=weights)

    opt = Adam(encoder.params(), lr=lr)
    history = {"holdout_loss": [_edge_loss_det(encoder, graph, hold_edges, hold_negs)],
               "train_loss": []}
    for _ in range(epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = graph.edges[train_idx[order[start:start + batch_size]]]
            negs = rng.choice(graph.num_items,
                              size=(len(batch), num_negatives), p=weights)
            uniq_s, inv_s = np.unique(batch[:, 0], return_inverse=True)
            all_items = np.concatenate([batch[:, 1], negs.reshape(-1)])
            uniq_i, inv_i = np.unique(all_items, return_inverse=True)

            opt.zero_grad()
            z_s = encoder._session_z(graph, uniq_s, rng)
            z_i = encoder._item_z(graph, uniq_i, rng)
            b = len(batch)
            z_s_pos = engine.index_rows(z_s, inv_s)
            z_pos = engine.index_rows(z_i, inv_i[:b])
            pos_term = engine.vsum(engine.logsigmoid(engine.dot_last(z_s_pos, z_pos)))
            z_s_rep = engine.index_rows(z_s, np.repeat(inv_s, num_negatives))
            z_neg = engine.index_rows(z_i, inv_i[b:])
            neg_score = engine.scale(engine.dot_last(z_s_rep, z_neg), -1.0)
            neg_term = engine.vsum(engine.logsigmoid(neg_score))
            loss = engine.scale(engine.add(pos_term, neg_term), -1.0 / b)
            if not np.isfinite(loss.value):
                raise FloatingPointError("non-finite graph training loss")
            engine.backward(loss)
            clip_global_norm(encoder.params(), clip_norm)
            opt.step()
            epoch_loss += float(loss.value) * b
        history["train_loss"].append(epoch_loss / max(len(train_idx), 1))
        history["holdout_loss"].append(_edge_loss_det(encoder, graph, hold_edges, hold_negs))
    return encoder, history


def export_embeddings_csv(path, corpus: SplitCorpus, embeddings: np.ndarray) -> None:
    """CSV with header session_id,split,c0..c{d-1} covering every session."""
    dim = embeddings.shape[1]
    with open(path, "w") as fh:
        fh.write("session_id,split," + ",".join(f"c{k}" for k in range(dim)) + "\n")
        for s in corpus.sessions:
            row = ",".join(repr(v) for v in embeddings[s.session_id])
            fh.write(f"{s.session_id},{corpus.session_split(s.session_id)},{row}\n")
