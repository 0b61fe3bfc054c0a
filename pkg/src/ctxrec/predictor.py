"""Real-time session-context prediction.

The predictor combines three signals: a long-horizon encoding of the user's
previous sessions' feature vectors, a short-horizon encoding of the items
observed so far in the current session, and a learnable per-user embedding.
A fully connected head maps their concatenation to context logits. The
prediction is recomputed from scratch for every new observed item; an empty
prefix is encoded through the short-horizon LSTM as a single learnable
auxiliary vector shared by all sessions.

Training builds one example per observed-prefix position of every training
interaction, labeled with the session's clustered context id, and early-stops
on validation cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SplitCorpus, TRAIN, VAL
from .cluster import UNLABELED
from .nn import engine
from .nn.engine import Parameter, Var
from .nn.layers import BiLstm, DenseLayer, EmbeddingTable
from .nn.optim import Adam, clip_global_norm, restore, snapshot

FEATURE_EXTRAS = 3  # duration, idle gap, item count


@dataclass
class SessionFeatureStore:
    """Per-session feature vectors: embedding + normalized metadata.

    Duration and idle gap are log1p'd then z-scored with statistics from the
    train split only; item count is log1p'd. A session with no next session
    gets 0 in the gap slot (such sessions never appear as history anyway).
    """

    matrix: np.ndarray  # (num_sessions, emb_dim + 3)
    duration_stats: tuple[float, float]
    gap_stats: tuple[float, float]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_session_features(corpus: SplitCorpus,
                           embeddings: np.ndarray) -> SessionFeatureStore:
    n = corpus.num_sessions
    durations = np.array([s.duration for s in corpus.sessions], dtype=np.float64)
    gaps = np.array([np.nan if s.gap_to_next is None else s.gap_to_next
                     for s in corpus.sessions], dtype=np.float64)
    lengths = np.array([s.length for s in corpus.sessions], dtype=np.float64)

    train_mask = np.array([corpus.session_split(s.session_id) == TRAIN
                           for s in corpus.sessions])
    d_log = np.log1p(durations)
    g_log = np.log1p(gaps)

    def stats(values: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
        sel = values[mask & np.isfinite(values)]
        if sel.size == 0:
            return 0.0, 1.0
        std = float(sel.std())
        return float(sel.mean()), (std if std > 1e-12 else 1.0)

    d_mu, d_sd = stats(d_log, train_mask)
    g_mu, g_sd = stats(g_log, train_mask)

    matrix = np.zeros((n, embeddings.shape[1] + FEATURE_EXTRAS))
    matrix[:, :embeddings.shape[1]] = embeddings
    matrix[:, -3] = (d_log - d_mu) / d_sd
    g_norm = np.where(np.isfinite(g_log), (g_log - g_mu) / g_sd, 0.0)
    matrix[:, -2] = g_norm
    matrix[:, -1] = np.log1p(lengths)
    return SessionFeatureStore(matrix, (d_mu, d_sd), (g_mu, g_sd))


def long_term_input(corpus: SplitCorpus, features: SessionFeatureStore,
                    user_id: int, session_id: int, max_len: int = 50) -> np.ndarray:
    """The user's up-to-``max_len`` session feature vectors preceding
    ``session_id``, oldest first; a lone all-zero row for a first session."""
    if not 0 <= user_id < corpus.num_users:
        raise ValueError(f"unknown user {user_id}")
    sids = corpus.user_session_ids(user_id)
    pos = sids.index(session_id)
    history = sids[max(0, pos - max_len):pos]
    if not history:
        return np.zeros((1, features.dim))
    return features.matrix[history]


def top_k_contexts(probs: np.ndarray, k: int = 3) -> list[int]:
    """Ids of the k most probable contexts, returned ascending by id.

    Probability ties break toward the lower id.
    """
    probs = np.asarray(probs)
    n = probs.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} contexts")
    order = np.lexsort((np.arange(n), -probs))
    return sorted(int(i) for i in order[:k])


class ContextPredictor:
    def __init__(self, num_users: int, num_items: int, num_contexts: int,
                 feat_dim: int, user_dim: int = 256, item_dim: int = 256,
                 hidden: int = 128, max_seq_len: int = 50,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.num_users = num_users
        self.num_items = num_items
        self.num_contexts = num_contexts
        self.max_seq_len = max_seq_len
        self.user_emb = EmbeddingTable("ctx.user_emb", num_users, user_dim, rng)
        self.item_emb = EmbeddingTable("ctx.item_emb", num_items, item_dim, rng)
        self.short_lstm = BiLstm("ctx.short", item_dim, hidden, rng)
        self.long_lstm = BiLstm("ctx.long", feat_dim, hidden, rng)
        self.fc1 = DenseLayer(
            "ctx.fc1",
            user_dim + self.short_lstm.output_dim + self.long_lstm.output_dim,
            num_contexts, rng)
        self.aux = Parameter("ctx.aux", rng.normal(0.0, 0.1, size=item_dim))

    def params(self) -> list[Parameter]:
        return (self.user_emb.params() + self.item_emb.params()
                + self.short_lstm.params() + self.long_lstm.params()
                + self.fc1.params() + [self.aux])

    def encode_history(self, history: np.ndarray) -> Var:
        return self.long_lstm.forward(engine.constant(history))

    def _short_input(self, prefix_items) -> Var:
        prefix = list(prefix_items)[-self.max_seq_len:]
        if not prefix:
            return engine.as_row_matrix(self.aux)
        return self.item_emb.lookup(np.asarray(prefix, dtype=np.intp))

    def logits_var(self, user_id: int, prefix_items, z_long: Var) -> Var:
        e_user = self.user_emb.row(user_id)
        z_short = self.short_lstm.forward(self._short_input(prefix_items))
        return self.fc1(engine.concat([e_user, z_short, z_long]))

    def predict_probs(self, user_id: int, prefix_items,
                      history: np.ndarray) -> np.ndarray:
        """Context probability vector for the current prefix; sums to 1."""
        z_long = self.encode_history(history)
        return engine.softmax(self.logits_var(user_id, prefix_items, z_long).value)


@dataclass(frozen=True)
class ContextExample:
    interaction_idx: int
    user_id: int
    session_id: int
    position: int  # prefix length
    label: int


def build_context_examples(corpus: SplitCorpus, labels: np.ndarray,
                           split_tag: str) -> list[ContextExample]:
    """One example per ``split_tag`` interaction: its in-session prefix,
    labeled with the session's context. Unlabeled sessions are skipped."""
    out = []
    for k, it in enumerate(corpus.interactions):
        if corpus.splits[k] != split_tag:
            continue
        sid = corpus.session_of[k]
        if labels[sid] == UNLABELED:
            continue
        out.append(ContextExample(k, it.user_id, sid, corpus.position_of[k],
                                  int(labels[sid])))
    return out


def _group_by_session(examples: list[ContextExample]) -> list[list[ContextExample]]:
    groups: dict[int, list[ContextExample]] = {}
    for ex in examples:
        groups.setdefault(ex.session_id, []).append(ex)
    return [groups[sid] for sid in sorted(groups)]


def train_context(model: ContextPredictor, corpus: SplitCorpus,
                  features: SessionFeatureStore, labels: np.ndarray,
                  rng: np.random.Generator, lr: float = 0.001,
                  batch_size: int = 1024, max_epochs: int = 200,
                  patience: int = 10, clip_norm: float = 5.0,
                  max_seq_len: int = 50) -> dict:
    """Cross-entropy training over per-prefix examples, Adam, early stopping
    on validation loss. Examples sharing a session share one history encoding
    per batch, so its BPTT runs once for the whole prefix family."""
    train_groups = _group_by_session(build_context_examples(corpus, labels, TRAIN))
    val_examples = build_context_examples(corpus, labels, VAL)
    if not train_groups:
        raise ValueError("no training examples")

    histories = {g[0].session_id: long_term_input(
        corpus, features, g[0].user_id, g[0].session_id, max_seq_len)
        for g in train_groups}
    prefixes = {s.session_id: s.items for s in corpus.sessions}

    opt = Adam(model.params(), lr=lr)
    history = {"train_loss": [], "val_loss": [], "best_epoch": -1}
    best_loss = np.inf
    best_params = snapshot(model.params())
    bad_epochs = 0

    def batch_iter(order):
        batch: list[list[ContextExample]] = []
        count = 0
        for gi in order:
            batch.append(train_groups[gi])
            count += len(train_groups[gi])
            if count >= batch_size:
                yield batch
                batch, count = [], 0
        if batch:
            yield batch

    for epoch in range(max_epochs):
        order = rng.permutation(len(train_groups))
        epoch_loss = 0.0
        n_seen = 0
        for batch in batch_iter(order):
            n = sum(len(g) for g in batch)
            losses = []
            for group in batch:
                sid = group[0].session_id
                z_long = model.encode_history(histories[sid])
                for ex in group:
                    logits = model.logits_var(ex.user_id,
                                              prefixes[sid][:ex.position], z_long)
                    loss, _ = engine.softmax_cross_entropy(logits, ex.label)
                    losses.append(loss)
            total = engine.add_n(losses, [1.0 / n] * len(losses))
            if not np.isfinite(total.value):
                raise FloatingPointError("non-finite context training loss")
            opt.zero_grad()
            engine.backward(total)
            clip_global_norm(model.params(), clip_norm)
            opt.step()
            epoch_loss += float(total.value) * n
            n_seen += n
        history["train_loss"].append(epoch_loss / n_seen)

        # no validation data (degenerate corpora): early-stop on train loss
        val_loss = (evaluate_context_loss(model, corpus, features, val_examples,
                                          max_seq_len)
                    if val_examples else history["train_loss"][-1])
        history["val_loss"].append(val_loss)
        if val_loss < best_loss - 1e-12:
            best_loss = val_loss
            best_params = snapshot(model.params())
            history["best_epoch"] = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                break
    restore(model.params(), best_params)
    return history


def evaluate_context_loss(model: ContextPredictor, corpus: SplitCorpus,
                          features: SessionFeatureStore,
                          examples: list[ContextExample],
                          max_seq_len: int = 50) -> float:
    if not examples:
        return float("nan")
    total = 0.0
    for group in _group_by_session(examples):
        sid = group[0].session_id
        hist = long_term_input(corpus, features, group[0].user_id, sid, max_seq_len)
        z_long = model.encode_history(hist)
        items = corpus.sessions[sid].items
        for ex in group:
            logits = model.logits_var(ex.user_id, items[:ex.position], z_long)
            probs = engine.softmax(logits.value)
            total += engine.cross_entropy(probs, ex.label)
    return total / len(examples)


def predict_all_prefixes(model: ContextPredictor, corpus: SplitCorpus,
                         features: SessionFeatureStore, k: int,
                         max_seq_len: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Top-k context ids (ascending) and their probabilities for the prefix
    preceding every interaction in the corpus."""
    n = len(corpus.interactions)
    topk_ids = np.zeros((n, k), dtype=np.intp)
    topk_probs = np.zeros((n, k))
    for s in corpus.sessions:
        hist = long_term_input(corpus, features, s.user_id, s.session_id,
                               max_seq_len)
        z_long = model.encode_history(hist)
        for idx in corpus.interaction_range(s.session_id):
            pos = corpus.position_of[idx]
            logits = model.logits_var(s.user_id, s.items[:pos], z_long)
            probs = engine.softmax(logits.value)
            ids = top_k_contexts(probs, k)
            topk_ids[idx] = ids
            topk_probs[idx] = probs[ids]
    return topk_ids, topk_probs


def export_predictions_csv(path, corpus: SplitCorpus, topk_ids: np.ndarray,
                           topk_probs: np.ndarray) -> None:
    """CSV (session_id, prefix_len, top-k ids, top-k probabilities)."""
    k = topk_ids.shape[1]
    header = (["session_id", "prefix_len"]
              + [f"context_{j}" for j in range(k)]
              + [f"prob_{j}" for j in range(k)])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for idx in range(len(corpus.interactions)):
            row = ([str(corpus.session_of[idx]), str(corpus.position_of[idx])]
                   + [str(int(c)) for c in topk_ids[idx]]
                   + [repr(float(p)) for p in topk_probs[idx]])
            fh.write(",".join(row) + "\n")
