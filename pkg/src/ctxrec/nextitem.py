"""Context-conditioned next-item prediction, with an ablation variant.

The scorer concatenates three blocks: the embeddings of the top-K predicted
contexts for the current prefix (in ascending context-id order), an item-level
encoding of the observed prefix, and the user embedding. The ablation mode
drops the context block entirely, isolating the contribution of implicit
contexts; its output is literally independent of whatever context ids are
supplied. No parameter is shared with the context predictor: the two models
are trained separately and communicate only through predicted context ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SplitCorpus, TRAIN, VAL, TEST
from .metrics import mrr, rank_of_truth
from .nn import engine
from .nn.engine import Parameter, Var
from .nn.layers import BiLstm, DenseLayer, EmbeddingTable
from .nn.optim import Adam, clip_global_norm, restore, snapshot

WITH_CONTEXT = "with_context"
ABLATION = "ablation"


class NextItemModel:
    def __init__(self, num_users: int, num_items: int, num_contexts: int,
                 user_dim: int = 256, item_dim: int = 256, context_dim: int = 32,
                 hidden: int = 128, top_k: int = 3, max_seq_len: int = 50,
                 mode: str = WITH_CONTEXT,
                 rng: np.random.Generator | None = None):
        if mode not in (WITH_CONTEXT, ABLATION):
            raise ValueError(f"unknown mode {mode!r}")
        rng = rng or np.random.default_rng(0)
        self.num_users = num_users
        self.num_items = num_items
        self.num_contexts = num_contexts
        self.top_k = top_k
        self.max_seq_len = max_seq_len
        self.mode = mode
        self.user_emb = EmbeddingTable("next.user_emb", num_users, user_dim, rng)
        self.item_emb = EmbeddingTable("next.item_emb", num_items, item_dim, rng)
        self.context_emb = EmbeddingTable("next.context_emb", num_contexts,
                                          context_dim, rng)
        self.item_lstm = BiLstm("next.item_lstm", item_dim, hidden, rng)
        block = top_k * context_dim if mode == WITH_CONTEXT else 0
        self.fc2 = DenseLayer("next.fc2",
                              block + self.item_lstm.output_dim + user_dim,
                              num_items, rng)
        self.aux = Parameter("next.aux", rng.normal(0.0, 0.1, size=item_dim))

    def params(self) -> list[Parameter]:
        ps = (self.user_emb.params() + self.item_emb.params()
              + self.item_lstm.params() + self.fc2.params() + [self.aux])
        if self.mode == WITH_CONTEXT:
            ps = self.context_emb.params() + ps
        return ps

    def context_block(self, context_ids) -> Var:
        """Concatenation of the top-K context embedding rows, id-ascending."""
        ids = np.asarray(context_ids, dtype=np.intp)
        if ids.shape != (self.top_k,):
            raise ValueError(f"expected {self.top_k} context ids, got {ids.shape}")
        if (np.diff(ids) <= 0).any():
            raise ValueError(f"context ids must be strictly ascending: {ids.tolist()}")
        if ids.min() < 0 or ids.max() >= self.num_contexts:
            raise ValueError(f"context id out of range [0, {self.num_contexts})")
        return engine.flatten(self.context_emb.lookup(ids))

    def _item_input(self, prefix_items) -> Var:
        prefix = list(prefix_items)[-self.max_seq_len:]
        if not prefix:
            return engine.as_row_matrix(self.aux)
        return self.item_emb.lookup(np.asarray(prefix, dtype=np.intp))

    def logits_var(self, user_id: int, prefix_items, context_ids) -> Var:
        e_user = self.user_emb.row(user_id)
        z_item = self.item_lstm.forward(self._item_input(prefix_items))
        if self.mode == ABLATION:
            return self.fc2(engine.concat([z_item, e_user]))
        return self.fc2(engine.concat([self.context_block(context_ids),
                                       z_item, e_user]))

    def predict_probs(self, user_id: int, prefix_items, context_ids) -> np.ndarray:
        """Next-item probability vector over all items; sums to 1."""
        return engine.softmax(self.logits_var(user_id, prefix_items,
                                              context_ids).value)


@dataclass(frozen=True)
class RankExample:
    interaction_idx: int
    user_id: int
    session_id: int
    position: int
    target_item: int


def build_rank_examples(corpus: SplitCorpus, split_tag: str) -> list[RankExample]:
    """One example per interaction of the split: predict it from its in-session
    prefix (which may be empty, and may include earlier interactions of any
    split that happen to share the session)."""
    return [RankExample(k, it.user_id, corpus.session_of[k],
                        corpus.position_of[k], it.item_id)
            for k, it in enumerate(corpus.interactions)
            if corpus.splits[k] == split_tag]


def _contexts_for(model: NextItemModel, ctx_topk: np.ndarray | None, idx: int):
    if model.mode == ABLATION:
        return None
    if ctx_topk is None:
        raise ValueError("with-context mode needs per-prefix context predictions")
    return ctx_topk[idx]


def compute_ranks(model: NextItemModel, corpus: SplitCorpus,
                  examples: list[RankExample],
                  ctx_topk: np.ndarray | None) -> np.ndarray:
    ranks = np.empty(len(examples), dtype=np.int64)
    prefixes = {s.session_id: s.items for s in corpus.sessions}
    for j, ex in enumerate(examples):
        probs = model.predict_probs(ex.user_id,
                                    prefixes[ex.session_id][:ex.position],
                                    _contexts_for(model, ctx_topk, ex.interaction_idx))
        ranks[j] = rank_of_truth(probs, ex.target_item)
    return ranks


def train_next(model: NextItemModel, corpus: SplitCorpus,
               ctx_topk: np.ndarray | None, rng: np.random.Generator,
               lr: float = 0.001, batch_size: int = 1024,
               max_epochs: int = 200, patience: int = 10,
               clip_norm: float = 5.0) -> dict:
    """Cross-entropy training over every train interaction, Adam, early
    stopping on validation MRR (higher is better)."""
    train_examples = build_rank_examples(corpus, TRAIN)
    val_examples = build_rank_examples(corpus, VAL)
    if not train_examples:
        raise ValueError("no training examples")
    prefixes = {s.session_id: s.items for s in corpus.sessions}

    opt = Adam(model.params(), lr=lr)
    history = {"train_loss": [], "val_mrr": [], "best_epoch": -1}
    best_mrr = -np.inf
    best_params = snapshot(model.params())
    bad_epochs = 0

    for epoch in range(max_epochs):
        order = rng.permutation(len(train_examples))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = [train_examples[j] for j in order[start:start + batch_size]]
            losses = []
            for ex in batch:
                logits = model.logits_var(
                    ex.user_id, prefixes[ex.session_id][:ex.position],
                    _contexts_for(model, ctx_topk, ex.interaction_idx))
                loss, _ = engine.softmax_cross_entropy(logits, ex.target_item)
                losses.append(loss)
            total = engine.add_n(losses, [1.0 / len(batch)] * len(batch))
            if not np.isfinite(total.value):
                raise FloatingPointError("non-finite next-item training loss")
            opt.zero_grad()
            engine.backward(total)
            clip_global_norm(model.params(), clip_norm)
            opt.step()
            epoch_loss += float(total.value) * len(batch)
        history["train_loss"].append(epoch_loss / len(train_examples))

        if val_examples:
            val_mrr = mrr(compute_ranks(model, corpus, val_examples, ctx_topk))
        else:
            val_mrr = -history["train_loss"][-1]
        history["val_mrr"].append(val_mrr)
        if val_mrr > best_mrr + 1e-12:
            best_mrr = val_mrr
            best_params = snapshot(model.params())
            history["best_epoch"] = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                break
    restore(model.params(), best_params)
    return history


def export_ranked_lists(path, model: NextItemModel, corpus: SplitCorpus,
                        ctx_topk: np.ndarray | None, top_n: int = 20) -> None:
    """Line-JSON dump: per test interaction, the top-N item ids and scores."""
    import json

    examples = build_rank_examples(corpus, TEST)
    prefixes = {s.session_id: s.items for s in corpus.sessions}
    with open(path, "w") as fh:
        for ex in examples:
            probs = model.predict_probs(
                ex.user_id, prefixes[ex.session_id][:ex.position],
                _contexts_for(model, ctx_topk, ex.interaction_idx))
            order = np.lexsort((np.arange(len(probs)), -probs))[:top_n]
            fh.write(json.dumps({
                "interaction_idx": ex.interaction_idx,
                "session_id": ex.session_id,
                "prefix_len": ex.position,
                "true_item": ex.target_item,
                "items": [int(i) for i in order],
                "scores": [float(probs[i]) for i in order],
            }, sort_keys=True) + "\n")
