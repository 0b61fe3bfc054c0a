"""Ranking metrics (MRR, Recall@k) and the repetition significance test.

Ranks use a deterministic total order: score descending, then item id
ascending, so tied scores place lower ids first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr


def rank_of_truth(scores: np.ndarray, true_item: int) -> int:
    """1-based rank of the true item under (score desc, id asc)."""
    scores = np.asarray(scores)
    if not 0 <= true_item < scores.shape[0]:
        raise IndexError(f"true_item {true_item} out of range for {scores.shape[0]} items")
    s = scores[true_item]
    greater = int((scores > s).sum())
    tied_before = int((scores[:true_item] == s).sum())
    return 1 + greater + tied_before


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("mrr of an empty rank list")
    if (ranks < 1).any():
        raise ValueError("ranks must be >= 1")
    return float((1.0 / ranks).mean())


def recall_at_k(ranks, k: int = 10) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("recall of an empty rank list")
    if (ranks < 1).any():
        raise ValueError("ranks must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    return float((ranks <= k).mean())


def t_test_one_tailed(samples_a, samples_b) -> tuple[float, float]:
    """Welch two-sample one-tailed t-test of H1: mean(a) > mean(b).

    Returns (t, p) with Welch-Satterthwaite degrees of freedom and the
    p-value from the Student-t CDF. Degenerate zero-variance inputs: equal
    means give (0, 0.5); unequal means give an infinite t with p of 0 or 1.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least 2 samples per group")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        if ma == mb:
            return 0.0, 0.5
        return (np.inf, 0.0) if ma > mb else (-np.inf, 1.0)
    se2 = va / a.size + vb / b.size
    t = float((ma - mb) / np.sqrt(se2))
    df = se2 ** 2 / ((va / a.size) ** 2 / (a.size - 1)
                     + (vb / b.size) ** 2 / (b.size - 1))
    p = float(1.0 - stdtr(df, t))
    return t, p


@dataclass
class EvalReport:
    """Per-repetition metrics plus their means for one evaluation protocol run."""

    mode: str
    seeds: list[int]
    mrr_values: list[float]
    recall_values: list[float]
    recall_k: int = 10
    num_examples: int = 0
    config_hash: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def mean_mrr(self) -> float:
        return float(np.mean(self.mrr_values))

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recall_values))

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "repetitions": [
                {"seed": s, "mrr": m, f"recall_at_{self.recall_k}": r}
                for s, m, r in zip(self.seeds, self.mrr_values, self.recall_values)
            ],
            "mean": {"mrr": self.mean_mrr,
                     f"recall_at_{self.recall_k}": self.mean_recall},
            "num_eval_examples": self.num_examples,
        }
        out.update(self.extras)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
