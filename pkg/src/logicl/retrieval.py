"""Nearest-neighbor and maximal-marginal-relevance selection over embeddings.

Exhaustive scans, no approximate indexes: pools stay small enough that exact
O(N) similarity per query is the simpler and reproducible choice. Ties are
always broken by index insertion order.
"""

from dataclasses import dataclass

import numpy as np

from .embedding import EmbeddingStore
from .errors import ConfigError, DegenerateInputError


@dataclass
class MMRParams:
    """Relevance/diversity trade-off and selection budget."""

    lam: float = 0.7
    k: int = 8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"mmr lambda must be in [0, 1], got {self.lam}")
        if self.k < 1:
            raise ConfigError(f"mmr budget k must be >= 1, got {self.k}")


class RetrievalIndex:
    """Immutable candidate pool: ordered (id, vector) rows."""

    def __init__(self, ids: list[str], vectors: np.ndarray):
        if len(ids) != len(set(ids)):
            raise ConfigError("retrieval index ids must be unique")
        if len(ids) != vectors.shape[0]:
            raise ConfigError("ids and vectors disagree in length")
        self.ids = list(ids)
        self.vectors = np.asarray(vectors, dtype=float)
        self.norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(self.norms == 0.0):
            raise DegenerateInputError("retrieval index contains a zero vector")

    @classmethod
    def from_store(cls, store: EmbeddingStore, exclude: set[str] | None = None) -> "RetrievalIndex":
        if exclude:
            keep = [i for i, sid in enumerate(store.ids) if sid not in exclude]
            return cls([store.ids[i] for i in keep], store.vectors[keep])
        return cls(list(store.ids), store.vectors)

    def __len__(self) -> int:
        return len(self.ids)

    def similarities(self, query: np.ndarray) -> np.ndarray:
        """Cosine similarity of the query against every row, clamped to [-1, 1]."""
        qnorm = float(np.linalg.norm(query))
        if qnorm == 0.0:
            raise DegenerateInputError("query vector has zero norm")
        return np.clip(self.vectors @ query / (self.norms * qnorm), -1.0, 1.0)


def top_k_similar(query: np.ndarray, index: RetrievalIndex, k: int) -> list[tuple[str, float]]:
    """k highest-cosine candidates in descending order (all of them if k > pool)."""
    if len(index) == 0:
        raise DegenerateInputError("retrieval index is empty")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    sims = index.similarities(query)
    order = np.argsort(-sims, kind="stable")[:k]
    return [(index.ids[i], float(sims[i])) for i in order]


def mmr_select(query: np.ndarray, index: RetrievalIndex, params: MMRParams) -> list[str]:
    """Greedy marginal-relevance selection.

    Each step picks the candidate maximizing
    lam * sim(query, cand) - (1 - lam) * max(sim(cand, selected)),
    with a zero diversity penalty while nothing is selected yet, so the first
    pick is the pure-relevance argmax. Returns ids in selection order.
    """
    if len(index) == 0:
        raise DegenerateInputError("retrieval index is empty")
    relevance = index.similarities(query)
    # Running max similarity of each candidate to the selected set; None until
    # the first selection because the max over an empty set is defined as a
    # zero penalty, while over a non-empty set it may legitimately be negative.
    max_sim_to_selected = None
    remaining = np.arange(len(index))  # insertion order, so argmax breaks ties stably
    selected: list[int] = []

    while remaining.size > 0 and len(selected) < params.k:
        scores = params.lam * relevance[remaining]
        if max_sim_to_selected is not None:
            scores = scores - (1.0 - params.lam) * max_sim_to_selected[remaining]
        pos = int(np.argmax(scores))
        best = int(remaining[pos])
        selected.append(best)
        remaining = np.delete(remaining, pos)
        sims_to_new = np.clip(
            index.vectors @ index.vectors[best] / (index.norms * index.norms[best]),
            -1.0,
            1.0,
        )
        if max_sim_to_selected is None:
            max_sim_to_selected = sims_to_new
        else:
            np.maximum(max_sim_to_selected, sims_to_new, out=max_sim_to_selected)

    return [index.ids[i] for i in selected]
