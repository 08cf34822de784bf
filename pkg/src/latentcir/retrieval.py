"""Exact cosine k-NN index, Recall@K / mAP@K and the CIR evaluator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RECALL_KS = (1, 5, 10, 50)
MAP_KS = (5, 10, 25, 50)


@dataclass(frozen=True)
class RetrievalIndex:
    matrix: np.ndarray  # (n, dim) unit-norm rows
    ids: np.ndarray  # (n,) unique int64 identifiers

    def __len__(self):
        return len(self.ids)

    def position_of(self, item_id: int) -> int:
        return int(self._positions[item_id])

    @property
    def _positions(self) -> dict:
        pos = self.__dict__.get("_pos")
        if pos is None:
            pos = {int(i): k for k, i in enumerate(self.ids)}
            object.__setattr__(self, "_pos", pos)
        return pos


def build_index(ids, vectors) -> RetrievalIndex:
    ids = np.asarray(ids, dtype=np.int64)
    mat = np.asarray(vectors, dtype=np.float64)
    if len(ids) == 0:
        raise ValueError("corpus is empty")
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate ids in corpus")
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    return RetrievalIndex(mat, ids)


def index_from_corpus(world, corpus) -> RetrievalIndex:
    """Index (Scene, embedding) pairs by scene id."""
    ids = [s.scene_id(world.config) for s, _ in corpus]
    return build_index(ids, np.stack([e for _, e in corpus]))


# Scores are rounded to this many decimals before ranking: a batched matmul can
# give identical rows scores that differ in the last bit, which would otherwise
# defeat the tie-break.
SCORE_DECIMALS = 12


def search(index: RetrievalIndex, query: np.ndarray, k: int) -> np.ndarray:
    """Top-k ids by descending cosine, ties broken by ascending id."""
    return search_batch(index, np.asarray(query)[None], k)[0]


def search_batch(index: RetrievalIndex, queries: np.ndarray, k: int) -> np.ndarray:
    if not 1 <= k <= len(index):
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    scores = np.round(np.asarray(queries, dtype=np.float64) @ index.matrix.T, SCORE_DECIMALS)
    out = np.empty((len(scores), k), dtype=np.int64)
    for q, s in enumerate(scores):
        order = np.lexsort((index.ids, -s))
        out[q] = index.ids[order[:k]]
    return out


def recall_at_k(ranked, positives, k: int) -> float:
    """Fraction of queries with any positive in the top k."""
    hits = [bool(set(map(int, r[:k])) & set(p)) for r, p in zip(ranked, positives)]
    return float(np.mean(hits)) if hits else 0.0


def average_precision_at_k(ranked, positives, k: int) -> float:
    pos = set(int(p) for p in positives)
    if not pos:
        raise ValueError("positives must be non-empty")
    hits, total = 0, 0.0
    for r, item in enumerate(ranked[:k], start=1):
        if int(item) in pos:
            hits += 1
            total += hits / r
    return total / min(len(pos), k)


def map_at_k(ranked, positives, k: int) -> float:
    vals = [average_precision_at_k(r, p, k) for r, p in zip(ranked, positives)]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class EvalResult:
    recall: dict[int, float]
    map: dict[int, float]
    ranks: list[int]  # 1-based rank of the first positive per query
    top_ids: np.ndarray = field(repr=False, default=None)  # (n_queries, 10)

    def as_row(self) -> dict:
        row = {f"recall@{k}": v for k, v in self.recall.items()}
        row.update({f"map@{k}": v for k, v in self.map.items()})
        return row


def score_rankings(index: RetrievalIndex, queries: np.ndarray, positives) -> EvalResult:
    ranked = search_batch(index, queries, len(index))
    ranks = []
    for r, p in zip(ranked, positives):
        if not p:
            raise ValueError("every query needs at least one positive in the index")
        pos = set(p)
        ranks.append(next(i for i, item in enumerate(r, start=1) if int(item) in pos))
    n = len(index)
    return EvalResult(
        recall={k: recall_at_k(ranked, positives, min(k, n)) for k in RECALL_KS},
        map={k: map_at_k(ranked, positives, min(k, n)) for k in MAP_KS},
        ranks=ranks,
        top_ids=ranked[:, : min(10, n)],
    )


def positives_for(world, index: RetrievalIndex, target_scenes) -> list[list[int]]:
    """Index ids whose scene equals each ground-truth target scene."""
    out = []
    for s in target_scenes:
        sid = s.scene_id(world.config)
        out.append([sid] if sid in index._positions else [])
    return out


def evaluate(model, world, eval_triplets, index: RetrievalIndex, spec, composer=None, schedule=None) -> EvalResult:
    """Compose every eval query, search the index, score against exact-scene positives.

    composer(triplets) -> (n, dim) query vectors; defaults to CFG + DDIM with `spec`.
    """
    if not eval_triplets:
        raise ValueError("evaluation set is empty")
    if composer is None:
        from .guidance import compose_batch

        refs = np.stack([t.ref_embedding for t in eval_triplets])
        instr = np.stack([world.token_array(t.instruction) for t in eval_triplets])
        masks = np.stack([t.mask.as_array() for t in eval_triplets])
        queries = compose_batch(model, world, refs, instr, masks, spec, schedule)
    else:
        queries = composer(eval_triplets)
    positives = positives_for(world, index, [t.target_scene for t in eval_triplets])
    return score_rankings(index, queries, positives)
