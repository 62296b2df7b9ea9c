"""Top-k block index selection from block scores.

Full attention layers emit per-head block scores; this module aggregates them
per GQA group (group-wise max, so every head in a group shares one index set)
and picks the k highest-scoring causal blocks per query row. The resulting
index sets are reused by every sparse layer in the hybrid block.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

__all__ = [
    "BlockIndexSet",
    "group_aggregate",
    "topk_blocks",
    "topk_blocks_batched",
    "selection_recall",
]

_PAD = -1
_SENTINEL = np.iinfo(np.int64).max


@dataclass
class BlockIndexSet:
    """Selected key-block ids per GQA group and query row.

    idx is [n_groups, t, k_blocks] with ascending valid entries followed by
    -1 padding; counts[g, r] = min(k_blocks, causal blocks at row r).
    """

    block_size: int
    k_blocks: int
    idx: np.ndarray
    counts: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.idx.shape[0]

    @property
    def n_rows(self) -> int:
        return self.idx.shape[1]

    def blocks_for(self, group: int, row: int) -> np.ndarray:
        return self.idx[group, row, : self.counts[group, row]]

    def to_json(self) -> str:
        """Debug dump: row -> group -> selected block list."""
        payload = {
            "block_size": self.block_size,
            "k_blocks": self.k_blocks,
            "rows": [
                {
                    "row": r,
                    "groups": [self.blocks_for(g, r).tolist() for g in range(self.n_groups)],
                }
                for r in range(self.n_rows)
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def validate(self, q_positions=None) -> None:
        g, t, k = self.idx.shape
        qp = np.arange(t) if q_positions is None else np.asarray(q_positions)
        for gi in range(g):
            for r in range(t):
                blocks = self.blocks_for(gi, r)
                avail = qp[r] // self.block_size + 1
                if self.counts[gi, r] != min(self.k_blocks, avail):
                    raise ValueError(f"row {r}: count {self.counts[gi, r]} != min(k, causal)")
                if blocks.size and (np.diff(blocks) <= 0).any():
                    raise ValueError(f"row {r}: indices not strictly increasing")
                if blocks.size and blocks[-1] * self.block_size > qp[r]:
                    raise ValueError(f"row {r}: selected block starts after the row")


def group_aggregate(scores: np.ndarray, heads_per_group: int) -> np.ndarray:
    """Group-wise max over heads: [h, t, nb] -> [h/heads_per_group, t, nb]."""
    scores = np.asarray(scores)
    h = scores.shape[-3]
    if heads_per_group < 1 or h % heads_per_group != 0:
        raise ShapeError(f"{h} heads not divisible into groups of {heads_per_group}")
    shape = scores.shape
    grouped = scores.reshape(shape[:-3] + (h // heads_per_group, heads_per_group) + shape[-2:])
    return grouped.max(axis=-3)


def _topk_core(scores: np.ndarray, k_blocks: int, block_size: int, q_positions: np.ndarray):
    """scores: [..., t, nb] -> (idx [..., t, k], counts [..., t])."""
    t, nb = scores.shape[-2], scores.shape[-1]
    causal_blocks = q_positions // block_size + 1
    counts = np.minimum(k_blocks, causal_blocks)
    counts = np.broadcast_to(counts, scores.shape[:-1]).copy()
    block_ids = np.arange(nb)
    dead = block_ids[None, :] >= causal_blocks[:, None]  # [t, nb]
    masked = np.where(dead, -np.inf, scores)
    # stable sort on negated scores: equal scores keep ascending block order,
    # which is exactly the lower-index tie rule
    order = np.argsort(-masked, axis=-1, kind="stable")[..., :k_blocks]
    slots = np.arange(min(k_blocks, nb))
    valid = slots < counts[..., None]
    picked = np.where(valid, order, _SENTINEL)
    picked = np.sort(picked, axis=-1)
    idx = np.where(picked == _SENTINEL, _PAD, picked)
    if k_blocks > nb:  # pad out to the requested width
        pad = np.full(idx.shape[:-1] + (k_blocks - nb,), _PAD, dtype=np.int64)
        idx = np.concatenate([idx, pad], axis=-1)
    return idx.astype(np.int64), counts.astype(np.int64)


def topk_blocks(scores_group: np.ndarray, k_blocks: int, block_size: int, q_positions=None) -> BlockIndexSet:
    """Select the k_blocks highest-scoring causal blocks per (group, row).

    Ties break toward the lower block index; rows with fewer causal blocks
    than k_blocks select all of them.
    """
    if k_blocks < 1:
        raise ValueError("k_blocks must be >= 1")
    scores_group = np.asarray(scores_group, dtype=np.float64)
    if scores_group.ndim != 3:
        raise ShapeError(f"expected [groups, t, n_blocks], got {scores_group.shape}")
    t = scores_group.shape[1]
    qp = np.arange(t) if q_positions is None else np.asarray(q_positions, dtype=np.int64)
    idx, counts = _topk_core(scores_group, k_blocks, block_size, qp)
    return BlockIndexSet(block_size=block_size, k_blocks=k_blocks, idx=idx, counts=counts)


def topk_blocks_batched(scores_group: np.ndarray, k_blocks: int, block_size: int, q_positions=None):
    """Batched variant: [b, G, t, nb] -> (idx [b, G, t, k], counts [b, G, t])."""
    scores_group = np.asarray(scores_group, dtype=np.float64)
    t = scores_group.shape[-2]
    qp = np.arange(t) if q_positions is None else np.asarray(q_positions, dtype=np.int64)
    return _topk_core(scores_group, k_blocks, block_size, qp)


def selection_recall(oracle_set, candidate_set) -> float:
    """|oracle intersect candidate| / |oracle|; empty oracle counts as 1.0."""
    oracle = set(int(x) for x in oracle_set)
    if not oracle:
        return 1.0
    candidate = set(int(x) for x in candidate_set)
    return len(oracle & candidate) / len(oracle)
