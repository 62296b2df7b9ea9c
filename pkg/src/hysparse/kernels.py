"""Attention kernels: reference full attention with block-score output, the
tiled online-softmax equivalent, sliding-window attention, and block-sparse
gather attention over a shared KV store.

All kernels are CPU tile-level reference implementations in float64. Shapes:
queries are [t_q, n_heads, d] (or batched [b, t_q, n_heads, d] in the
autodiff ops), keys/values are [t_k, n_kv_heads, d] with grouped-query
replication, and block scores are [n_heads, t_q, ceil(t_k/block_size)].

The tiled kernel stores the raw per-tile row maxima while streaming and
converts them to probability scale at the epilogue (exp(m_tile - m_row) / l_row),
so the emitted scores are exactly the per-block maxima of the softmax
probabilities that the reference kernel materializes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError

__all__ = [
    "AttnConfig",
    "BlockScores",
    "SinkBias",
    "SelectionCausalityError",
    "FullyMaskedError",
    "reference_full_attention",
    "tiled_attention_with_scores",
    "sliding_window_attention",
    "block_sparse_attention",
    "full_attention_op",
    "swa_op",
    "block_sparse_op",
]


class SelectionCausalityError(ValueError):
    """A selected block starts strictly after the query row it serves."""


class FullyMaskedError(ValueError):
    """A query row has no keys to attend to and no sink to absorb the mass."""


@dataclass(frozen=True)
class AttnConfig:
    """Geometry of one attention site.

    tile_cols must equal block_size: score blocks and key tiles are the same
    partition, which is what lets the streaming kernel emit block scores for
    free.
    """

    head_dim: int
    block_size: int = 64
    tile_rows: int = 64
    tile_cols: int | None = None
    window: int = 128
    softmax_scale: float | None = None
    sink_enabled: bool = False

    def __post_init__(self):
        if self.tile_cols is None:
            object.__setattr__(self, "tile_cols", self.block_size)
        if self.tile_cols != self.block_size:
            raise ValueError(
                f"tile_cols ({self.tile_cols}) must equal block_size ({self.block_size})"
            )
        if min(self.block_size, self.tile_rows, self.window) < 1:
            raise ValueError("block_size, tile_rows and window must all be >= 1")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")

    @property
    def scale(self) -> float:
        return self.softmax_scale if self.softmax_scale is not None else 1.0 / math.sqrt(self.head_dim)


@dataclass
class BlockScores:
    """Per-head, per-row maxima of softmax probabilities over key blocks."""

    values: np.ndarray  # [n_heads, t, n_blocks]
    block_size: int

    @property
    def n_heads(self) -> int:
        return self.values.shape[0]

    @property
    def n_rows(self) -> int:
        return self.values.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.values.shape[2]

    def validate(self, sink_enabled: bool = False, atol: float = 1e-12) -> None:
        v = self.values
        if v.min() < -atol or v.max() > 1.0 + atol:
            raise ValueError("block scores must lie in [0, 1]")
        h, t, nb = v.shape
        for r in range(t):
            first_dead = r // self.block_size + 1
            if first_dead < nb and np.abs(v[:, r, first_dead:]).max() > 0.0:
                raise ValueError(f"non-zero score for a block starting after row {r}")
            if not sink_enabled and v[:, r, :].max(axis=-1).min() < 1.0 / (r + 1) - atol:
                raise ValueError(f"row {r}: max block score below the uniform floor")


@dataclass
class SinkBias:
    """Per-query-head learnable logit entering only the softmax denominator."""

    logits: Tensor

    @classmethod
    def zeros(cls, n_heads: int, requires_grad: bool = True) -> "SinkBias":
        return cls(Tensor(np.zeros(n_heads), requires_grad=requires_grad))


def _sink_array(sink, n_heads: int) -> np.ndarray | None:
    if sink is None:
        return None
    if isinstance(sink, SinkBias):
        arr = sink.logits.data
    elif isinstance(sink, Tensor):
        arr = sink.data
    else:
        arr = np.asarray(sink, dtype=np.float64)
    if arr.shape != (n_heads,):
        raise ShapeError(f"sink must have one logit per query head, got {arr.shape}")
    return arr


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray, cfg: AttnConfig) -> None:
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError("expected [batch, t, heads, head_dim] operands")
    if k.shape != v.shape:
        raise ShapeError(f"k/v shapes differ: {k.shape} vs {v.shape}")
    if q.shape[-1] != cfg.head_dim or k.shape[-1] != cfg.head_dim:
        raise ShapeError("head_dim mismatch with config")
    if q.shape[0] != k.shape[0]:
        raise ShapeError("batch mismatch")
    h, hkv = q.shape[2], k.shape[2]
    if hkv < 1 or h % hkv != 0:
        raise ShapeError(f"query heads ({h}) must be a multiple of kv heads ({hkv})")


def _rep_kv(x: np.ndarray, groups: int) -> np.ndarray:
    # query head h reads kv head h // groups
    return np.repeat(x, groups, axis=2)


def _fold_kv(g: np.ndarray, hkv: int, groups: int) -> np.ndarray:
    b, tk, h, d = g.shape
    return g.reshape(b, tk, hkv, groups, d).sum(axis=3)


# ---------------------------------------------------------------------------
# materialized masked attention (reference path, also backs the SWA kernel)
# ---------------------------------------------------------------------------

def _masked_attention_fwd(q, k, v, scale, sink, allowed, score_block: int | None = None):
    b, tq, h, d = q.shape
    tk, hkv = k.shape[1], k.shape[2]
    groups = h // hkv
    kr = _rep_kv(k, groups)
    vr = _rep_kv(v, groups)
    logits = np.einsum("bqhd,bkhd->bhqk", q, kr, optimize=True) * scale
    logits = np.where(allowed[None, None], logits, -np.inf)
    m = logits.max(axis=-1)
    if sink is not None:
        m = np.maximum(m, sink[None, :, None])
    m_safe = np.where(np.isneginf(m), 0.0, m)
    p = np.exp(logits - m_safe[..., None])
    denom = p.sum(axis=-1)
    sink_term = None
    if sink is not None:
        sink_term = np.exp(sink[None, :, None] - m_safe)
        denom = denom + sink_term
    if (denom == 0.0).any():
        raise FullyMaskedError("query row with no allowed keys and no sink")
    probs = p / denom[..., None]
    o = np.einsum("bhqk,bkhd->bqhd", probs, vr, optimize=True)
    scores = None
    if score_block is not None:
        nb = -(-tk // score_block)
        pad = nb * score_block - tk
        pp = np.pad(probs, ((0, 0), (0, 0), (0, 0), (0, pad))) if pad else probs
        scores = pp.reshape(b, h, tq, nb, score_block).max(axis=-1)
    sink_probs = sink_term / denom if sink_term is not None else None
    return o, scores, (probs, kr, vr, sink_probs)


def _masked_attention_bwd(do, o, q, k, v, scale, saved):
    probs, kr, vr, sink_probs = saved
    b, tq, h, d = q.shape
    hkv = k.shape[2]
    groups = h // hkv
    gmat = np.einsum("bqhd,bkhd->bhqk", do, vr, optimize=True)
    c = np.einsum("bqhd,bqhd->bhq", do, o, optimize=True)
    ds = probs * (gmat - c[..., None])
    dq = scale * np.einsum("bhqk,bkhd->bqhd", ds, kr, optimize=True)
    dk = _fold_kv(scale * np.einsum("bhqk,bqhd->bkhd", ds, q, optimize=True), hkv, groups)
    dv = _fold_kv(np.einsum("bhqk,bqhd->bkhd", probs, do, optimize=True), hkv, groups)
    dsink = -(sink_probs * c).sum(axis=(0, 2)) if sink_probs is not None else None
    return dq, dk, dv, dsink


def _causal_mask(q_pos: np.ndarray, key_pos: np.ndarray) -> np.ndarray:
    return key_pos[None, :] <= q_pos[:, None]


def _window_mask(q_pos: np.ndarray, key_pos: np.ndarray, w: int) -> np.ndarray:
    return (key_pos[None, :] <= q_pos[:, None]) & (key_pos[None, :] > q_pos[:, None] - w)


# ---------------------------------------------------------------------------
# tiled streaming kernel (online max / renormalization, block scores for free)
# ---------------------------------------------------------------------------

def _tiled_attention_fwd(q, k, v, cfg: AttnConfig, sink, q_pos):
    b, tq, h, d = q.shape
    tk, hkv = k.shape[1], k.shape[2]
    groups = h // hkv
    scale = cfg.scale
    bm, bn = cfg.tile_rows, cfg.tile_cols
    kr = _rep_kv(k, groups)
    vr = _rep_kv(v, groups)
    n_blocks = -(-tk // bn)
    key_idx = np.arange(tk)

    out = np.empty((b, tq, h, d))
    row_max = np.empty((b, h, tq))
    row_denom = np.empty((b, h, tq))
    scores = np.empty((b, h, tq, n_blocks))

    for r0 in range(0, tq, bm):
        r1 = min(tq, r0 + bm)
        qi = q[:, r0:r1]
        qp = q_pos[r0:r1]
        rows = r1 - r0
        m = np.full((b, h, rows), -np.inf)
        denom = np.zeros((b, h, rows))
        acc = np.zeros((b, rows, h, d))
        raw = np.full((b, h, rows, n_blocks), -np.inf)
        qp_max = qp.max()
        for j in range(n_blocks):
            k0 = j * bn
            if k0 > qp_max:
                break
            k1 = min(tk, k0 + bn)
            kj = kr[:, k0:k1]
            vj = vr[:, k0:k1]
            a = np.einsum("bqhd,bkhd->bhqk", qi, kj, optimize=True) * scale
            allowed = _causal_mask(qp, key_idx[k0:k1])
            a = np.where(allowed[None, None], a, -np.inf)
            tile_max = a.max(axis=-1)
            raw[..., j] = tile_max
            m_new = np.maximum(m, tile_max)
            m_safe = np.where(np.isneginf(m_new), 0.0, m_new)
            rescale = np.exp(m - m_safe)
            p = np.exp(a - m_safe[..., None])
            denom = denom * rescale + p.sum(axis=-1)
            acc = acc * rescale.transpose(0, 2, 1)[..., None] + np.einsum(
                "bhqk,bkhd->bqhd", p, vj, optimize=True
            )
            m = m_new
        if sink is not None:
            m_fin = np.maximum(m, sink[None, :, None])
            adj = np.exp(m - m_fin)
            denom = denom * adj + np.exp(sink[None, :, None] - m_fin)
            acc = acc * adj.transpose(0, 2, 1)[..., None]
            m = m_fin
        out[:, r0:r1] = acc / denom.transpose(0, 2, 1)[..., None]
        row_max[:, :, r0:r1] = m
        row_denom[:, :, r0:r1] = denom
        scores[:, :, r0:r1, :] = np.exp(raw - m[..., None]) / denom[..., None]
    return out, scores, (row_max, row_denom)


def _tiled_attention_bwd(do, o, q, k, v, cfg: AttnConfig, sink, q_pos, saved):
    row_max, row_denom = saved
    b, tq, h, d = q.shape
    tk, hkv = k.shape[1], k.shape[2]
    groups = h // hkv
    scale = cfg.scale
    bm, bn = cfg.tile_rows, cfg.tile_cols
    kr = _rep_kv(k, groups)
    vr = _rep_kv(v, groups)
    n_blocks = -(-tk // bn)
    key_idx = np.arange(tk)

    c = np.einsum("bqhd,bqhd->bhq", do, o, optimize=True)
    dq = np.zeros_like(q)
    dkr = np.zeros_like(kr)
    dvr = np.zeros_like(vr)

    for r0 in range(0, tq, bm):
        r1 = min(tq, r0 + bm)
        qi = q[:, r0:r1]
        qp = q_pos[r0:r1]
        doi = do[:, r0:r1]
        mi = row_max[:, :, r0:r1, None]
        li = row_denom[:, :, r0:r1, None]
        ci = c[:, :, r0:r1, None]
        qp_max = qp.max()
        for j in range(n_blocks):
            k0 = j * bn
            if k0 > qp_max:
                break
            k1 = min(tk, k0 + bn)
            kj = kr[:, k0:k1]
            vj = vr[:, k0:k1]
            a = np.einsum("bqhd,bkhd->bhqk", qi, kj, optimize=True) * scale
            allowed = _causal_mask(qp, key_idx[k0:k1])
            a = np.where(allowed[None, None], a, -np.inf)
            p = np.exp(a - mi) / li
            dvr[:, k0:k1] += np.einsum("bhqk,bqhd->bkhd", p, doi, optimize=True)
            gmat = np.einsum("bqhd,bkhd->bhqk", doi, vj, optimize=True)
            ds = p * (gmat - ci)
            dq[:, r0:r1] += scale * np.einsum("bhqk,bkhd->bqhd", ds, kj, optimize=True)
            dkr[:, k0:k1] += scale * np.einsum("bhqk,bqhd->bkhd", ds, qi, optimize=True)
    dk = _fold_kv(dkr, hkv, groups)
    dv = _fold_kv(dvr, hkv, groups)
    dsink = None
    if sink is not None:
        sink_probs = np.exp(sink[None, :, None] - row_max) / row_denom
        dsink = -(sink_probs * c).sum(axis=(0, 2))
    return dq, dk, dv, dsink


# ---------------------------------------------------------------------------
# block-sparse gather attention over a shared KV store
# ---------------------------------------------------------------------------

def _gathered_tokens(idx, counts, block_size, tk, q_pos):
    """Expand padded block indices to token positions plus a validity mask."""
    b, G, tq, kmax = idx.shape
    slots = np.arange(kmax)
    selected = slots[None, None, None, :] < counts[..., None]
    starts = idx * block_size
    beyond = selected & (starts > q_pos[None, None, :, None])
    if beyond.any():
        where = np.argwhere(beyond)[0]
        raise SelectionCausalityError(
            f"selected block {idx[tuple(where)]} starts after query row {q_pos[where[2]]}"
        )
    tok = idx[..., None] * block_size + np.arange(block_size)
    tok = tok.reshape(b, G, tq, kmax * block_size)
    valid = np.repeat(selected, block_size, axis=-1)
    valid = valid & (tok >= 0) & (tok < tk) & (tok <= q_pos[None, None, :, None])
    return np.where(valid, tok, 0), valid


def _block_sparse_fwd(q, kv_k, kv_v, idx, counts, cfg: AttnConfig, sink, q_pos):
    b, tq, h, d = q.shape
    tk, hkv = kv_k.shape[1], kv_k.shape[2]
    G = idx.shape[1]
    if G != hkv:
        raise ShapeError(f"index groups ({G}) must match kv heads ({hkv})")
    hpg = h // G
    scale = cfg.scale
    if sink is None and (counts == 0).any():
        raise FullyMaskedError("row with an empty block index set and no sink")
    tok, valid = _gathered_tokens(idx, counts, cfg.block_size, tk, q_pos)
    bi = np.arange(b)[:, None, None, None]
    gi = np.arange(G)[None, :, None, None]
    kt = kv_k[bi, tok, gi]  # [b, G, tq, s, d]
    vt = kv_v[bi, tok, gi]
    qg = q.reshape(b, tq, G, hpg, d).transpose(0, 2, 3, 1, 4)  # [b, G, hpg, tq, d]
    logits = np.einsum("bgpqd,bgqsd->bgpqs", qg, kt, optimize=True) * scale
    logits = np.where(valid[:, :, None], logits, -np.inf)
    m = logits.max(axis=-1)
    sink_g = sink.reshape(G, hpg) if sink is not None else None
    if sink_g is not None:
        m = np.maximum(m, sink_g[None, :, :, None])
    m_safe = np.where(np.isneginf(m), 0.0, m)
    p = np.exp(logits - m_safe[..., None])
    denom = p.sum(axis=-1)
    sink_term = None
    if sink_g is not None:
        sink_term = np.exp(sink_g[None, :, :, None] - m_safe)
        denom = denom + sink_term
    if (denom == 0.0).any():
        raise FullyMaskedError("query row with no gathered keys and no sink")
    probs = p / denom[..., None]
    og = np.einsum("bgpqs,bgqsd->bgpqd", probs, vt, optimize=True)
    out = og.transpose(0, 3, 1, 2, 4).reshape(b, tq, h, d)
    sink_probs = sink_term / denom if sink_term is not None else None
    return out, (probs, kt, vt, tok, sink_probs)


def _block_sparse_bwd(do, q, kv_k, kv_v, cfg: AttnConfig, saved):
    probs, kt, vt, tok, sink_probs = saved
    b, tq, h, d = do.shape
    tk, hkv = kv_k.shape[1], kv_k.shape[2]
    G = probs.shape[1]
    hpg = h // G
    scale = cfg.scale
    dog = do.reshape(b, tq, G, hpg, d).transpose(0, 2, 3, 1, 4)
    qg = q.reshape(b, tq, G, hpg, d).transpose(0, 2, 3, 1, 4)
    gmat = np.einsum("bgpqd,bgqsd->bgpqs", dog, vt, optimize=True)
    c = (probs * gmat).sum(axis=-1)
    ds = probs * (gmat - c[..., None])
    dqg = scale * np.einsum("bgpqs,bgqsd->bgpqd", ds, kt, optimize=True)
    dkt = scale * np.einsum("bgpqs,bgpqd->bgqsd", ds, qg, optimize=True)
    dvt = np.einsum("bgpqs,bgpqd->bgqsd", probs, dog, optimize=True)
    dq = dqg.transpose(0, 3, 1, 2, 4).reshape(b, tq, h, d)
    dk = np.zeros_like(kv_k)
    dv = np.zeros_like(kv_v)
    bi = np.arange(b)[:, None, None, None]
    gi = np.arange(G)[None, :, None, None]
    # invalid slots carry probs == 0, so their scattered contributions vanish
    np.add.at(dk, (bi, tok, gi), dkt)
    np.add.at(dv, (bi, tok, gi), dvt)
    dsink = None
    if sink_probs is not None:
        dsink = (-(sink_probs * c).sum(axis=(0, 3))).reshape(h)
    return dq, dk, dv, dsink


# ---------------------------------------------------------------------------
# single-sequence kernel API (numpy in / numpy out)
# ---------------------------------------------------------------------------

def _prep_single(q, k, v, cfg):
    q = np.asarray(q, dtype=np.float64)[None]
    k = np.asarray(k, dtype=np.float64)[None]
    v = np.asarray(v, dtype=np.float64)[None]
    _check_qkv(q, k, v, cfg)
    return q, k, v


def reference_full_attention(q, k, v, cfg: AttnConfig, sink=None):
    """Exact causal softmax attention by direct materialization.

    Returns the attention output [t, h, d] and BlockScores holding, for every
    head, row and key block, the maximum softmax probability within the block.
    """
    q, k, v = _prep_single(q, k, v, cfg)
    t = q.shape[1]
    if k.shape[1] != t:
        raise ShapeError("reference kernel expects self-attention (t_q == t_k)")
    sink_arr = _sink_array(sink, q.shape[2]) if cfg.sink_enabled else None
    pos = np.arange(t)
    o, scores, _ = _masked_attention_fwd(
        q, k, v, cfg.scale, sink_arr, _causal_mask(pos, pos), score_block=cfg.block_size
    )
    return o[0], BlockScores(scores[0], cfg.block_size)


def tiled_attention_with_scores(q, k, v, cfg: AttnConfig, sink=None):
    """Streaming equivalent of reference_full_attention (never materializes t x t)."""
    q, k, v = _prep_single(q, k, v, cfg)
    t = q.shape[1]
    if k.shape[1] != t:
        raise ShapeError("tiled kernel expects self-attention (t_q == t_k)")
    sink_arr = _sink_array(sink, q.shape[2]) if cfg.sink_enabled else None
    o, scores, _ = _tiled_attention_fwd(q, k, v, cfg, sink_arr, np.arange(t))
    return o[0], BlockScores(scores[0], cfg.block_size)


def sliding_window_attention(q, k, v, cfg: AttnConfig, sink=None, q_positions=None, key_positions=None):
    """Causal attention restricted to the trailing window of cfg.window keys."""
    q, k, v = _prep_single(q, k, v, cfg)
    tq, tk = q.shape[1], k.shape[1]
    qp = np.arange(tq) if q_positions is None else np.asarray(q_positions, dtype=np.int64)
    kp = np.arange(tk) if key_positions is None else np.asarray(key_positions, dtype=np.int64)
    sink_arr = _sink_array(sink, q.shape[2]) if cfg.sink_enabled else None
    o, _, _ = _masked_attention_fwd(q, k, v, cfg.scale, sink_arr, _window_mask(qp, kp, cfg.window))
    return o[0]


def block_sparse_attention(q, k, v, indices, cfg: AttnConfig, sink=None, q_positions=None):
    """Softmax attention over exactly the causally valid gathered block tokens.

    indices carries, per GQA group and query row, the ascending selected key
    block ids (see selection.BlockIndexSet).
    """
    q, k, v = _prep_single(q, k, v, cfg)
    tq = q.shape[1]
    qp = np.arange(tq) if q_positions is None else np.asarray(q_positions, dtype=np.int64)
    if indices.block_size != cfg.block_size:
        raise ShapeError("index block size does not match kernel block size")
    sink_arr = _sink_array(sink, q.shape[2]) if cfg.sink_enabled else None
    o, _ = _block_sparse_fwd(q, k, v, indices.idx[None], indices.counts[None], cfg, sink_arr, qp)
    return o[0]


# ---------------------------------------------------------------------------
# autodiff ops (batched [b, t, h, d] tensors, used by the model layers)
# ---------------------------------------------------------------------------

def _op_sink(sink, cfg, n_heads):
    if not cfg.sink_enabled or sink is None:
        return None, ()
    if isinstance(sink, SinkBias):
        sink = sink.logits
    if not isinstance(sink, Tensor):
        sink = Tensor(np.asarray(sink, dtype=np.float64))
    if sink.data.shape != (n_heads,):
        raise ShapeError(f"sink must have one logit per query head, got {sink.data.shape}")
    return sink, (sink,)


def full_attention_op(q: Tensor, k: Tensor, v: Tensor, cfg: AttnConfig, sink, q_pos):
    """Tiled full attention as a differentiable op; also returns raw block scores.

    Block scores feed top-k index selection only, so no gradient flows
    through them (selected indices are constants to the backward pass).
    """
    _check_qkv(q.data, k.data, v.data, cfg)
    sink_t, sink_parents = _op_sink(sink, cfg, q.data.shape[2])
    sink_arr = sink_t.data if sink_t is not None else None
    q_pos = np.asarray(q_pos, dtype=np.int64)
    out, scores, saved = _tiled_attention_fwd(q.data, k.data, v.data, cfg, sink_arr, q_pos)

    def vjp(g):
        dq, dk, dv, dsink = _tiled_attention_bwd(
            g, out, q.data, k.data, v.data, cfg, sink_arr, q_pos, saved
        )
        return (dq, dk, dv) + ((dsink,) if sink_t is not None else ())

    return Tensor.from_op(out, (q, k, v) + sink_parents, vjp, "full_attention"), scores


def swa_op(q: Tensor, k: Tensor, v: Tensor, cfg: AttnConfig, sink, q_pos, key_pos=None):
    """Sliding-window attention as a differentiable op."""
    _check_qkv(q.data, k.data, v.data, cfg)
    sink_t, sink_parents = _op_sink(sink, cfg, q.data.shape[2])
    sink_arr = sink_t.data if sink_t is not None else None
    q_pos = np.asarray(q_pos, dtype=np.int64)
    kp = q_pos if key_pos is None else np.asarray(key_pos, dtype=np.int64)
    mask = _window_mask(q_pos, kp, cfg.window)
    out, _, saved = _masked_attention_fwd(q.data, k.data, v.data, cfg.scale, sink_arr, mask)

    def vjp(g):
        dq, dk, dv, dsink = _masked_attention_bwd(g, out, q.data, k.data, v.data, cfg.scale, saved)
        return (dq, dk, dv) + ((dsink,) if sink_t is not None else ())

    return Tensor.from_op(out, (q, k, v) + sink_parents, vjp, "swa")


def block_sparse_op(q: Tensor, k: Tensor, v: Tensor, idx, counts, cfg: AttnConfig, sink, q_pos):
    """Block-sparse gather attention as a differentiable op.

    idx/counts are the padded per-group top-k block tables ([b, G, t, k] and
    [b, G, t]); gradients flow into the gathered K/V but never through the
    index selection itself.
    """
    _check_qkv(q.data, k.data, v.data, cfg)
    sink_t, sink_parents = _op_sink(sink, cfg, q.data.shape[2])
    sink_arr = sink_t.data if sink_t is not None else None
    q_pos = np.asarray(q_pos, dtype=np.int64)
    out, saved = _block_sparse_fwd(q.data, k.data, v.data, idx, counts, cfg, sink_arr, q_pos)

    def vjp(g):
        dq, dk, dv, dsink = _block_sparse_bwd(g, q.data, k.data, v.data, cfg, saved)
        return (dq, dk, dv) + ((dsink,) if sink_t is not None else ())

    return Tensor.from_op(out, (q, k, v) + sink_parents, vjp, "block_sparse"), None
