"""Brute-force reference implementations used to cross-check the kernels.

Everything here favors obviousness over speed: per-row loops, direct
formulas, extended-precision accumulation. None of it shares code with the
kernels it validates.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "matmul_triple_loop",
    "softmax_direct",
    "attention_direct",
    "block_max_scores",
    "causal_mask",
    "window_mask",
    "selection_mask",
    "topk_blocks_exhaustive",
    "group_max_bruteforce",
    "rope_direct",
    "transformer_logits",
]


def matmul_triple_loop(a, b):
    """Naive i/j/k triple loop; the ground truth for exact matmul ordering."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, kdim = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for k in range(kdim):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def softmax_direct(row, mask=None):
    """Direct exp/sum softmax of one row in extended precision."""
    row = np.asarray(row, dtype=np.longdouble)
    keep = np.ones(row.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.zeros(row.shape, dtype=np.longdouble)
    if keep.any():
        e = np.exp(row[keep] - row[keep].max())
        out[keep] = e / e.sum()
    return out.astype(np.float64)


def causal_mask(t_q: int, t_k: int, q_positions=None) -> np.ndarray:
    qp = np.arange(t_q) if q_positions is None else np.asarray(q_positions)
    return np.arange(t_k)[None, :] <= qp[:, None]


def window_mask(t_q: int, t_k: int, window: int, q_positions=None, key_positions=None) -> np.ndarray:
    qp = np.arange(t_q) if q_positions is None else np.asarray(q_positions)
    kp = np.arange(t_k) if key_positions is None else np.asarray(key_positions)
    return (kp[None, :] <= qp[:, None]) & (kp[None, :] > qp[:, None] - window)


def selection_mask(indices, t_q: int, t_k: int, q_positions=None) -> np.ndarray:
    """Per-group allowed-position mask [G, t_q, t_k] from a block index set."""
    qp = np.arange(t_q) if q_positions is None else np.asarray(q_positions)
    B = indices.block_size
    G = indices.idx.shape[0]
    mask = np.zeros((G, t_q, t_k), dtype=bool)
    for g in range(G):
        for r in range(t_q):
            for blk in indices.blocks_for(g, r):
                lo = blk * B
                hi = min(t_k, lo + B)
                mask[g, r, lo:hi] = True
            mask[g, r, qp[r] + 1:] = False
    return mask


def attention_direct(q, k, v, scale, allowed, sink=None):
    """Per-row direct-formula attention in extended precision.

    q: [t_q, h, d]; k/v: [t_k, h_kv, d]; allowed: [t_q, t_k] or [h, t_q, t_k].
    Returns (output [t_q, h, d], probabilities [h, t_q, t_k]).
    """
    q = np.asarray(q, dtype=np.longdouble)
    k = np.asarray(k, dtype=np.longdouble)
    v = np.asarray(v, dtype=np.longdouble)
    t_q, h, d = q.shape
    t_k, h_kv = k.shape[0], k.shape[1]
    groups = h // h_kv
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.ndim == 2:
        allowed = np.broadcast_to(allowed, (h, t_q, t_k))
    out = np.zeros((t_q, h, d), dtype=np.longdouble)
    probs = np.zeros((h, t_q, t_k), dtype=np.longdouble)
    for hh in range(h):
        kv = hh // groups
        s = np.longdouble(sink[hh]) if sink is not None else None
        for r in range(t_q):
            idx = np.nonzero(allowed[hh, r])[0]
            if idx.size == 0 and s is None:
                raise ValueError(f"row {r}, head {hh}: fully masked with no sink")
            logits = (k[idx, kv] @ q[r, hh]) * np.longdouble(scale)
            m = logits.max() if idx.size else np.longdouble("-inf")
            if s is not None:
                m = max(m, s)
            e = np.exp(logits - m)
            denom = e.sum()
            if s is not None:
                denom = denom + np.exp(s - m)
            p = e / denom
            probs[hh, r, idx] = p
            out[r, hh] = p @ v[idx, kv]
    return out.astype(np.float64), probs.astype(np.float64)


def block_max_scores(probs, block_size: int) -> np.ndarray:
    """Per-block maxima of materialized probabilities; [h, t, ceil(t_k/B)]."""
    h, t_q, t_k = probs.shape
    nb = -(-t_k // block_size)
    out = np.zeros((h, t_q, nb))
    for j in range(nb):
        lo, hi = j * block_size, min(t_k, (j + 1) * block_size)
        out[:, :, j] = probs[:, :, lo:hi].max(axis=-1)
    return out


def topk_blocks_exhaustive(scores_row, n_causal: int, k_blocks: int) -> list[int]:
    """Sort-based top-k over the causal prefix; ties go to the lower index."""
    order = sorted(range(n_causal), key=lambda j: (-scores_row[j], j))
    return sorted(order[: min(k_blocks, n_causal)])


def group_max_bruteforce(scores, heads_per_group: int) -> np.ndarray:
    h, t, nb = scores.shape
    g = h // heads_per_group
    out = np.zeros((g, t, nb))
    for gi in range(g):
        for r in range(t):
            for j in range(nb):
                out[gi, r, j] = max(
                    scores[gi * heads_per_group + p, r, j] for p in range(heads_per_group)
                )
    return out


def rope_direct(x, positions, base: float) -> np.ndarray:
    """Adjacent-pair rotation, one (position, pair) at a time."""
    x = np.asarray(x, dtype=np.float64)
    t, h, d = x.shape
    out = x.copy()
    for r in range(t):
        for i in range(0, d, 2):
            theta = positions[r] * base ** (-i / d)
            c, s = math.cos(theta), math.sin(theta)
            a, b = x[r, :, i].copy(), x[r, :, i + 1].copy()
            out[r, :, i] = a * c - b * s
            out[r, :, i + 1] = a * s + b * c
    return out


def _rms(x, gain, eps=1e-30):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * gain


def _sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def transformer_logits(weights, cfg, tokens, layer_modes):
    """Independent forward pass of a pre-norm transformer built from the
    model's weight arrays.

    layer_modes[i] selects the attention flavor of layer i:
      "full"       plain causal attention (+ per-head sink when present)
      "gated_full" two full-attention branches (separate sinks) fused by the
                   sigmoid gates - the degenerate shape a two-branch sparse
                   layer collapses to when both branches see all history
      "swa"        a single window-limited branch scaled by its gate
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    t = tokens.shape[0]
    nh, hkv, d = cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim
    pos = np.arange(t)
    x = weights["embed"][tokens]
    for i, mode in enumerate(layer_modes):
        pre = f"layer{i}."
        h = _rms(x, weights[pre + "attn_norm"])
        q = rope_direct((h @ weights[pre + "wq"]).reshape(t, nh, d), pos, cfg.rope_base)
        k = rope_direct((h @ weights[pre + "wk"]).reshape(t, hkv, d), pos, cfg.rope_base)
        v = (h @ weights[pre + "wv"]).reshape(t, hkv, d)
        scale = 1.0 / math.sqrt(d)
        if mode == "full":
            sink = weights.get(pre + "sink") if cfg.sink_enabled else None
            o, _ = attention_direct(q, k, v, scale, causal_mask(t, t), sink)
        elif mode == "gated_full":
            sink_sp = weights.get(pre + "sink_sparse") if cfg.sink_enabled else None
            sink_sw = weights.get(pre + "sink_swa") if cfg.sink_enabled else None
            o_sp, _ = attention_direct(q, k, v, scale, causal_mask(t, t), sink_sp)
            o_sw, _ = attention_direct(q, k, v, scale, causal_mask(t, t), sink_sw)
            g_sp = _sigmoid(h @ weights[pre + "gate_sparse_w"] + weights[pre + "gate_sparse_b"])
            g_sw = _sigmoid(h @ weights[pre + "gate_swa_w"] + weights[pre + "gate_swa_b"])
            o = g_sp[:, :, None] * o_sp + g_sw[:, :, None] * o_sw
        elif mode == "swa":
            sink_sw = weights.get(pre + "sink_swa") if cfg.sink_enabled else None
            o_sw, _ = attention_direct(q, k, v, scale, window_mask(t, t, cfg.window), sink_sw)
            g_sw = _sigmoid(h @ weights[pre + "gate_swa_w"] + weights[pre + "gate_swa_b"])
            o = g_sw[:, :, None] * o_sw
        else:
            raise ValueError(f"unknown layer mode {mode!r}")
        x = x + o.reshape(t, nh * d) @ weights[pre + "wo"]
        f = _rms(x, weights[pre + "ffn_norm"])
        gate = f @ weights[pre + "ffn_gate"]
        up = f @ weights[pre + "ffn_up"]
        x = x + (gate * _sigmoid(gate) * up) @ weights[pre + "ffn_down"]
    x = _rms(x, weights["final_norm"])
    return x @ weights["unembed"]
