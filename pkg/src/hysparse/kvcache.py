"""Cache memory ownership: shared full-layer KV stores per hybrid block,
per-sparse-layer sliding-window ring buffers, block gathering, and byte
accounting.

One arena serves one sequence. Full layers are the only writers of their
block's shared store; sparse layers are the only writers of their own ring
buffer. Violations raise OwnershipError instead of corrupting state.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KvArena",
    "KvHandle",
    "MemoryReport",
    "LayerMemory",
    "OwnershipError",
    "memory_report",
]


class OwnershipError(PermissionError):
    """A layer tried to write cache memory it does not own."""


class _FullStore:
    __slots__ = ("owner", "k", "v")

    def __init__(self, owner: int):
        self.owner = owner
        self.k: np.ndarray | None = None
        self.v: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[0]

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        if self.k is None:
            self.k = k_new.copy()
            self.v = v_new.copy()
        else:
            self.k = np.concatenate([self.k, k_new], axis=0)
            self.v = np.concatenate([self.v, v_new], axis=0)

    def nbytes(self) -> int:
        return 0 if self.k is None else self.k.nbytes + self.v.nbytes


class _RingStore:
    """Lazy-grow circular buffer holding exactly the last min(t, window) rows."""

    __slots__ = ("owner", "window", "k", "v", "ptr", "total")

    def __init__(self, owner: int, window: int):
        self.owner = owner
        self.window = window
        self.k: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.ptr = 0  # next overwrite slot once full
        self.total = 0  # tokens ever appended

    @property
    def length(self) -> int:
        return min(self.total, self.window)

    def append_row(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        if self.total < self.window:
            if self.k is None:
                self.k = k_row[None].copy()
                self.v = v_row[None].copy()
            else:
                self.k = np.concatenate([self.k, k_row[None]], axis=0)
                self.v = np.concatenate([self.v, v_row[None]], axis=0)
        else:
            self.k[self.ptr] = k_row
            self.v[self.ptr] = v_row
            self.ptr = (self.ptr + 1) % self.window
        self.total += 1

    def ordered(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Contents oldest-to-newest plus their absolute positions."""
        n = self.length
        positions = np.arange(self.total - n, self.total)
        if n == 0:
            shape = (0,) + (() if self.k is None else self.k.shape[1:])
            return np.zeros(shape), np.zeros(shape), positions
        if self.total <= self.window:
            return self.k[:n], self.v[:n], positions
        order = (self.ptr + np.arange(self.window)) % self.window
        return self.k[order], self.v[order], positions

    def nbytes(self) -> int:
        return 0 if self.k is None else self.k.nbytes + self.v.nbytes


@dataclass
class KvHandle:
    """Read-only access to one hybrid block's shared KV store."""

    arena: "KvArena"
    block_id: int
    live_k: object = None  # gradient-tracked tensors for the current pass
    live_v: object = None

    @property
    def length(self) -> int:
        return self.arena._full[self.block_id].length

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        store = self.arena._full[self.block_id]
        k = store.k.view()
        v = store.v.view()
        k.flags.writeable = False
        v.flags.writeable = False
        return k, v

    def gather_blocks(self, blocks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return gather_blocks(self, blocks)


class KvArena:
    """All cache memory for one sequence."""

    def __init__(self, block_size: int):
        self.block_size = block_size
        self._full: dict[int, _FullStore] = {}
        self._rings: dict[int, _RingStore] = {}

    # -- registration (done once by the stack builder) ----------------------
    def register_full_store(self, block_id: int, owner_layer: int) -> None:
        if block_id in self._full:
            raise ValueError(f"block {block_id} already registered")
        self._full[block_id] = _FullStore(owner_layer)

    def register_ring(self, layer_id: int, owner_layer: int, window: int) -> None:
        if layer_id in self._rings:
            raise ValueError(f"ring for layer {layer_id} already registered")
        self._rings[layer_id] = _RingStore(owner_layer, window)

    # -- writes (owner-checked) ---------------------------------------------
    def append_full(self, block_id: int, k_new: np.ndarray, v_new: np.ndarray, caller_layer: int) -> KvHandle:
        store = self._full[block_id]
        if caller_layer != store.owner:
            raise OwnershipError(
                f"layer {caller_layer} cannot write block {block_id} (owned by layer {store.owner})"
            )
        k_new = np.atleast_3d(np.asarray(k_new, dtype=np.float64))
        v_new = np.atleast_3d(np.asarray(v_new, dtype=np.float64))
        store.append(k_new, v_new)
        return KvHandle(self, block_id)

    def window_append(self, layer_id: int, k_new: np.ndarray, v_new: np.ndarray, caller_layer: int) -> None:
        ring = self._rings[layer_id]
        if caller_layer != ring.owner:
            raise OwnershipError(
                f"layer {caller_layer} cannot write the ring of layer {layer_id}"
            )
        k_new = np.asarray(k_new, dtype=np.float64)
        v_new = np.asarray(v_new, dtype=np.float64)
        if k_new.ndim == 2:  # single row
            ring.append_row(k_new, v_new)
        else:
            for r in range(k_new.shape[0]):
                ring.append_row(k_new[r], v_new[r])

    # -- reads ----------------------------------------------------------------
    def handle(self, block_id: int) -> KvHandle:
        return KvHandle(self, block_id)

    def window_view(self, layer_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._rings[layer_id].ordered()

    def full_length(self, block_id: int) -> int:
        return self._full[block_id].length

    def ring_length(self, layer_id: int) -> int:
        return self._rings[layer_id].length

    def lengths(self) -> dict:
        return {
            "full": {b: s.length for b, s in self._full.items()},
            "ring": {l: r.length for l, r in self._rings.items()},
        }

    def resident_bytes(self) -> int:
        return sum(s.nbytes() for s in self._full.values()) + sum(
            r.nbytes() for r in self._rings.values()
        )


def gather_blocks(handle: KvHandle, blocks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate the selected key/value blocks in ascending block order.

    The final (ragged) block is truncated at the store's current length.
    Returns (K, V, positions).
    """
    k, v = handle.view()
    t = k.shape[0]
    B = handle.arena.block_size
    blocks = sorted(set(int(b) for b in blocks))
    positions = []
    for b in blocks:
        lo = b * B
        if b < 0 or lo >= t:
            raise IndexError(f"block {b} out of range for a store of {t} tokens")
        positions.extend(range(lo, min(t, lo + B)))
    pos = np.asarray(positions, dtype=np.int64)
    return k[pos].copy(), v[pos].copy(), pos


@dataclass
class LayerMemory:
    layer: int
    role: str
    cached_tokens: int
    bytes: int


@dataclass
class MemoryReport:
    """Analytic KV cache footprint for one layout at one context length."""

    context_len: int
    element_bytes: int
    n_kv_heads: int
    head_dim: int
    window: int
    layers: list[LayerMemory] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.layers)

    @property
    def baseline_bytes(self) -> int:
        per_full = self.context_len * self.n_kv_heads * self.head_dim * 2 * self.element_bytes
        return per_full * len(self.layers)

    @property
    def reduction_ratio(self) -> float:
        return self.baseline_bytes / self.total_bytes

    @property
    def n_full(self) -> int:
        return sum(1 for e in self.layers if e.role == "full")

    def to_json_dict(self) -> dict:
        return {
            "context_len": self.context_len,
            "element_bytes": self.element_bytes,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "window": self.window,
            "layers": [
                {"layer": e.layer, "role": e.role, "cached_tokens": e.cached_tokens, "bytes": e.bytes}
                for e in self.layers
            ],
            "total_bytes": self.total_bytes,
            "baseline_bytes": self.baseline_bytes,
            "reduction_ratio": self.reduction_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [
            f"context {self.context_len} tokens | kv heads {self.n_kv_heads} x d {self.head_dim}"
            f" | {self.element_bytes} B/elem | window {self.window}",
            f"{'layer':>5}  {'role':<6}  {'tokens':>10}  {'bytes':>14}",
        ]
        for e in self.layers:
            lines.append(f"{e.layer:>5}  {e.role:<6}  {e.cached_tokens:>10}  {e.bytes:>14}")
        lines.append(
            f"total {self.total_bytes} B | all-full baseline {self.baseline_bytes} B"
            f" | reduction {self.reduction_ratio:.2f}x"
        )
        return "\n".join(lines)


def memory_report(cfg, context_len: int, element_bytes: int = 2) -> MemoryReport:
    """Per-layer KV bytes for cfg's layout plus the all-full baseline ratio.

    Full layers cache context_len tokens; sparse layers cache min(context_len,
    window) in their ring buffers. element_bytes is a hypothetical storage
    width for production-scale byte figures (the ratio is width-independent).
    """
    from .model import build_hybrid_stack, LayerRole

    stack = build_hybrid_stack(cfg.n_layers, cfg.sparse_per_full)
    per_token = cfg.n_kv_heads * cfg.head_dim * 2 * element_bytes
    report = MemoryReport(
        context_len=context_len,
        element_bytes=element_bytes,
        n_kv_heads=cfg.n_kv_heads,
        head_dim=cfg.head_dim,
        window=cfg.window,
    )
    for i, role in enumerate(stack.roles):
        tokens = context_len if role == LayerRole.FULL else min(context_len, cfg.window)
        report.layers.append(
            LayerMemory(
                layer=i,
                role="full" if role == LayerRole.FULL else "sparse",
                cached_tokens=tokens,
                bytes=tokens * per_token,
            )
        )
    return report
