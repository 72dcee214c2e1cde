"""Transformer blocks: multi-head (cross-)attention with memory rows, MLP, positions.

All functions accept either a single sequence ``(L, d)`` or a batch
``(B, L, d)``; single sequences are lifted to a batch of one internally.
Parameters live in a flat ``name -> Tensor`` mapping and the dataclasses
below are thin views onto it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

INIT_STD = 0.02
NEG_INF = -1e9

SCALE_MODES = ("per_head", "literal_d")


@dataclass
class AttentionParams:
    """Per-head projections stored side by side: column block ``i`` of ``wq`` is head ``i``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wm: Tensor
    heads: int
    scale_mode: str = "per_head"

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ValueError(f"width {d} not divisible by {self.heads} heads")
        for w in (self.wq, self.wk, self.wv, self.wm):
            if w.shape != (d, d):
                raise ShapeError(f"attention projection has shape {w.shape}, expected {(d, d)}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def scale(self) -> float:
        d = self.width
        return math.sqrt(d // self.heads if self.scale_mode == "per_head" else d)

    @classmethod
    def view(cls, p: Mapping[str, Tensor], prefix: str, heads: int, scale_mode: str = "per_head"):
        return cls(p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"], p[f"{prefix}.wm"], heads, scale_mode)


@dataclass
class MemorySlots:
    visual: Tensor  # (S, d), extends keys/values seen by text queries
    textual: Tensor  # (S, d), extends keys/values seen by image queries

    @property
    def slots(self) -> int:
        return self.visual.shape[0]


@dataclass
class BlockParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def view(cls, p: Mapping[str, Tensor], prefix: str, heads: int, scale_mode: str = "per_head"):
        return cls(
            AttentionParams.view(p, f"{prefix}.attn", heads, scale_mode),
            p[f"{prefix}.ln1.g"],
            p[f"{prefix}.ln1.b"],
            p[f"{prefix}.ln2.g"],
            p[f"{prefix}.ln2.b"],
            p[f"{prefix}.fc1.w"],
            p[f"{prefix}.fc1.b"],
            p[f"{prefix}.fc2.w"],
            p[f"{prefix}.fc2.b"],
        )


# ---------------------------------------------------------------------------
# initializers (numpy side)


def attention_param_specs(d: int) -> dict[str, tuple]:
    """``suffix -> (shape, init)`` for one attention layer; ``init`` is ``normal``, ``zeros`` or ``ones``."""
    return {k: ((d, d), "normal") for k in ("wq", "wk", "wv", "wm")}


def block_param_specs(d: int, mlp_ratio: int = 4) -> dict[str, tuple]:
    hidden = d * mlp_ratio
    out = {f"attn.{k}": v for k, v in attention_param_specs(d).items()}
    out.update(
        {
            "ln1.g": ((d,), "ones"),
            "ln1.b": ((d,), "zeros"),
            "ln2.g": ((d,), "ones"),
            "ln2.b": ((d,), "zeros"),
            "fc1.w": ((d, hidden), "normal"),
            "fc1.b": ((hidden,), "zeros"),
            "fc2.w": ((hidden, d), "normal"),
            "fc2.b": ((d,), "zeros"),
        }
    )
    return out


def init_array(rng: np.random.Generator, shape: tuple, init: str, dtype=np.float32) -> np.ndarray:
    if init == "normal":
        return (rng.standard_normal(shape) * INIT_STD).astype(dtype)
    if init == "zeros":
        return np.zeros(shape, dtype)
    if init == "ones":
        return np.ones(shape, dtype)
    raise ValueError(f"unknown initializer {init!r}")


def sinusoidal_table(length: int, d: int, dtype=np.float64) -> np.ndarray:
    """Fixed sin/cos table; even columns are sines, odd columns cosines."""
    if length < 1 or d < 1:
        raise ValueError("positional table needs length >= 1 and width >= 1")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    rate = np.power(10000.0, -(2 * (i // 2)) / d)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang)).astype(dtype)


def positional_embedding(
    length: int,
    d: int,
    kind: str = "learned",
    rng: Optional[np.random.Generator] = None,
    dtype=np.float32,
) -> np.ndarray:
    """Initial value of a position table.

    ``learned`` tables are random-normal starting points that the caller
    registers as parameters; ``sinusoidal`` tables are deterministic constants.
    """
    if kind == "sinusoidal":
        return sinusoidal_table(length, d, dtype)
    if kind != "learned":
        raise ValueError(f"unknown positional embedding kind {kind!r}")
    if length < 1 or d < 1:
        raise ValueError("positional table needs length >= 1 and width >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    return (rng.standard_normal((length, d)) * INIT_STD).astype(dtype)


# ---------------------------------------------------------------------------
# forward functions


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected (L, d) or (B, L, d), got {x.shape}")
    return x, False


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    x = ad.reshape(x, (b, length, heads, d // heads))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b * heads, length, d // heads))


def _merge_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    _, length, dh = x.shape
    x = ad.reshape(x, (batch, heads, length, dh))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (batch, length, heads * dh))


def attention_weights(
    q: Tensor, k: Tensor, p: AttentionParams, key_valid: Optional[np.ndarray] = None
) -> Tensor:
    """Softmax-normalized attention of shape ``(B*h, L_q, L_k)``; batch-major then head."""
    b = q.shape[0]
    qh = _split_heads(ad.linear(q, p.wq), p.heads)
    kh = _split_heads(ad.linear(k, p.wk), p.heads)
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / p.scale)
    if key_valid is not None:
        bias = np.where(np.asarray(key_valid, dtype=bool), 0.0, NEG_INF).astype(logits.dtype)
        bias = np.broadcast_to(
            np.repeat(bias, p.heads, axis=0)[:, None, :], logits.shape
        )
        logits = ad.add(logits, Tensor(np.ascontiguousarray(bias)))
    return ad.softmax(logits, axis=-1)


def mca(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    p: AttentionParams,
    key_valid: Optional[np.ndarray] = None,
) -> Tensor:
    """Multi-head cross-attention.

    Per head ``i``: ``softmax(Q Wq_i (K Wk_i)^T / scale) V Wv_i``; the heads are
    concatenated and projected by ``wm``. ``key_valid`` is an optional boolean
    ``(B, L_k)`` array; invalid keys receive zero weight.
    """
    d = p.width
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"mca: widths {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]} != {d}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"mca: keys {k.shape} and values {v.shape} disagree")
    if k.shape[-2] == 0:
        raise ShapeError("mca: no keys to attend over")
    q, single = _batched(q)
    k, _ = _batched(k)
    v, _ = _batched(v)
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"mca: batch extents {q.shape[0]} and {k.shape[0]} differ")
    b = q.shape[0]
    if key_valid is not None:
        key_valid = np.asarray(key_valid, dtype=bool).reshape(b, k.shape[1])
    attn = attention_weights(q, k, p, key_valid)
    vh = _split_heads(ad.linear(v, p.wv), p.heads)
    out = ad.linear(_merge_heads(ad.matmul(attn, vh), b, p.heads), p.wm)
    return ad.reshape(out, out.shape[1:]) if single else out


def tile_rows(mem: Tensor, batch: int) -> Tensor:
    """Repeat an ``(S, d)`` table into ``(batch, S, d)``."""
    s = mem.shape[0]
    return ad.reshape(ad.gather(mem, np.tile(np.arange(s), batch)), (batch, s, mem.shape[1]))


def mca_with_memory(
    q: Tensor,
    kv: Tensor,
    mem: Tensor,
    p: AttentionParams,
    key_valid: Optional[np.ndarray] = None,
) -> Tensor:
    """``mca(q, [kv, mem], [kv, mem])``; memory rows are always attendable.

    With zero memory rows this is exactly :func:`mca` on ``kv``.
    """
    if mem.ndim != 2 or mem.shape[1] != kv.shape[-1]:
        raise ShapeError(f"memory {mem.shape} does not match key width {kv.shape[-1]}")
    if mem.shape[0] == 0:
        return mca(q, kv, kv, p, key_valid)
    kvb, single = _batched(kv)
    b = kvb.shape[0]
    ext = ad.concat([kvb, tile_rows(mem, b)], axis=1)
    if key_valid is not None:
        key_valid = np.concatenate(
            [np.asarray(key_valid, dtype=bool).reshape(b, -1), np.ones((b, mem.shape[0]), dtype=bool)], axis=1
        )
    if single:
        ext = ad.reshape(ext, ext.shape[1:])
    return mca(q, ext, ext, p, key_valid)


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b)


def transformer_block(x: Tensor, p: BlockParams, key_valid: Optional[np.ndarray] = None, eps: float = 1e-5) -> Tensor:
    """Pre-norm residual block: ``x + MSA(LN(x))`` then ``+ MLP(LN(.))``."""
    if x.shape[-1] != p.attn.width:
        raise ShapeError(f"transformer_block: width {x.shape[-1]} != {p.attn.width}")
    h = ad.layer_norm(x, p.ln1_g, p.ln1_b, eps)
    x = ad.add(x, mca(h, h, h, p.attn, key_valid))
    h = ad.layer_norm(x, p.ln2_g, p.ln2_b, eps)
    return ad.add(x, mlp(h, p))
