"""Multi-head self-attention over 2-D feature maps.

Four variants share one code path:

* ``standard_mhsa``: full n x n attention, n = H*W.
* ``efficient_mhsa``: keys and values are spatially projected to an h x w
  grid first, so the similarity matrix is n x k with k = h*w.
* ``efficient_mhsa_relpos``: the same, with learned relative-position logits
  along height and width added before the scaled softmax.
* ``decoder_cross_mhsa``: queries come from a high-resolution skip map,
  keys/values from the coarser decoder stream.

All of them return the head-merged, output-projected map; residual
connections belong to the calling block.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

PROJECTIONS = ("bilinear", "maxpool")


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    reduced_size: int = 8
    projection: str = "bilinear"
    use_relpos: bool = True
    model_channels: int | None = None

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError(f"heads must be positive, got {self.heads}")
        if self.reduced_size < 1:
            raise ConfigError(f"reduced_size must be >= 1, got {self.reduced_size}")
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")
        if self.model_channels is not None and self.model_channels % self.heads:
            raise ConfigError(
                f"model_channels={self.model_channels} is not divisible by heads={self.heads}"
            )

    @property
    def head_dim(self) -> int:
        if self.model_channels is None:
            raise ConfigError("head_dim needs model_channels to be set")
        return self.model_channels // self.heads

    def with_channels(self, channels: int) -> "AttentionConfig":
        return replace(self, model_channels=channels)

    def reduced_for(self, H: int, W: int) -> int:
        """Side of the projected key/value grid; clamped for small maps."""
        return min(self.reduced_size, H, W)

    def to_dict(self) -> dict:
        return {
            "heads": self.heads,
            "reduced_size": self.reduced_size,
            "projection": self.projection,
            "use_relpos": self.use_relpos,
        }


@dataclass
class RelativePositionTable:
    """Per-head embeddings for relative offsets -(r-1)..(r-1), r = reduced_size."""

    rel_h: Tensor  # heads x (2r-1) x d
    rel_w: Tensor

    @classmethod
    def zeros(cls, cfg: AttentionConfig) -> "RelativePositionTable":
        shape = (cfg.heads, 2 * cfg.reduced_size - 1, cfg.head_dim)
        return cls(Tensor(np.zeros(shape), requires_grad=True), Tensor(np.zeros(shape), requires_grad=True))


@dataclass
class AttentionWeights:
    w_q: Tensor  # C x C x 1 x 1 each
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    relpos: RelativePositionTable | None = None

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "AttentionWeights":
        C = cfg.model_channels
        std = math.sqrt(2.0 / C)

        def kernel():
            return Tensor(rng.normal(0.0, std, size=(C, C, 1, 1)), requires_grad=True)

        relpos = RelativePositionTable.zeros(cfg) if cfg.use_relpos else None
        return cls(kernel(), kernel(), kernel(), kernel(), relpos)

    def named(self) -> dict[str, Tensor]:
        out = {"q": self.w_q, "k": self.w_k, "v": self.w_v, "out": self.w_out}
        if self.relpos is not None:
            out["rel_h"] = self.relpos.rel_h
            out["rel_w"] = self.relpos.rel_w
        return out


# --------------------------------------------------------------------------
# attention-buffer instrumentation


class BufferLog:
    """Sizes of the similarity-matrix buffers allocated while active."""

    def __init__(self):
        self.records: list[tuple[str, tuple, int]] = []

    @property
    def peak_bytes(self) -> int:
        return max((r[2] for r in self.records), default=0)

    @property
    def total_bytes(self) -> int:
        return sum(r[2] for r in self.records)


_LOGS: list[BufferLog] = []


@contextlib.contextmanager
def track_buffers() -> Iterator[BufferLog]:
    log = BufferLog()
    _LOGS.append(log)
    try:
        yield log
    finally:
        _LOGS.remove(log)


def note_buffer(op: str, arr: np.ndarray) -> None:
    for log in _LOGS:
        log.records.append((op, arr.shape, arr.nbytes))


# --------------------------------------------------------------------------
# helpers


def split_heads(t: Tensor, heads: int) -> Tensor:
    """B x C x H x W -> B x heads x n x d."""
    B, C, H, W = t.shape
    return t.reshape(B, heads, C // heads, H * W).transpose(0, 1, 3, 2)


def merge_heads(t: Tensor, H: int, W: int) -> Tensor:
    B, heads, n, d = t.shape
    return t.transpose(0, 1, 3, 2).reshape(B, heads * d, H, W)


def _check_channels(x: Tensor, cfg: AttentionConfig) -> None:
    if cfg.model_channels is None or x.shape[1] != cfg.model_channels:
        raise ConfigError(f"attention expects {cfg.model_channels} channels, input has {x.shape[1]}")


def project_kv(k: Tensor, v: Tensor, cfg: AttentionConfig) -> tuple[Tensor, Tensor]:
    """Spatially reduce key and value maps to s x s, s = min(reduced_size, H, W)."""
    H, W = k.shape[2:]
    s = cfg.reduced_for(H, W)
    if cfg.projection == "bilinear":
        return T.bilinear_resize(k, s, s), T.bilinear_resize(v, s, s)
    return T.adaptive_max_pool_2d(k, s, s), T.adaptive_max_pool_2d(v, s, s)


def offset_index(n_query: int, n_key: int, reduced_size: int) -> np.ndarray:
    """Table row for each (query coord, key coord) pair along one axis.

    Query coordinates are first mapped onto the key grid by flooring
    ``i * n_key / n_query``; the row is ``j - i' + reduced_size - 1``.
    """
    iq = (np.arange(n_query) * n_key) // n_query
    idx = np.arange(n_key)[None, :] - iq[:, None] + reduced_size - 1
    if idx.min() < 0 or idx.max() > 2 * reduced_size - 2:
        raise IndexError(f"relative offsets {idx.min()}..{idx.max()} outside table of size {2 * reduced_size - 1}")
    return idx


def _compact_relative_logits(q: Tensor, query_hw, key_hw, cfg, tables):
    """S_H as (..., H, W, h, 1) and S_W as (..., H, W, 1, w); q is (B, heads, n, d)."""
    B, heads, n, d = q.shape
    H, W = query_hw
    h, w = key_hw
    q5 = q.reshape(B, heads, H, W, d)
    # heads x H x h x d: row per (query row, key row)
    r_h = T.take(tables.rel_h, offset_index(H, h, cfg.reduced_size), axis=1)
    s_h = T.matmul(q5, r_h.transpose(0, 1, 3, 2))  # B x heads x H x W x h
    r_w = T.take(tables.rel_w, offset_index(W, w, cfg.reduced_size), axis=1)  # heads x W x w x d
    s_w = T.matmul(q5.transpose(0, 1, 3, 2, 4), r_w.transpose(0, 1, 3, 2))  # B x heads x W x H x w
    s_w = s_w.transpose(0, 1, 3, 2, 4)
    return s_h.reshape(B, heads, H, W, h, 1), s_w.reshape(B, heads, H, W, 1, w)


def relative_logits(
    q: Tensor,
    cfg: AttentionConfig,
    tables: RelativePositionTable,
    query_hw: tuple[int, int],
    key_hw: tuple[int, int],
) -> tuple[Tensor, Tensor]:
    """Relative-position logits ``S_H, S_W`` of shape (B, heads, n, k).

    ``S_H[i, j] = q_i . rel_h[j_y - i'_y]`` and likewise along width, where
    ``i'`` is the query position mapped onto the key grid.
    """
    B, heads, n, d = q.shape
    h, w = key_hw
    s_h, s_w = _compact_relative_logits(q, query_hw, key_hw, cfg, tables)
    full = (B, heads, query_hw[0], query_hw[1], h, w)
    return (
        T.broadcast_to(s_h, full).reshape(B, heads, n, h * w),
        T.broadcast_to(s_w, full).reshape(B, heads, n, h * w),
    )


def _attend(q_map: Tensor, k_map: Tensor, v_map: Tensor, w: AttentionWeights, cfg: AttentionConfig, relpos: bool, op: str) -> Tensor:
    """Scaled dot-product attention of q_map's pixels over k_map/v_map's pixels."""
    heads, d = cfg.heads, cfg.head_dim
    H, W = q_map.shape[2:]
    h, wk = k_map.shape[2:]
    q = split_heads(q_map, heads)
    k = split_heads(k_map, heads)
    v = split_heads(v_map, heads)
    logits = T.matmul(q, k.transpose(0, 1, 3, 2))  # B x heads x n x k
    note_buffer(op, logits.data)
    if relpos:
        if w.relpos is None:
            raise ConfigError("relative position tables are missing from the attention weights")
        B, _, n, kk = logits.shape
        s_h, s_w = _compact_relative_logits(q, (H, W), (h, wk), cfg, w.relpos)
        logits = (logits.reshape(B, heads, H, W, h, wk) + s_h + s_w).reshape(B, heads, n, kk)
    probs = T.softmax(T.mul(logits, 1.0 / math.sqrt(d)), axis=-1)
    out = T.matmul(probs, v)
    return T.conv2d(merge_heads(out, H, W), w.w_out)


def standard_mhsa(x: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    _check_channels(x, cfg)
    q, k, v = (T.conv2d(x, m) for m in (w.w_q, w.w_k, w.w_v))
    return _attend(q, k, v, w, cfg, relpos=False, op="standard_mhsa")


def efficient_mhsa(x: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    _check_channels(x, cfg)
    q, k, v = (T.conv2d(x, m) for m in (w.w_q, w.w_k, w.w_v))
    k, v = project_kv(k, v, cfg)
    return _attend(q, k, v, w, cfg, relpos=False, op="efficient_mhsa")


def efficient_mhsa_relpos(x: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    _check_channels(x, cfg)
    if not cfg.use_relpos:
        raise ConfigError("efficient_mhsa_relpos called with use_relpos disabled")
    q, k, v = (T.conv2d(x, m) for m in (w.w_q, w.w_k, w.w_v))
    k, v = project_kv(k, v, cfg)
    return _attend(q, k, v, w, cfg, relpos=True, op="efficient_mhsa_relpos")


def decoder_cross_mhsa(hi: Tensor, lo: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    """Queries from the high-resolution skip ``hi``; keys/values from decoder stream ``lo``."""
    _check_channels(hi, cfg)
    _check_channels(lo, cfg)
    (H, W), (h, wl) = hi.shape[2:], lo.shape[2:]
    if h >= H or wl >= W:
        raise ConfigError(f"decoder attention needs lo coarser than hi, got lo {h}x{wl} vs hi {H}x{W}")
    q = T.conv2d(hi, w.w_q)
    k, v = T.conv2d(lo, w.w_k), T.conv2d(lo, w.w_v)
    k, v = project_kv(k, v, cfg)
    return _attend(q, k, v, w, cfg, relpos=cfg.use_relpos, op="decoder_cross_mhsa")


def encoder_attention(x: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    """The variant a transformer encoder block uses for ``cfg``."""
    return efficient_mhsa_relpos(x, w, cfg) if cfg.use_relpos else efficient_mhsa(x, w, cfg)
