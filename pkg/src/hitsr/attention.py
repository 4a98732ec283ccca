"""Windowed multi-head attention over two image distributions.

The core mechanism: per window, self-attention (LR queries against LR
keys) and cross-attention (reference queries against the same LR keys)
are softmaxed separately and fused per head by a learnable gate,

    A_h = (1 - sigmoid(lambda_h)) * softmax(Q_lr K^T / sqrt(D_h) + rpe)
        +      sigmoid(lambda_h)  * softmax(Q_ref K^T / sqrt(D_h) + rpe),

then applied to the LR values. Both terms are row-stochastic, so the
convex combination is too. Shifted windows cyclically roll the grid by
half a window with no seam masking; wraparound tokens attend freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import trace
from .errors import ConfigurationError, ContractError, DimensionError, NumericError
from .rng import RngState
from .tensor import Tensor


@dataclass
class AttentionConfig:
    embed_dim: int
    num_heads: int
    window_size: int = 8
    shift: int = -1  # -1 means window_size // 2

    def __post_init__(self):
        if self.shift == -1:
            self.shift = self.window_size // 2
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0 <= self.shift < self.window_size:
            raise ConfigurationError(
                f"shift {self.shift} outside [0, {self.window_size})")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class GatingParams:
    """One learnable gate scalar per head; sigma(lam) weights the cross
    branch. Initialized to 1 so cross-attention starts dominant."""

    lam: Tensor
    label: str = ""

    @classmethod
    def create(cls, num_heads: int, init: float = 1.0, label: str = "") -> "GatingParams":
        lam = Tensor(np.full(num_heads, init), requires_grad=True)
        return cls(lam=lam, label=label)

    @property
    def num_heads(self) -> int:
        return self.lam.shape[0]

    def sigma(self) -> Tensor:
        return T.sigmoid(self.lam)

    def sigma_values(self) -> np.ndarray:
        with T.no_grad():
            return T.sigmoid(self.lam).data.copy()


def relative_position_index(window: int) -> np.ndarray:
    """Map (query, key) intra-window pairs to rows of the (2k-1)^2 table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]  # (2, k^2, k^2)
    rel = rel + window - 1
    return (rel[0] * (2 * window - 1) + rel[1]).astype(np.int64)


class RelPosBias:
    """Learnable relative-position logits, one (2k-1)^2 table per head,
    shared between the self and cross branches of a block."""

    def __init__(self, table: Tensor, window: int):
        expect = (2 * window - 1) ** 2
        if table.ndim != 2 or table.shape[0] != expect:
            raise DimensionError(
                f"rpe table shape {table.shape} != ({expect}, num_heads) for k={window}")
        self.table = table
        self.window = window
        self.index = relative_position_index(window)

    @classmethod
    def create(cls, window: int, num_heads: int, rng: RngState) -> "RelPosBias":
        table = Tensor(rng.truncated_normal(((2 * window - 1) ** 2, num_heads)),
                       requires_grad=True)
        return cls(table, window)

    def bias(self) -> Tensor:
        """(num_heads, k^2, k^2) additive pre-softmax logits."""
        k2 = self.window * self.window
        rows = T.gather_rows(self.table, self.index.reshape(-1))
        rows = T.reshape(rows, (k2, k2, self.table.shape[1]))
        return T.transpose(rows, (2, 0, 1))


@dataclass
class WindowSet:
    """Tokens regrouped into non-overlapping k-by-k windows.

    tokens has shape (B * num_windows, k^2, D) with batch-major window
    order, windows enumerated row-major over the grid.
    """

    tokens: Tensor
    batch: int
    grid: tuple
    window: int
    shifted: bool
    _consumed: bool = field(default=False, repr=False)

    @property
    def num_windows(self) -> int:
        return (self.grid[0] // self.window) * (self.grid[1] // self.window)


def window_partition(x: Tensor, window: int, shifted: bool) -> WindowSet:
    """Split (B, H, W, D) into k-by-k windows; shifted variants cyclically
    roll the grid by -k/2 first."""
    if x.ndim != 4:
        raise DimensionError(f"window_partition expects (B, H, W, D), got {x.shape}")
    B, H, W, D = x.shape
    if H % window or W % window:
        raise ConfigurationError(
            f"grid H={H}, W={W} not divisible by window k={window}")
    if shifted:
        s = window // 2
        x = T.roll(x, (-s, -s), (1, 2))
    t = T.reshape(x, (B, H // window, window, W // window, window, D))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    tokens = T.reshape(t, (B * (H // window) * (W // window), window * window, D))
    return WindowSet(tokens=tokens, batch=B, grid=(H, W), window=window, shifted=shifted)


def window_reverse(ws: WindowSet) -> Tensor:
    """Exact inverse of window_partition, including the un-shift."""
    if ws._consumed:
        raise ContractError("window set already reversed")
    B, (H, W), k = ws.batch, ws.grid, ws.window
    nh, nw = H // k, W // k
    D = ws.tokens.shape[-1]
    if ws.tokens.shape != (B * nh * nw, k * k, D):
        raise DimensionError(
            f"window tokens {ws.tokens.shape} inconsistent with metadata "
            f"B={B} grid={ws.grid} k={k}")
    t = T.reshape(ws.tokens, (B, nh, nw, k, k, D))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    x = T.reshape(t, (B, H, W, D))
    if ws.shifted:
        s = k // 2
        x = T.roll(x, (s, s), (1, 2))
    ws._consumed = True
    return x


def spe(shape: tuple, dim: int) -> np.ndarray:
    """Fixed 2d sinusoidal position table, (H*W, dim).

    The first dim/2 channels encode the row index, the rest the column
    index; channel pair i oscillates at 1 / 10000^(2i/dim). Added to the
    token stream after every upsampler.
    """
    if dim % 2:
        raise ConfigurationError(f"spe needs an even dim, got {dim}")
    H, W = shape

    def axis_table(n: int, width: int) -> np.ndarray:
        j = np.arange(width)
        den = np.power(10000.0, 2.0 * (j // 2) / dim)
        ang = np.arange(n, dtype=np.float64)[:, None] / den[None, :]
        out = np.where(j % 2 == 0, np.sin(ang), np.cos(ang))
        return out

    half = dim // 2
    rows = axis_table(H, half)
    cols = axis_table(W, half)
    table = np.empty((H, W, dim))
    table[..., :half] = rows[:, None, :]
    table[..., half:] = cols[None, :, :]
    return table.reshape(H * W, dim).astype(T.default_dtype())


@dataclass
class QKVWeights:
    """Four projections: self queries, keys, values (all LR stream), and
    reference queries. Keys and values never come from the reference."""

    wq: Tensor | None
    bq: Tensor | None
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wq_ref: Tensor | None
    bq_ref: Tensor | None


def _project_heads(tokens: Tensor, w: Tensor, b: Tensor | None, num_heads: int) -> Tensor:
    N, L, D = tokens.shape
    out = T.matmul(tokens, w)
    if b is not None:
        out = T.add(out, b)
    out = T.reshape(out, (N, L, num_heads, D // num_heads))
    return T.transpose(out, (0, 2, 1, 3))


def qkv_project(x_lr: Tensor, q_src_ref: Tensor | None, cfg: AttentionConfig,
                weights: QKVWeights):
    """Project window tokens to per-head (N, num_heads, T, head_dim).

    Returns (q_lr, k_lr, v_lr, q_ref); q_lr is None when the self branch
    is disabled, q_ref is None when no reference stream is given.
    """
    if x_lr.ndim != 3 or x_lr.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"token shape {x_lr.shape} != (N, T, {cfg.embed_dim})")
    if q_src_ref is not None and q_src_ref.shape != x_lr.shape:
        raise DimensionError(
            f"reference tokens {q_src_ref.shape} do not match LR tokens {x_lr.shape}")
    h = cfg.num_heads
    q_lr = _project_heads(x_lr, weights.wq, weights.bq, h) if weights.wq is not None else None
    k_lr = _project_heads(x_lr, weights.wk, weights.bk, h)
    v_lr = _project_heads(x_lr, weights.wv, weights.bv, h)
    q_ref = None
    if q_src_ref is not None:
        if weights.wq_ref is None:
            raise ConfigurationError("reference tokens given but wq_ref is absent")
        q_ref = _project_heads(q_src_ref, weights.wq_ref, weights.bq_ref, h)
    return q_lr, k_lr, v_lr, q_ref


def _attn_matrix(q: Tensor, k: Tensor, rpe_bias: Tensor | None, scale: float,
                 label: str) -> Tensor:
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    if rpe_bias is not None:
        logits = T.add(logits, rpe_bias)
    if not np.isfinite(logits.data).all():
        raise NumericError(f"non-finite attention logits in {label}")
    return T.softmax(logits, axis=-1)


def gated_double_attention(q_lr: Tensor | None, k_lr: Tensor, v_lr: Tensor,
                           q_ref: Tensor | None, gating: GatingParams | None = None,
                           rpe: RelPosBias | None = None,
                           sigma_override: float | None = None,
                           label: str = "attn") -> Tensor:
    """Fuse self and cross window attention by per-head gates.

    Args:
        q_lr, k_lr, v_lr: (N, heads, T, head_dim) LR-stream projections.
        q_ref: reference queries, same shape, or None for self-only.
        gating: per-head gate parameters; required when both branches run
            unless sigma_override fixes the mix.
        rpe: shared relative-position bias added to both logit sets.
        sigma_override: test/ablation hook; a fixed scalar mix in [0, 1]
            (0 = pure self, 1 = pure cross) bypassing the gates. With
            gating=None and no override, both branches mix at 0.5.

    Returns (N, heads, T, head_dim).
    """
    if q_lr is None and q_ref is None:
        raise ConfigurationError("at least one of q_lr and q_ref is required")
    scale = 1.0 / math.sqrt(k_lr.shape[-1])
    bias = rpe.bias() if rpe is not None else None
    a_self = _attn_matrix(q_lr, k_lr, bias, scale, f"{label}/self") if q_lr is not None else None
    a_cross = _attn_matrix(q_ref, k_lr, bias, scale, f"{label}/cross") if q_ref is not None else None

    if a_self is None:
        attn = a_cross
    elif a_cross is None:
        attn = a_self
    elif sigma_override is not None:
        if not 0.0 <= sigma_override <= 1.0:
            raise ConfigurationError(f"sigma_override {sigma_override} outside [0, 1]")
        attn = T.add(T.scale(a_self, 1.0 - sigma_override), T.scale(a_cross, sigma_override))
    elif gating is None:
        attn = T.add(T.scale(a_self, 0.5), T.scale(a_cross, 0.5))
    else:
        heads = k_lr.shape[1]
        if gating.num_heads != heads:
            raise DimensionError(
                f"gating has {gating.num_heads} heads, attention has {heads}")
        sig = T.reshape(gating.sigma(), (1, heads, 1, 1))
        one = Tensor(np.ones((1, heads, 1, 1)))
        attn = T.add(T.mul(a_self, T.sub(one, sig)), T.mul(a_cross, sig))

    if trace.active():
        rs = attn.data.sum(axis=-1)
        trace.emit("attention", label=label, shifted=None,
                   rowsum_min=float(rs.min()), rowsum_max=float(rs.max()))
    return T.matmul(attn, v_lr)


def merge_heads(heads: Tensor, wo: Tensor, bo: Tensor | None = None) -> Tensor:
    """Concatenate heads channelwise and project: (N, h, T, D_h) -> (N, T, D)."""
    if heads.ndim != 4:
        raise DimensionError(f"merge_heads expects (N, heads, T, head_dim), got {heads.shape}")
    N, h, L, dh = heads.shape
    t = T.transpose(heads, (0, 2, 1, 3))
    t = T.reshape(t, (N, L, h * dh))
    out = T.matmul(t, wo)
    if bo is not None:
        out = T.add(out, bo)
    return out
