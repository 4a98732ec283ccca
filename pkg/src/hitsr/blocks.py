"""Composite sub-networks: SE, feature extractors, PAR, MLP, transformer
blocks, resamplers, and the long-skip fusion.

Parameters live in a :class:`ParamRegistry` under unique dotted names, in
deterministic construction order, so checkpoints and Adam moments can be
addressed by name. Every block is a pure function of its inputs given the
registry contents.
"""

from __future__ import annotations

import numpy as np

from . import attention as A
from . import tensor as T
from . import trace
from .errors import ConfigurationError, ContractError, DimensionError
from .rng import RngState
from .tensor import Tensor


class ParamRegistry:
    """Named tensors plus their trainable flags, insertion-ordered."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: set[str] = set()

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=trainable)
        self._params[name] = t
        if trainable:
            self._trainable.add(name)
        return t

    def adopt(self, name: str, t: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t.requires_grad = trainable
        self._params[name] = t
        if trainable:
            self._trainable.add(name)
        return t

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return name in self._trainable

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if n in self._trainable]

    def param_count(self) -> int:
        return sum(t.size for n, t in self._params.items() if n in self._trainable)

    def zero_all(self) -> None:
        """Test hook: overwrite every trainable value with zeros in place."""
        for n in self._trainable:
            self._params[n].data[...] = 0.0

    def load_arrays(self, arrays: dict) -> None:
        unknown = set(arrays) - set(self._params)
        if unknown:
            raise ContractError(f"unknown parameter names: {sorted(unknown)[:5]}")
        for name, arr in arrays.items():
            t = self._params[name]
            if tuple(arr.shape) != t.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {t.shape}")
            # copy into the existing buffer: BLAS results are sensitive to
            # buffer alignment at the ulp level, so a resumed run must
            # reuse the same allocations a fresh run would have
            t.data[...] = arr


def init_weight(rng: RngState, shape) -> np.ndarray:
    return rng.truncated_normal(shape, std=0.02)


class Linear:
    def __init__(self, reg: ParamRegistry, name: str, din: int, dout: int,
                 rng: RngState, bias: bool = True, trainable: bool = True):
        self.w = reg.add(f"{name}.w", init_weight(rng, (din, dout)), trainable)
        self.b = reg.add(f"{name}.b", np.zeros(dout), trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        return T.add(out, self.b) if self.b is not None else out


class Conv2d:
    def __init__(self, reg: ParamRegistry, name: str, cin: int, cout: int, k: int,
                 rng: RngState, stride: int = 1, padding: int = 0, bias: bool = True,
                 trainable: bool = True):
        self.w = reg.add(f"{name}.w", init_weight(rng, (cout, cin, k, k)), trainable)
        self.b = reg.add(f"{name}.b", np.zeros(cout), trainable) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


def tokens_to_grid(x: Tensor, grid: tuple) -> Tensor:
    """(B, L, D) row-major tokens -> (B, D, H, W)."""
    B, L, D = x.shape
    H, W = grid
    if L != H * W:
        raise DimensionError(f"token count {L} != grid {H}x{W}")
    t = T.reshape(x, (B, H, W, D))
    return T.transpose(t, (0, 3, 1, 2))


def grid_to_tokens(x: Tensor) -> Tensor:
    """(B, D, H, W) -> (B, H*W, D) row-major tokens."""
    B, D, H, W = x.shape
    t = T.transpose(x, (0, 2, 3, 1))
    return T.reshape(t, (B, H * W, D))


# ----------------------------------------------------------------------
# SE module
# ----------------------------------------------------------------------

class SEModule:
    """Channel reweighting: pool -> linear -> GELU -> linear -> sigmoid
    -> elementwise multiply. Both linear maps keep width C."""

    def __init__(self, reg: ParamRegistry, name: str, channels: int, rng: RngState):
        self.channels = channels
        self.fc1 = Linear(reg, f"{name}.fc1", channels, channels, rng)
        self.fc2 = Linear(reg, f"{name}.fc2", channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"SE expects (B, {self.channels}, H, W), got {x.shape}")
        s = T.global_avg_pool(x)
        s = T.sigmoid(self.fc2(T.gelu(self.fc1(s))))
        s = T.reshape(s, (x.shape[0], self.channels, 1, 1))
        return T.mul(x, s)


def se_forward(se: SEModule, x: Tensor) -> Tensor:
    return se(x)


# ----------------------------------------------------------------------
# feature extractor
# ----------------------------------------------------------------------

class FeatureExtractor:
    """Stack of residual units: 3x3 conv + GELU -> SE -> 1x1 conv -> add.

    depth is 3 for the LR and low-resolution reference streams, 1 for the
    high-resolution reference stream. A 3x3 conv lifts 3-channel images
    to the working width first.
    """

    def __init__(self, reg: ParamRegistry, name: str, rng: RngState, depth: int,
                 in_channels: int = 3, width: int = 64, use_se: bool = True):
        if depth not in (1, 3):
            raise ConfigurationError(f"feature extractor depth must be 1 or 3, got {depth}")
        self.depth = depth
        self.width = width
        self.lift = (Conv2d(reg, f"{name}.lift", in_channels, width, 3, rng, padding=1)
                     if in_channels != width else None)
        self.units = []
        for i in range(depth):
            conv3 = Conv2d(reg, f"{name}.u{i}.conv3", width, width, 3, rng, padding=1)
            se = SEModule(reg, f"{name}.u{i}.se", width, rng) if use_se else None
            conv1 = Conv2d(reg, f"{name}.u{i}.conv1", width, width, 1, rng)
            self.units.append((conv3, se, conv1))

    def __call__(self, x: Tensor) -> Tensor:
        if self.lift is not None:
            x = self.lift(x)
        elif x.shape[1] != self.width:
            raise DimensionError(f"extractor expects {self.width} channels, got {x.shape}")
        for conv3, se, conv1 in self.units:
            y = T.gelu(conv3(x))
            if se is not None:
                y = se(y)
            y = conv1(y)
            x = T.add(x, y)
            trace.emit("fe_residual")
        return x


def feature_extract(extractor: FeatureExtractor, img_or_feat: Tensor) -> Tensor:
    return extractor(img_or_feat)


# ----------------------------------------------------------------------
# PAR block
# ----------------------------------------------------------------------

class PARBlock:
    """Post-attention residual refinement: tokens -> grid, two conv
    residual pairs (3x3 + ReLU twice, skip), tokens again, linear + GELU.

    Runs at head width; the transformer block folds heads into the batch
    axis so one PAR weight set serves every head."""

    def __init__(self, reg: ParamRegistry, name: str, width: int, rng: RngState):
        self.width = width
        self.c1 = Conv2d(reg, f"{name}.c1", width, width, 3, rng, padding=1)
        self.c2 = Conv2d(reg, f"{name}.c2", width, width, 3, rng, padding=1)
        self.c3 = Conv2d(reg, f"{name}.c3", width, width, 3, rng, padding=1)
        self.c4 = Conv2d(reg, f"{name}.c4", width, width, 3, rng, padding=1)
        self.fc = Linear(reg, f"{name}.fc", width, width, rng)

    def __call__(self, tokens: Tensor, grid: tuple) -> Tensor:
        B, L, C = tokens.shape
        if C != self.width:
            raise DimensionError(f"PAR width {self.width} != token dim {C}")
        g = tokens_to_grid(tokens, grid)
        u = T.relu(self.c2(T.relu(self.c1(g))))
        g = T.add(g, u)
        u = T.relu(self.c4(T.relu(self.c3(g))))
        g = T.add(g, u)
        t = grid_to_tokens(g)
        return T.gelu(self.fc(t))


def par_forward(par: PARBlock, tokens: Tensor, grid: tuple) -> Tensor:
    return par(tokens, grid)


# ----------------------------------------------------------------------
# MLP
# ----------------------------------------------------------------------

class Mlp:
    def __init__(self, reg: ParamRegistry, name: str, dim: int, hidden: int, rng: RngState):
        self.fc1 = Linear(reg, f"{name}.fc1", dim, hidden, rng)
        self.fc2 = Linear(reg, f"{name}.fc2", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class LayerNorm:
    def __init__(self, reg: ParamRegistry, name: str, dim: int):
        self.g = reg.add(f"{name}.g", np.ones(dim))
        self.b = reg.add(f"{name}.b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


# ----------------------------------------------------------------------
# transformer block
# ----------------------------------------------------------------------

class BlockToggles:
    """Component switches shared by blocks and the model builder."""

    def __init__(self, use_self=True, use_cross=True, use_se=True, use_lsc=True,
                 use_par=True, use_gating=True):
        if not (use_self or use_cross):
            raise ConfigurationError("at least one attention branch must stay enabled")
        self.use_self = use_self
        self.use_cross = use_cross
        self.use_se = use_se
        self.use_lsc = use_lsc
        self.use_par = use_par
        self.use_gating = use_gating


class TransformerBlock:
    """Depth-2 window transformer: local-window gated attention then a
    shifted-window repeat, each as [norm -> attention -> PAR -> W_O ->
    residual] followed by [norm -> MLP -> residual].

    The gate scalars and the relative-position table are shared by both
    depths of the block; pre-norm is the default, post-norm sits behind
    norm_style for ablation.
    """

    def __init__(self, reg: ParamRegistry, name: str, cfg: A.AttentionConfig,
                 rng: RngState, depth: int = 2, toggles: BlockToggles | None = None,
                 gating_init: float = 1.0, mlp_ratio: float = 4.0,
                 norm_style: str = "pre"):
        if norm_style not in ("pre", "post"):
            raise ConfigurationError(f"norm_style must be pre or post, got {norm_style!r}")
        tg = toggles or BlockToggles()
        self.name = name
        self.cfg = cfg
        self.depth = depth
        self.toggles = tg
        self.norm_style = norm_style
        D = cfg.embed_dim
        hidden = int(D * mlp_ratio)

        self.rpe = A.RelPosBias.create(cfg.window_size, cfg.num_heads, rng)
        reg.adopt(f"{name}.rpe", self.rpe.table)
        self.gating = None
        if tg.use_gating and tg.use_self and tg.use_cross:
            self.gating = A.GatingParams.create(cfg.num_heads, init=gating_init,
                                                label=name)
            reg.adopt(f"{name}.gate", self.gating.lam)

        self.layers = []
        for d in range(depth):
            p = f"{name}.d{d}"
            lay = {
                "ln1": LayerNorm(reg, f"{p}.ln1", D),
                "ln_ref": LayerNorm(reg, f"{p}.ln_ref", D) if tg.use_cross else None,
                "wo": Linear(reg, f"{p}.wo", D, D, rng),
                "par": (PARBlock(reg, f"{p}.par", cfg.head_dim, rng)
                        if tg.use_par else None),
                "ln2": LayerNorm(reg, f"{p}.ln2", D),
                "mlp": Mlp(reg, f"{p}.mlp", D, hidden, rng),
            }
            qw = Linear(reg, f"{p}.wq", D, D, rng) if tg.use_self else None
            kw = Linear(reg, f"{p}.wk", D, D, rng)
            vw = Linear(reg, f"{p}.wv", D, D, rng)
            rw = Linear(reg, f"{p}.wq_ref", D, D, rng) if tg.use_cross else None
            lay["qkv"] = A.QKVWeights(
                wq=qw.w if qw else None, bq=qw.b if qw else None,
                wk=kw.w, bk=kw.b, wv=vw.w, bv=vw.b,
                wq_ref=rw.w if rw else None, bq_ref=rw.b if rw else None)
            self.layers.append(lay)

    def _attention_sublayer(self, h: Tensor, ref: Tensor | None, grid: tuple,
                            lay: dict, shifted: bool, label: str) -> Tensor:
        cfg = self.cfg
        B, L, D = h.shape
        H, W = grid
        k, heads = cfg.window_size, cfg.num_heads
        ws = A.window_partition(T.reshape(h, (B, H, W, D)), k, shifted)
        ref_tokens = None
        if self.toggles.use_cross and ref is not None:
            rn = lay["ln_ref"](ref)
            rws = A.window_partition(T.reshape(rn, (B, H, W, D)), k, shifted)
            ref_tokens = rws.tokens
        q, kk, v, qr = A.qkv_project(ws.tokens, ref_tokens, cfg, lay["qkv"])
        att = A.gated_double_attention(q, kk, v, qr, gating=self.gating,
                                       rpe=self.rpe, label=label)
        trace.emit("attention_call", block=self.name, shifted=shifted)
        # fold heads into the batch axis and restore the full grid
        nw = ws.num_windows
        t = T.transpose(att, (1, 0, 2, 3))
        t = T.reshape(t, (heads * B * nw, k * k, cfg.head_dim))
        ws2 = A.WindowSet(tokens=t, batch=heads * B, grid=grid, window=k,
                          shifted=shifted)
        g2 = A.window_reverse(ws2)
        tok = T.reshape(g2, (heads * B, L, cfg.head_dim))
        if lay["par"] is not None:
            tok = lay["par"](tok, grid)
        t = T.reshape(tok, (heads, B, L, cfg.head_dim))
        t = T.transpose(t, (1, 0, 2, 3))
        return A.merge_heads(t, lay["wo"].w, lay["wo"].b)

    def __call__(self, x: Tensor, ref: Tensor | None, grid: tuple) -> Tensor:
        if x.shape[1] != grid[0] * grid[1]:
            raise DimensionError(f"token count {x.shape[1]} != grid {grid}")
        if ref is not None and ref.shape != x.shape:
            raise DimensionError(f"ref tokens {ref.shape} != lr tokens {x.shape}")
        for d, lay in enumerate(self.layers):
            shifted = d % 2 == 1
            label = f"{self.name}.d{d}"
            if self.norm_style == "pre":
                att = self._attention_sublayer(lay["ln1"](x), ref, grid, lay,
                                               shifted, label)
                x = T.add(x, att)
                x = T.add(x, lay["mlp"](lay["ln2"](x)))
            else:
                att = self._attention_sublayer(x, ref, grid, lay, shifted, label)
                x = lay["ln1"](T.add(x, att))
                x = lay["ln2"](T.add(x, lay["mlp"](x)))
        return x


def transformer_block_forward(block: TransformerBlock, x_lr_tokens: Tensor,
                              ref_feat_tokens: Tensor | None, grid: tuple) -> Tensor:
    return block(x_lr_tokens, ref_feat_tokens, grid)


# ----------------------------------------------------------------------
# long skip fusion and resamplers
# ----------------------------------------------------------------------

class LSCFuse:
    """Concat a block output with its earlier same-resolution partner and
    project back to width D. Weight [I; 0] reproduces the current input."""

    def __init__(self, reg: ParamRegistry, name: str, dim: int, rng: RngState):
        self.proj = Linear(reg, f"{name}.proj", 2 * dim, dim, rng)

    def __call__(self, current: Tensor, earlier: Tensor) -> Tensor:
        return lsc_concat_fuse(current, earlier, self.proj.w, self.proj.b)


def lsc_concat_fuse(current: Tensor, earlier: Tensor, w: Tensor,
                    b: Tensor | None = None) -> Tensor:
    if current.shape != earlier.shape:
        raise DimensionError(f"lsc shapes differ: {current.shape} vs {earlier.shape}")
    cat = T.concat([current, earlier], axis=-1)
    out = T.matmul(cat, w)
    return T.add(out, b) if b is not None else out


class Upsampler:
    """1x1 conv to 4x channels, pixel shuffle r=2, then add the fixed
    sinusoidal table for the new grid."""

    def __init__(self, reg: ParamRegistry, name: str, dim: int, rng: RngState):
        self.dim = dim
        self.conv = Conv2d(reg, f"{name}.conv", dim, 4 * dim, 1, rng)
        self._spe_cache: dict = {}

    def __call__(self, tokens: Tensor, grid: tuple):
        H, W = grid
        g = tokens_to_grid(tokens, grid)
        g = T.pixel_shuffle(self.conv(g), 2)
        out = grid_to_tokens(g)
        new_grid = (2 * H, 2 * W)
        key = (new_grid, out.data.dtype)
        if key not in self._spe_cache:
            self._spe_cache[key] = Tensor(
                A.spe(new_grid, self.dim).astype(out.data.dtype))
        out = T.add(out, self._spe_cache[key])
        trace.emit("upsample", grid=new_grid)
        return out, new_grid


class Downsampler:
    """3x3 stride-2 conv. The exact-geometry conv contract needs an odd
    padded extent, so the grid is padded by one row/column at the top and
    left (the stride-2 window placement never reads a bottom/right pad)."""

    def __init__(self, reg: ParamRegistry, name: str, dim: int, rng: RngState):
        self.conv = Conv2d(reg, f"{name}.conv", dim, dim, 3, rng, stride=2, padding=0)

    def __call__(self, tokens: Tensor, grid: tuple):
        H, W = grid
        if H % 2 or W % 2:
            raise ConfigurationError(f"downsample needs even extents, got {grid}")
        g = tokens_to_grid(tokens, grid)
        g = self.conv(T.pad2d(g, (1, 0, 1, 0)))
        new_grid = (H // 2, W // 2)
        trace.emit("downsample", grid=new_grid)
        return grid_to_tokens(g), new_grid


def upsample(up: Upsampler, tokens: Tensor, grid: tuple):
    return up(tokens, grid)


def downsample(down: Downsampler, tokens: Tensor, grid: tuple):
    return down(tokens, grid)
