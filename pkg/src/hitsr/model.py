"""Full network assembly and persistence.

The generator maps a low-resolution image plus a high-resolution reference
to a 4x upscaled output: SE-fused feature extraction on both streams, six
window-transformer blocks walking a 1x/2x resolution ladder with long skip
connections, a final pixel-shuffle upsampler, and a 3-channel head. A
bicubic global residual (default on) makes the untrained network degrade
to plain bicubic upscaling.

Checkpoints are a single self-describing binary: magic, version, a JSON
header with the config echo and a tensor directory, then raw
little-endian float payload. Saving the result of a load reproduces the
original file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import attention as A
from . import blocks as B
from . import metrics
from . import tensor as T
from . import trace
from .errors import ConfigurationError, ContractError, DimensionError, FormatError
from .rng import RngState
from .tensor import Tensor

CKPT_MAGIC = b"HITSRCKPT"
CKPT_VERSION = 1

# weights for the reference pyramid are independent of the model seed so
# the fixed extractor plays the role of a pretrained network
_REF_NET_SEED = 900913


@dataclass
class ModelConfig:
    """Architecture hyperparameters; embed width is 64 per head."""

    window: int = 8
    num_heads: int = 4
    depth: int = 2
    pairs: int = 3
    base_size: int = 40
    scale: int = 4
    ref_source: str = "builtin_fixed_seed"
    gating_init: float = 1.0
    mlp_ratio: float = 4.0
    norm_style: str = "pre"
    global_residual: bool = True
    use_self: bool = True
    use_cross: bool = True
    use_se: bool = True
    use_lsc: bool = True
    use_par: bool = True
    use_gating: bool = True

    @property
    def embed_dim(self) -> int:
        return 64 * self.num_heads

    def validate(self) -> None:
        if self.window < 2:
            raise ConfigurationError(f"window must be >= 2, got {self.window}")
        if self.num_heads < 1 or self.depth < 1 or self.pairs < 1:
            raise ConfigurationError(
                f"heads/depth/pairs must be positive, got "
                f"{self.num_heads}/{self.depth}/{self.pairs}")
        if self.scale != 4:
            raise ConfigurationError(f"scale factor is fixed at 4, got {self.scale}")
        if self.base_size % self.window or self.base_size % 2:
            raise ConfigurationError(
                f"base size {self.base_size} must be divisible by window "
                f"{self.window} and by 2")
        if not (self.ref_source == "builtin_fixed_seed"
                or self.ref_source.startswith("file:")):
            raise ConfigurationError(
                f"ref_source must be builtin_fixed_seed or file:<path>, "
                f"got {self.ref_source!r}")
        if not (self.use_self or self.use_cross):
            raise ConfigurationError("at least one attention branch must stay enabled")
        if self.norm_style not in ("pre", "post"):
            raise ConfigurationError(f"norm_style must be pre or post, got {self.norm_style!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class RefFeatureNet:
    """Fixed conv pyramid standing in for a pretrained feature encoder.

    Produces 64-channel maps at half and quarter the reference resolution,
    i.e. exactly the 2h and h block grids. Frozen: weights come from a
    dedicated seed (independent of the model seed) or from a .npz file,
    and are excluded from the trainable parameter count.
    """

    NAMES = ("c1.w", "c1.b", "c2.w", "c2.b", "c3.w", "c3.b")

    def __init__(self, reg: B.ParamRegistry, name: str, ref_source: str):
        rng = RngState(_REF_NET_SEED)
        self.name = name
        self.c1 = B.Conv2d(reg, f"{name}.c1", 3, 32, 3, rng, padding=1, trainable=False)
        self.c2 = B.Conv2d(reg, f"{name}.c2", 32, 64, 4, rng, stride=2, padding=1,
                           trainable=False)
        self.c3 = B.Conv2d(reg, f"{name}.c3", 64, 64, 4, rng, stride=2, padding=1,
                           trainable=False)
        if ref_source.startswith("file:"):
            self._load_weights(reg, ref_source[5:])

    def _load_weights(self, reg: B.ParamRegistry, path: str) -> None:
        try:
            stored = np.load(path)
        except OSError as e:
            raise FormatError(f"cannot read reference weights file {path!r}: {e}")
        missing = [n for n in self.NAMES if n not in stored.files]
        if missing:
            raise FormatError(f"reference weights file lacks arrays {missing}")
        for n in self.NAMES:
            t = reg.get(f"{self.name}.{n}")
            arr = stored[n]
            if tuple(arr.shape) != t.shape:
                raise DimensionError(
                    f"reference weight {n}: file shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def __call__(self, ref: Tensor):
        """(B, 3, 4h, 4w) -> maps at (B, 64, 2h, 2w) and (B, 64, h, w)."""
        a = T.gelu(self.c1(ref))
        hi = T.gelu(self.c2(a))
        lo = T.gelu(self.c3(hi))
        return hi, lo


class HiTSRModel:
    """The generator: parameter registry plus the wiring of the ladder."""

    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.registry = B.ParamRegistry()
        reg = self.registry
        rng = RngState(seed).derive("model-init")
        toggles = B.BlockToggles(cfg.use_self, cfg.use_cross, cfg.use_se,
                                 cfg.use_lsc, cfg.use_par, cfg.use_gating)
        self.toggles = toggles
        D = cfg.embed_dim
        acfg = A.AttentionConfig(embed_dim=D, num_heads=cfg.num_heads,
                                 window_size=cfg.window)

        self.fe_lr = B.FeatureExtractor(reg, "fe_lr", rng, depth=3,
                                        in_channels=3, use_se=toggles.use_se)
        self.embed_lr = B.Linear(reg, "embed_lr", 64, D, rng)
        if toggles.use_cross:
            self.fe_ref_lo = B.FeatureExtractor(reg, "fe_ref_lo", rng, depth=3,
                                                in_channels=64, use_se=toggles.use_se)
            self.fe_ref_hi = B.FeatureExtractor(reg, "fe_ref_hi", rng, depth=1,
                                                in_channels=64, use_se=toggles.use_se)
            self.embed_ref_lo = B.Linear(reg, "embed_ref_lo", 64, D, rng)
            self.embed_ref_hi = B.Linear(reg, "embed_ref_hi", 64, D, rng)

        self.b1, self.b2, self.ups, self.downs = [], [], [], []
        self.fuse_b1, self.fuse_b2 = [], []
        for i in range(cfg.pairs):
            self.b1.append(B.TransformerBlock(
                reg, f"b1_{i}", acfg, rng, depth=cfg.depth, toggles=toggles,
                gating_init=cfg.gating_init, mlp_ratio=cfg.mlp_ratio,
                norm_style=cfg.norm_style))
            if toggles.use_lsc and i > 0:
                self.fuse_b1.append(B.LSCFuse(reg, f"lsc_b1_{i}", D, rng))
            self.ups.append(B.Upsampler(reg, f"up_{i}", D, rng))
            self.b2.append(B.TransformerBlock(
                reg, f"b2_{i}", acfg, rng, depth=cfg.depth, toggles=toggles,
                gating_init=cfg.gating_init, mlp_ratio=cfg.mlp_ratio,
                norm_style=cfg.norm_style))
            if toggles.use_lsc and i > 0:
                self.fuse_b2.append(B.LSCFuse(reg, f"lsc_b2_{i}", D, rng))
            if i < cfg.pairs - 1:
                self.downs.append(B.Downsampler(reg, f"down_{i}", D, rng))
        self.final_up = B.Upsampler(reg, "final_up", D, rng)
        self.head = B.Conv2d(reg, "head", D, 3, 3, rng, padding=1)
        self.refnet = (RefFeatureNet(reg, "refnet", cfg.ref_source)
                       if toggles.use_cross else None)

    def _check_inputs(self, lr: Tensor, ref: Tensor | None):
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise DimensionError(f"lr image must be (B, 3, h, w), got {lr.shape}")
        B_, _, h, w = lr.shape
        k = self.cfg.window
        if h % k or w % k or h % 2 or w % 2:
            raise DimensionError(
                f"lr extents ({h}, {w}) must be divisible by window {k} and by 2")
        if self.toggles.use_cross:
            if ref is None:
                raise DimensionError("model uses cross-attention but got no reference")
            if ref.shape != (B_, 3, 4 * h, 4 * w):
                raise DimensionError(
                    f"reference must be (B, 3, {4 * h}, {4 * w}) = 4x the lr "
                    f"size, got {ref.shape}")

    def forward(self, lr: Tensor, ref: Tensor | None, training: bool = True) -> Tensor:
        self._check_inputs(lr, ref)
        cfg = self.cfg
        h, w = lr.shape[2], lr.shape[3]
        grid = (h, w)

        x = B.grid_to_tokens(self.fe_lr(lr))
        x = self.embed_lr(x)
        trace.emit("stage", name="fe_lr", grid=grid)
        ref_lo = ref_hi = None
        if self.toggles.use_cross:
            raw_hi, raw_lo = self.refnet(ref)
            ref_lo = self.embed_ref_lo(B.grid_to_tokens(self.fe_ref_lo(raw_lo)))
            ref_hi = self.embed_ref_hi(B.grid_to_tokens(self.fe_ref_hi(raw_hi)))
            trace.emit("stage", name="ref_features", grid=grid)

        prev1 = prev2 = None
        for i in range(cfg.pairs):
            x = self.b1[i](x, ref_lo, grid)
            raw = x
            if self.toggles.use_lsc and i > 0:
                x = self.fuse_b1[i - 1](x, prev1)
            prev1 = raw
            trace.emit("stage", name=f"b1_{i}", grid=grid)
            x, grid = self.ups[i](x, grid)
            trace.emit("stage", name=f"up_{i}", grid=grid)
            x = self.b2[i](x, ref_hi, grid)
            raw = x
            if self.toggles.use_lsc and i > 0:
                x = self.fuse_b2[i - 1](x, prev2)
            prev2 = raw
            trace.emit("stage", name=f"b2_{i}", grid=grid)
            if i < cfg.pairs - 1:
                x, grid = self.downs[i](x, grid)
                trace.emit("stage", name=f"down_{i}", grid=grid)

        x, grid = self.final_up(x, grid)
        trace.emit("stage", name="final_up", grid=grid)
        out = self.head(B.tokens_to_grid(x, grid))
        if cfg.global_residual:
            out = T.add(out, Tensor(metrics.resize_chw(lr.data, cfg.scale)))
        trace.emit("stage", name="head", grid=grid)
        if not training:
            out = Tensor(np.clip(out.data, 0.0, 1.0))
        return out

    def param_count(self) -> int:
        return self.registry.param_count()

    def gate_sigmas(self) -> dict:
        """Current sigma(lambda) per block, one value per head."""
        out = {}
        for blk in self.b1 + self.b2:
            if blk.gating is not None:
                out[blk.name] = blk.gating.sigma_values()
        return out


def build(cfg: ModelConfig, seed: int) -> HiTSRModel:
    return HiTSRModel(cfg, seed)


def forward(model: HiTSRModel, lr_img: Tensor, ref_img: Tensor | None,
            training: bool = True) -> Tensor:
    return model.forward(lr_img, ref_img, training=training)


def param_count(model: HiTSRModel) -> int:
    return model.param_count()


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------

@dataclass
class LoadedCheckpoint:
    model: HiTSRModel
    config: ModelConfig
    step: int
    optimizer: dict | None
    rng_state: dict | None
    extra: dict | None = None


def _le_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise ContractError(f"checkpoint tensors must be f32/f64, got {arr.dtype}")


def save_checkpoint(model: HiTSRModel, path: str, step: int = 0,
                    optimizer: dict | None = None,
                    rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write the container: magic, version, JSON header, raw LE payload.

    optimizer, when given, is {"t": int, "m": {name: arr}, "v": {name: arr}}
    with names drawn from the trainable registry entries. extra carries
    named auxiliary groups in the same shape ({group: {"tensors", "t",
    "m", "v"}}), e.g. a discriminator trained alongside the generator;
    groups and tensor names are stored sorted so identical state produces
    identical bytes.
    """
    entries = [(f"param.{n}", t.data) for n, t in model.registry.items()]
    if optimizer is not None:
        for kind in ("m", "v"):
            moments = optimizer[kind]
            for n, _ in model.registry.trainable_items():
                if n not in moments:
                    raise ContractError(f"optimizer {kind} lacks moment for {n!r}")
                entries.append((f"optim.{kind}.{n}", moments[n]))
    for group in sorted(extra or {}):
        g = extra[group]
        for n in sorted(g["tensors"]):
            entries.append((f"extra.{group}.param.{n}", g["tensors"][n]))
        for kind in ("m", "v"):
            for n in sorted(g.get(kind) or {}):
                entries.append((f"extra.{group}.optim.{kind}.{n}", g[kind][n]))

    directory, payload, offset = [], [], 0
    for name, arr in entries:
        dtype = _le_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        directory.append({"name": name, "dtype": dtype,
                          "shape": [int(s) for s in arr.shape],
                          "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)

    header = {
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "optimizer_t": None if optimizer is None else int(optimizer["t"]),
        "rng": rng_state,
        "tensors": directory,
    }
    if extra:
        header["extra"] = {g: {"t": None if extra[g].get("t") is None
                               else int(extra[g]["t"])}
                           for g in sorted(extra)}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        for raw in payload:
            f.write(raw)


def _read_container(path: str):
    """Validate magic/version and split the file into (header, data, base)."""
    with open(path, "rb") as f:
        data = f.read()
    n = len(CKPT_MAGIC)
    if data[:n] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:n]!r}")
    if len(data) < n + 12:
        raise FormatError("truncated checkpoint: missing version/header length")
    version, hlen = struct.unpack("<IQ", data[n:n + 12])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    blob = data[n + 12:n + 12 + hlen]
    if len(blob) != hlen:
        raise FormatError("truncated checkpoint: header cut short")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}")
    return header, data, n + 12 + hlen


def read_header(path: str) -> dict:
    """Parse and validate the container header without touching the payload."""
    return _read_container(path)[0]


def load_checkpoint(path: str, expected_cfg: ModelConfig | None = None) -> LoadedCheckpoint:
    header, data, base = _read_container(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expected_cfg is not None and expected_cfg.to_dict() != cfg.to_dict():
        diffs = [k for k, v in cfg.to_dict().items()
                 if expected_cfg.to_dict()[k] != v]
        raise ConfigurationError(f"checkpoint config differs on {diffs}")

    arrays = {}
    for ent in header["tensors"]:
        lo = base + ent["offset"]
        hi = lo + ent["nbytes"]
        if hi > len(data):
            raise FormatError(f"truncated checkpoint: tensor {ent['name']} out of range")
        arr = np.frombuffer(data[lo:hi], dtype=ent["dtype"]).reshape(ent["shape"])
        arrays[ent["name"]] = arr

    model = HiTSRModel(cfg, seed=int(header["seed"]))
    params = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
    missing = set(model.registry.names()) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    model.registry.load_arrays(params)

    optimizer = None
    if header["optimizer_t"] is not None:
        optimizer = {"t": int(header["optimizer_t"]), "m": {}, "v": {}}
        trainable = {n for n, _ in model.registry.trainable_items()}
        for name, arr in arrays.items():
            for kind in ("m", "v"):
                prefix = f"optim.{kind}."
                if name.startswith(prefix):
                    pname = name[len(prefix):]
                    if pname not in trainable:
                        raise ContractError(f"optimizer moment for unknown parameter {pname!r}")
                    optimizer[kind][pname] = arr.astype(arr.dtype, copy=True)

    extra = None
    if header.get("extra"):
        extra = {g: {"tensors": {}, "t": meta["t"], "m": {}, "v": {}}
                 for g, meta in header["extra"].items()}
        for name, arr in arrays.items():
            if not name.startswith("extra."):
                continue
            group, rest = name[len("extra."):].split(".", 1)
            if group not in extra:
                raise FormatError(f"tensor {name!r} names undeclared group {group!r}")
            if rest.startswith("param."):
                extra[group]["tensors"][rest[len("param."):]] = arr.copy()
            elif rest.startswith("optim.m."):
                extra[group]["m"][rest[len("optim.m."):]] = arr.copy()
            elif rest.startswith("optim.v."):
                extra[group]["v"][rest[len("optim.v."):]] = arr.copy()
            else:
                raise FormatError(f"unrecognized extra tensor {name!r}")
    return LoadedCheckpoint(model=model, config=cfg, step=int(header["step"]),
                            optimizer=optimizer, rng_state=header["rng"],
                            extra=extra)


def checkpoint_summary(path: str) -> dict:
    """Inspection view: config, step, and per-tensor directory rows."""
    header = read_header(path)
    n_params = sum(int(np.prod(e["shape"])) for e in header["tensors"]
                   if e["name"].startswith("param."))
    return {
        "config": header["config"],
        "seed": header["seed"],
        "step": header["step"],
        "optimizer_t": header["optimizer_t"],
        "has_rng": header["rng"] is not None,
        "tensor_count": len(header["tensors"]),
        "param_elements": n_params,
        "tensors": header["tensors"],
    }
