"""Pre-activation residual blocks, transformer blocks and the U-shaped network.

Level ``l`` of the encoder runs at 1/2**l of the input resolution. Every
level after the first opens with a stride-2 residual block; its second
building block is a transformer encoder block when ``l`` appears in
``attention_levels`` and a residual block otherwise. The decoder mirrors
this: an active level fuses the skip through a transformer decoder block,
an inactive one upsamples, concatenates the skip and applies a residual
block.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionWeights, RelativePositionTable, decoder_cross_mhsa, encoder_attention
from .errors import ConfigError, DataError
from .tensor import Tensor

FFN_EXPANSION = 4


@dataclass(frozen=True)
class UTNetConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_channels: int = 32
    levels: int = 5
    attention_levels: str = "1234"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    baseline_mode: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels % self.attention.heads:
            raise ConfigError(
                f"base_channels={self.base_channels} must be divisible by heads={self.attention.heads}"
            )
        seen = set()
        for ch in self.attention_levels:
            if not ch.isdigit() or ch == "0" or int(ch) >= self.levels:
                raise ConfigError(
                    f"attention_levels {self.attention_levels!r}: each digit must be in 1..{self.levels - 1}"
                )
            if ch in seen:
                raise ConfigError(f"attention_levels {self.attention_levels!r} repeats level {ch}")
            seen.add(ch)

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    @property
    def active_levels(self) -> set[int]:
        return set() if self.baseline_mode else {int(c) for c in self.attention_levels}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention"] = self.attention.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UTNetConfig":
        d = dict(d)
        att = d.pop("attention", {}) or {}
        att = {k: v for k, v in att.items() if k != "model_channels"}
        known = {f for f in cls.__dataclass_fields__ if f != "attention"}
        att_known = set(AttentionConfig.__dataclass_fields__) - {"model_channels"}
        bad = sorted(set(d) - known) + [f"attention.{k}" for k in sorted(set(att) - att_known)]
        if bad:
            raise ConfigError(f"unknown model keys: {bad}")
        return cls(attention=AttentionConfig(**att), **d)


class ParamStore:
    """Ordered registry of trainable tensors and non-trainable buffers."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def param(self, name: str, value: np.ndarray | Tensor) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = np.asarray(value, dtype=np.float64).copy()
        return self.buffers[name]

    def conv(self, name: str, cout: int, cin: int, k: int) -> Tensor:
        """He (fan-in) initialised kernel."""
        std = math.sqrt(2.0 / (cin * k * k))
        return self.param(name, self.rng.normal(0.0, std, size=(cout, cin, k, k)))

    def zeros(self, name: str, *shape) -> Tensor:
        return self.param(name, np.zeros(shape))

    def ones(self, name: str, *shape) -> Tensor:
        return self.param(name, np.ones(shape))


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.ones(f"{name}.gamma", channels)
        self.beta = store.zeros(f"{name}.beta", channels)
        self.running_mean = store.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm_2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.ones(f"{name}.gamma", channels)
        self.beta = store.zeros(f"{name}.beta", channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm_channels(x, self.gamma, self.beta)


class ResidualBlock:
    """Pre-activation basic block: ``shortcut(x) + conv(act(norm(conv(act(norm(x))))))``."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, stride: int = 1):
        if stride not in (1, 2):
            raise ConfigError(f"residual block stride must be 1 or 2, got {stride}")
        self.stride = stride
        self.bn1 = BatchNorm(store, f"{name}.bn1", cin)
        self.conv1 = store.conv(f"{name}.conv1", cout, cin, 3)
        self.bn2 = BatchNorm(store, f"{name}.bn2", cout)
        self.conv2 = store.conv(f"{name}.conv2", cout, cout, 3)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = store.conv(f"{name}.shortcut", cout, cin, 1)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        h = T.relu(self.bn1(x, training))
        h = T.conv2d(h, self.conv1, stride=self.stride, pad=1 if self.stride == 1 else (1, 0))
        h = T.conv2d(T.relu(self.bn2(h, training)), self.conv2, pad=1)
        if self.shortcut is None:
            skip = x
        else:
            skip = T.conv2d(T.subsample_2d(x, self.stride) if self.stride > 1 else x, self.shortcut)
        return T.add(h, skip)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, channels: int):
        hidden = FFN_EXPANSION * channels
        self.w1 = store.conv(f"{name}.w1", hidden, channels, 1)
        self.b1 = store.zeros(f"{name}.b1", hidden)
        self.w2 = store.conv(f"{name}.w2", channels, hidden, 1)
        self.b2 = store.zeros(f"{name}.b2", channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(T.gelu(T.conv2d(x, self.w1, self.b1)), self.w2, self.b2)


def _attention_weights(store: ParamStore, prefix: str, cfg: AttentionConfig) -> AttentionWeights:
    w = AttentionWeights.init(cfg, store.rng)
    for role, t in w.named().items():
        store.param(f"{prefix}.{role}", t)
    return w


class TransformerEncoderBlock:
    """Pre-norm block: ``x + MHSA(LN(x))`` followed by ``+ FFN(LN(.))``."""

    def __init__(self, store: ParamStore, name: str, channels: int, attn: AttentionConfig, level: str):
        self.cfg = attn.with_channels(channels)
        self.norm1 = LayerNorm(store, f"{name}.norm1", channels)
        self.attn = _attention_weights(store, f"attn.{level}", self.cfg)
        self.norm2 = LayerNorm(store, f"{name}.norm2", channels)
        self.ffn = FeedForward(store, f"{name}.ffn", channels)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        y = T.add(x, encoder_attention(self.norm1(x), self.attn, self.cfg))
        return T.add(y, self.ffn(self.norm2(y)))


class TransformerDecoderBlock:
    """Fuses the coarse decoder stream ``lo`` into the skip map ``hi``.

    ``lo`` is brought to ``hi``'s width by a 1x1 conv and bilinearly
    upsampled; that and the skip form the merge path, to which the cross
    attention (queries from ``hi``) is added before a residual FFN.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, lo_channels: int, attn: AttentionConfig, level: str):
        self.cfg = attn.with_channels(channels)
        self.reduce = store.conv(f"{name}.reduce", channels, lo_channels, 1)
        self.norm_hi = LayerNorm(store, f"{name}.norm_hi", channels)
        self.norm_lo = LayerNorm(store, f"{name}.norm_lo", channels)
        self.attn = _attention_weights(store, f"attn.{level}", self.cfg)
        self.norm2 = LayerNorm(store, f"{name}.norm2", channels)
        self.ffn = FeedForward(store, f"{name}.ffn", channels)

    def __call__(self, hi: Tensor, lo: Tensor, training: bool = True) -> Tensor:
        H, W = hi.shape[2:]
        if lo.shape[2] * 2 != H or lo.shape[3] * 2 != W:
            raise ConfigError(f"decoder block needs lo one level coarser than hi, got {lo.shape} vs {hi.shape}")
        lo = T.conv2d(lo, self.reduce)
        y = T.add(T.bilinear_resize(lo, H, W), hi)
        y = T.add(y, decoder_cross_mhsa(self.norm_hi(hi), self.norm_lo(lo), self.attn, self.cfg))
        return T.add(y, self.ffn(self.norm2(y)))


class UpMerge:
    """Inactive decoder level: upsample, concatenate the skip, residual block."""

    def __init__(self, store: ParamStore, name: str, channels: int, lo_channels: int):
        self.reduce = store.conv(f"{name}.reduce", channels, lo_channels, 1)
        self.block = ResidualBlock(store, f"{name}.block", 2 * channels, channels)

    def __call__(self, hi: Tensor, lo: Tensor, training: bool = True) -> Tensor:
        H, W = hi.shape[2:]
        up = T.bilinear_resize(T.conv2d(lo, self.reduce), H, W)
        return self.block(T.concat([hi, up], axis=1), training)


class UTNet:
    def __init__(self, cfg: UTNetConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        store = ParamStore(np.random.default_rng(seed))
        self.store = store
        widths = cfg.widths
        active = cfg.active_levels

        self.stem = store.conv("stem.conv", widths[0], cfg.in_channels, 3)
        self.encoder: list[list] = [[ResidualBlock(store, "enc0.block0", widths[0], widths[0])]]
        for lvl in range(1, cfg.levels):
            stage = [ResidualBlock(store, f"enc{lvl}.down", widths[lvl - 1], widths[lvl], stride=2)]
            if lvl in active:
                stage.append(TransformerEncoderBlock(store, f"enc{lvl}.trans", widths[lvl], cfg.attention, f"enc{lvl}"))
            else:
                stage.append(ResidualBlock(store, f"enc{lvl}.block1", widths[lvl], widths[lvl]))
            self.encoder.append(stage)

        self.decoder: dict[int, object] = {}
        for lvl in range(cfg.levels - 2, -1, -1):
            if lvl in active:
                self.decoder[lvl] = TransformerDecoderBlock(
                    store, f"dec{lvl}.trans", widths[lvl], widths[lvl + 1], cfg.attention, f"dec{lvl}"
                )
            else:
                self.decoder[lvl] = UpMerge(store, f"dec{lvl}.up", widths[lvl], widths[lvl + 1])

        self.head_norm = BatchNorm(store, "head.bn", widths[0])
        self.head_w = store.conv("head.conv", cfg.num_classes, widths[0], 1)
        self.head_b = store.zeros("head.bias", cfg.num_classes)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self.store.buffers

    @property
    def multiple(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, image: Tensor, training: bool = False) -> Tensor:
        """Logits B x num_classes x H x W; eval mode uses running norm statistics."""
        image = T.as_tensor(image)
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise DataError(f"expected B x {self.cfg.in_channels} x H x W input, got {image.shape}")
        H, W = image.shape[2:]
        m = self.multiple
        if H % m or W % m:
            raise DataError(f"input size {H}x{W} must be a multiple of {m}")
        x = T.conv2d(image, self.stem, pad=1)
        skips = []
        for stage in self.encoder:
            for block in stage:
                x = block(x, training)
            skips.append(x)
        x = skips[-1]
        for lvl in range(self.cfg.levels - 2, -1, -1):
            x = self.decoder[lvl](skips[lvl], x, training)
        x = T.relu(self.head_norm(x, training))
        return T.conv2d(x, self.head_w, self.head_b)

    __call__ = forward

    def census(self) -> dict:
        total = sum(p.size for p in self.params.values())
        attention = sum(p.size for n, p in self.params.items() if n.startswith("attn."))
        transformer = sum(p.size for n, p in self.params.items() if n.startswith("attn.") or ".trans." in n)
        by_level: dict[str, int] = {}
        for n, p in self.params.items():
            key = n.split(".")[0]
            by_level[key] = by_level.get(key, 0) + p.size
        return {"total": total, "attention": attention, "transformer": transformer, "by_prefix": by_level}


def build(cfg: UTNetConfig, seed: int = 0) -> UTNet:
    return UTNet(cfg, seed)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: UTNet, directory: str | Path, epoch: int = 0, lr: float = 0.0, extra: dict | None = None) -> Path:
    """Tensor manifests under ``tensors/`` plus ``model.json``."""
    directory = Path(directory)
    tdir = directory / "tensors"
    for name, p in model.params.items():
        T.save_tensor(p, tdir, name)
    for name, b in model.buffers.items():
        T.save_tensor(b, tdir, f"buffer.{name}")
    meta = {
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "epoch": epoch,
        "lr": lr,
        "census": model.census(),
        "params": list(model.params),
        "buffers": list(model.buffers),
    }
    if extra:
        meta.update(extra)
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[UTNet, dict]:
    directory = Path(directory)
    meta_path = directory / "model.json"
    if not meta_path.exists():
        raise ConfigError(f"no model.json in checkpoint {directory}")
    meta = json.loads(meta_path.read_text())
    model = build(UTNetConfig.from_dict(meta["config"]), meta["seed"])
    if sorted(meta["params"]) != sorted(model.params):
        raise ConfigError(f"checkpoint {directory} parameters do not match its config")
    tdir = directory / "tensors"
    for name, p in model.params.items():
        p.data = T.load_tensor(tdir, name)
    for name, b in model.buffers.items():
        b[...] = T.load_tensor(tdir, f"buffer.{name}")
    return model, meta
