"""Flat (ViT/DeiT-style) and hierarchical (Swin-style) embedding backbones.

Flat models may carry one fast-weight module beside every block::

    x <- block(x) + hfw_l(norm(x))

Hierarchical models carry at most one, applied to the flattened output of
the last stage before pooling::

    z = gap(x_flat + hfw(x_flat))
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .hfw import FastMemory, HfwConfig, HfwParams, hfw_forward
from .tensor import DimensionError, Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# white background after channel normalisation
WHITE = tuple((1.0 - m) / s for m, s in zip(IMAGENET_MEAN, IMAGENET_STD))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FlatBackboneConfig:
    depth: int = 12
    d: int = 384
    heads: int = 6
    mlp_ratio: int = 4
    patch: int = 16
    image_size: int = 84
    in_channels: int = 3
    embed_mode: str = "gap"
    hfw: HfwConfig | None = None
    pad_value: tuple = WHITE

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by heads {self.heads}")
        if self.embed_mode not in ("gap", "cls"):
            raise ConfigError("embed_mode must be 'gap' or 'cls'")
        if self.hfw is not None and self.hfw.d != self.d:
            raise ConfigError(f"hfw width {self.hfw.d} differs from backbone width {self.d}")

    @property
    def padded_size(self) -> int:
        return -(-self.image_size // self.patch) * self.patch

    @property
    def tokens(self) -> int:
        return (self.padded_size // self.patch) ** 2


@dataclass(frozen=True)
class HierBackboneConfig:
    stage_depths: tuple = (2, 2, 6, 2)
    stage_dims: tuple = (96, 192, 384, 768)
    stage_heads: tuple = (3, 6, 12, 24)
    window: int = 6
    shift: bool = True
    patch: int = 4
    mlp_ratio: int = 4
    image_size: int = 84
    in_channels: int = 3
    hfw: HfwConfig | None = None
    pad_value: tuple = WHITE

    def __post_init__(self):
        n = len(self.stage_depths)
        if not n or len(self.stage_dims) != n or len(self.stage_heads) != n:
            raise ConfigError("stage_depths, stage_dims and stage_heads must have equal non-zero length")
        for a, b in zip(self.stage_dims, self.stage_dims[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage dims must double per stage, got {self.stage_dims}")
        for dim, heads in zip(self.stage_dims, self.stage_heads):
            if dim % heads:
                raise ConfigError(f"stage width {dim} not divisible by heads {heads}")
        if self.hfw is not None and self.hfw.d != self.stage_dims[-1]:
            raise ConfigError(f"hfw width {self.hfw.d} differs from final stage width {self.stage_dims[-1]}")
        self.padded_size  # validates reachability

    def stage_grid(self, stage: int) -> int:
        return self.padded_size // self.patch // 2**stage

    def stage_window(self, stage: int) -> int:
        return min(self.window, self.stage_grid(stage))

    @property
    def padded_size(self) -> int:
        step = self.patch * 2 ** (len(self.stage_depths) - 1)
        size = -(-self.image_size // step) * step
        for _ in range(64):
            grids = [size // self.patch // 2**s for s in range(len(self.stage_depths))]
            if all(g % min(self.window, g) == 0 for g in grids):
                return size
            size += step
        raise ConfigError(f"no padded extent fits patch {self.patch} and window {self.window}")

    @property
    def out_dim(self) -> int:
        return self.stage_dims[-1]


def config_to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    out["kind"] = "flat" if isinstance(cfg, FlatBackboneConfig) else "hier"
    return out


def config_from_dict(raw: dict):
    raw = dict(raw)
    kind = raw.pop("kind")
    hfw = raw.pop("hfw", None)
    hfw = HfwConfig(**hfw) if hfw is not None else None
    for key in ("pad_value", "stage_depths", "stage_dims", "stage_heads"):
        if key in raw:
            raw[key] = tuple(raw[key])
    cls = FlatBackboneConfig if kind == "flat" else HierBackboneConfig
    return cls(hfw=hfw, **raw)


# ---------------------------------------------------------------------------
# parameter initialisation


def _normal(rng, shape, dtype, std=0.02):
    return Tensor(np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def _linear(params, prefix, rng, d_in, d_out, dtype, bias=True):
    params[f"{prefix}.weight"] = _normal(rng, (d_in, d_out), dtype)
    if bias:
        params[f"{prefix}.bias"] = _zeros((d_out,), dtype)


def _norm(params, prefix, d, dtype):
    params[f"{prefix}.gamma"] = _ones((d,), dtype)
    params[f"{prefix}.beta"] = _zeros((d,), dtype)


def _block_params(params, prefix, rng, d, mlp_ratio, dtype):
    _norm(params, f"{prefix}.norm1", d, dtype)
    _linear(params, f"{prefix}.attn.qkv", rng, d, 3 * d, dtype)
    _linear(params, f"{prefix}.attn.proj", rng, d, d, dtype)
    _norm(params, f"{prefix}.norm2", d, dtype)
    _linear(params, f"{prefix}.mlp.fc1", rng, d, mlp_ratio * d, dtype)
    _linear(params, f"{prefix}.mlp.fc2", rng, mlp_ratio * d, d, dtype)


class BlockParams:
    """Read-only view of one block's tensors inside the parameter store."""

    def __init__(self, params: dict, prefix: str):
        self._params = params
        self._prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self._params[f"{self._prefix}.{key}"]


# ---------------------------------------------------------------------------
# kernels shared by both families


def linear(x: Tensor, p: BlockParams, name: str) -> Tensor:
    out = T.matmul(x, p[f"{name}.weight"])
    try:
        return T.add(out, p[f"{name}.bias"])
    except KeyError:
        return out


def norm(x: Tensor, p: BlockParams, name: str) -> Tensor:
    return T.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"])


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    return T.softmax(T.scale(T.matmul(q, k.swapaxes(-1, -2)), 1.0 / math.sqrt(q.shape[-1])), axis=-1)


def self_attention(x: Tensor, p: BlockParams, heads: int) -> Tensor:
    b, n, d = x.shape
    qkv = linear(x, p, "attn.qkv")
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, d // heads)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    out = T.matmul(attention_weights(q, k), v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return linear(out, p, "attn.proj")


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return linear(T.gelu(linear(x, p, "mlp.fc1")), p, "mlp.fc2")


def block_forward(x: Tensor, p: BlockParams, heads: int) -> Tensor:
    """Pre-norm transformer block: attention then MLP, both residual."""
    d = p["norm1.gamma"].shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"block width {d} does not match input {x.shape}")
    x = T.add(x, self_attention(norm(x, p, "norm1"), p, heads))
    return T.add(x, mlp(norm(x, p, "norm2"), p))


def _pad_images(images: Tensor, size: int, value) -> Tensor:
    _, c, h, w = images.shape
    if h > size or w > size:
        raise DimensionError(f"image {h}×{w} larger than padded extent {size}")
    top, left = (size - h) // 2, (size - w) // 2
    if (h, w) == (size, size):
        return images
    fill = np.asarray(value, dtype=images.dtype)
    if fill.size == c:
        fill = fill.reshape(1, c, 1, 1)
    return T.pad(images, [(0, 0), (0, 0), (top, size - h - top), (left, size - w - left)], fill)


# ---------------------------------------------------------------------------
# window attention and patch merging


def window_partition(x: Tensor, window: int) -> Tensor:
    b, h, w, c = x.shape
    x = T.reshape(x, (b, h // window, window, w // window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // window) * (w // window), window * window, c))


def window_reverse(windows: Tensor, window: int, b: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    x = T.reshape(windows, (b, h // window, w // window, window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def window_attention(x: Tensor, p: BlockParams, heads: int, window: int, shifted: bool) -> Tensor:
    """Self-attention inside non-overlapping ``window×window`` tiles of ``B×h×w×C``.

    A shifted call rolls the grid by ``window // 2`` first and rolls back
    afterwards. No cross-window mask is applied to the wrapped tiles.
    """
    b, h, w, _ = x.shape
    if h % window or w % window:
        raise DimensionError(f"grid {h}×{w} not divisible by window {window}")
    shift = window // 2 if shifted else 0
    if shift:
        x = T.roll(x, (-shift, -shift), axis=(1, 2))
    out = window_reverse(self_attention(window_partition(x, window), p, heads), window, b, h, w)
    if shift:
        out = T.roll(out, (shift, shift), axis=(1, 2))
    return out


def swin_block_forward(x: Tensor, p: BlockParams, heads: int, window: int, shifted: bool) -> Tensor:
    x = T.add(x, window_attention(norm(x, p, "norm1"), p, heads, window, shifted))
    return T.add(x, mlp(norm(x, p, "norm2"), p))


def patch_merge(x: Tensor, p: BlockParams) -> Tensor:
    """Concatenate each 2×2 neighbourhood (4C), normalise, project to 2C."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch merge needs even extents, got {h}×{w}")
    x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = T.transpose(x, (0, 1, 3, 4, 2, 5))
    x = T.reshape(x, (b, h // 2, w // 2, 4 * c))
    return T.matmul(norm(x, p, "norm"), p["reduction.weight"])


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    config: FlatBackboneConfig | HierBackboneConfig
    params: dict = field(default_factory=dict)
    hfw: list = field(default_factory=list)
    hfw_prefixes: list = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "flat" if isinstance(self.config, FlatBackboneConfig) else "hier"

    @property
    def hfw_config(self) -> HfwConfig | None:
        return self.config.hfw

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def out_dim(self) -> int:
        return self.config.d if self.kind == "flat" else self.config.out_dim

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def fresh_memories(self, batch: int) -> list[FastMemory]:
        return [FastMemory.zeros(batch, self.config.hfw, self.dtype) for _ in self.hfw]

    def plasticity(self) -> tuple[list[float], list[float]]:
        from .hfw import plasticity_values

        pairs = [plasticity_values(p, self.config.hfw) for p in self.hfw]
        return [e for e, _ in pairs], [lam for _, lam in pairs]

    def embed(self, images, memories: list[FastMemory] | None = None) -> tuple[Tensor, list[FastMemory]]:
        if not isinstance(images, Tensor):
            images = Tensor(images, dtype=self.dtype)
        if self.kind == "flat":
            return flat_forward(images, self, memories)
        return hier_forward(images, self, memories)

    def __call__(self, images) -> Tensor:
        return self.embed(images)[0]


def build_model(config, seed: int = 42, dtype=np.float32) -> Model:
    """Initialise a model. Backbone and fast-weight tensors draw from separate
    streams so the backbone is identical with or without fast weights."""
    backbone_seq, hfw_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(backbone_seq)
    hrng = np.random.default_rng(hfw_seq)
    model = Model(config)
    params = model.params
    if isinstance(config, FlatBackboneConfig):
        d = config.d
        _linear(params, "patch_embed", rng, config.in_channels * config.patch**2, d, dtype)
        extra = 1 if config.embed_mode == "cls" else 0
        if extra:
            params["cls_token"] = _normal(rng, (1, 1, d), dtype)
        params["pos_embed"] = _normal(rng, (1, config.tokens + extra, d), dtype)
        for i in range(config.depth):
            _block_params(params, f"blocks.{i}", rng, d, config.mlp_ratio, dtype)
            if config.hfw is not None:
                _add_hfw(model, f"blocks.{i}.hfw", hrng, dtype)
        _norm(params, "norm", d, dtype)
    else:
        dims = config.stage_dims
        _linear(params, "patch_embed", rng, config.in_channels * config.patch**2, dims[0], dtype)
        _norm(params, "patch_embed.norm", dims[0], dtype)
        for s, (depth, dim) in enumerate(zip(config.stage_depths, dims)):
            for j in range(depth):
                _block_params(params, f"stages.{s}.blocks.{j}", rng, dim, config.mlp_ratio, dtype)
            if s < len(dims) - 1:
                _norm(params, f"stages.{s}.merge.norm", 4 * dim, dtype)
                params[f"stages.{s}.merge.reduction.weight"] = _normal(rng, (4 * dim, 2 * dim), dtype)
        _norm(params, "norm", dims[-1], dtype)
        if config.hfw is not None:
            _add_hfw(model, "hfw", hrng, dtype)
    for name, tensor in params.items():
        tensor.name = name
    return model


def _add_hfw(model: Model, prefix: str, rng, dtype) -> None:
    hp = HfwParams.init(model.config.hfw, rng, dtype)
    model.hfw.append(hp)
    model.hfw_prefixes.append(prefix)
    for name, tensor in hp.named().items():
        model.params[f"{prefix}.{name}"] = tensor


def flat_forward(images: Tensor, model: Model, memories=None) -> tuple[Tensor, list[FastMemory]]:
    cfg: FlatBackboneConfig = model.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected B×{cfg.in_channels}×H×W images, got {images.shape}")
    if images.shape[2] != images.shape[3] or images.shape[2] > cfg.padded_size:
        raise DimensionError(f"image {images.shape[2:]} does not fit padded extent {cfg.padded_size}")
    p = model.params
    x = _pad_images(images, cfg.padded_size, cfg.pad_value)
    x = T.add(T.matmul(T.patchify(x, cfg.patch), p["patch_embed.weight"]), p["patch_embed.bias"])
    b = x.shape[0]
    if cfg.embed_mode == "cls":
        x = T.concat([T.broadcast_to(p["cls_token"], (b, 1, cfg.d)), x], axis=1)
    x = T.add(x, p["pos_embed"])
    memories = list(memories) if memories is not None else [None] * len(model.hfw)
    new_memories = []
    for i in range(cfg.depth):
        bp = BlockParams(model.params, f"blocks.{i}")
        if cfg.hfw is None:
            x = block_forward(x, bp, cfg.heads)
            continue
        # parameter-free norm in front of the fast-weight branch
        fast, mem = hfw_forward(T.layer_norm(x), model.hfw[i], cfg.hfw, memories[i])
        new_memories.append(mem)
        x = T.add(block_forward(x, bp, cfg.heads), fast)
    x = T.layer_norm(x, p["norm.gamma"], p["norm.beta"])
    if cfg.embed_mode == "cls":
        return x[:, 0], new_memories
    return T.gap(x), new_memories


def hier_forward(images: Tensor, model: Model, memories=None) -> tuple[Tensor, list[FastMemory]]:
    cfg: HierBackboneConfig = model.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected B×{cfg.in_channels}×H×W images, got {images.shape}")
    if images.shape[2] != images.shape[3] or images.shape[2] > cfg.padded_size:
        raise ConfigError(f"image {images.shape[2:]} does not fit padded extent {cfg.padded_size}")
    p = model.params
    x = _pad_images(images, cfg.padded_size, cfg.pad_value)
    x = T.add(T.matmul(T.patchify(x, cfg.patch), p["patch_embed.weight"]), p["patch_embed.bias"])
    x = T.layer_norm(x, p["patch_embed.norm.gamma"], p["patch_embed.norm.beta"])
    b, g = x.shape[0], cfg.stage_grid(0)
    x = T.reshape(x, (b, g, g, cfg.stage_dims[0]))
    for s, depth in enumerate(cfg.stage_depths):
        window = cfg.stage_window(s)
        can_shift = cfg.shift and window < cfg.stage_grid(s)
        for j in range(depth):
            bp = BlockParams(model.params, f"stages.{s}.blocks.{j}")
            x = swin_block_forward(x, bp, cfg.stage_heads[s], window, can_shift and j % 2 == 1)
        if s < len(cfg.stage_depths) - 1:
            x = patch_merge(x, BlockParams(model.params, f"stages.{s}.merge"))
    x = T.layer_norm(x, p["norm.gamma"], p["norm.beta"])
    b, h, w, c = x.shape
    x_flat = T.reshape(x, (b, h * w, c))
    if cfg.hfw is None:
        return T.gap(x_flat), []
    mem = memories[0] if memories else None
    fast, mem = hfw_forward(x_flat, model.hfw[0], cfg.hfw, mem)
    return T.gap(T.add(x_flat, fast)), [mem]


def count_parameters(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


# ---------------------------------------------------------------------------
# presets

_FLAT_FULL = dict(depth=12, d=384, heads=6, mlp_ratio=4, patch=16, image_size=84)
_FLAT_DESK = dict(depth=2, d=64, heads=4, mlp_ratio=4, patch=8, image_size=28)
_HIER_FULL = dict(stage_depths=(2, 2, 6, 2), stage_dims=(96, 192, 384, 768), stage_heads=(3, 6, 12, 24),
                  window=6, patch=4, image_size=84)
_HIER_DESK = dict(stage_depths=(1, 1), stage_dims=(32, 64), stage_heads=(2, 4), window=4, patch=2, image_size=28)

PRESETS = {
    "vit_s16": ("flat", _FLAT_FULL, False),
    "deit_s16": ("flat", _FLAT_FULL, False),
    "swin_tiny": ("hier", _HIER_FULL, False),
    "vit_s16_hebbian": ("flat", _FLAT_FULL, True),
    "deit_s16_hebbian": ("flat", _FLAT_FULL, True),
    "swin_tiny_hebbian": ("hier", _HIER_FULL, True),
    "desk_vit": ("flat", _FLAT_DESK, False),
    "desk_deit": ("flat", _FLAT_DESK, False),
    "desk_swin": ("hier", _HIER_DESK, False),
    "desk_vit_hebbian": ("flat", _FLAT_DESK, True),
    "desk_deit_hebbian": ("flat", _FLAT_DESK, True),
    "desk_swin_hebbian": ("hier", _HIER_DESK, True),
}


def preset_config(name: str, overrides: dict | None = None, hfw: dict | None = None):
    """Resolve a preset name to a backbone config.

    ``overrides`` replace backbone fields; ``hfw`` replaces fast-weight
    fields (ignored for presets without fast weights).
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kind, base, hebbian = PRESETS[name]
    if overrides and "hfw" in overrides:
        raise ConfigError("fast-weight settings go in the hfw argument, not in overrides")
    fields = dict(base)
    fields.update(overrides or {})
    for key in ("stage_depths", "stage_dims", "stage_heads", "pad_value"):
        if key in fields:
            fields[key] = tuple(fields[key])
    if hebbian:
        width = fields["d"] if kind == "flat" else fields["stage_dims"][-1]
        heads = fields["heads"] if kind == "flat" else fields["stage_heads"][-1]
        hfw_fields = {"d": width, "heads": heads}
        hfw_fields.update(hfw or {})
        fields["hfw"] = HfwConfig(**hfw_fields)
    cls = FlatBackboneConfig if kind == "flat" else HierBackboneConfig
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
