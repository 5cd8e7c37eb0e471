"""Base models and auxiliary heads built from one "token mixer + MLP" block.

Every block is pre-norm::

    y = mixer(norm1(x)) * ls1
    x = x + y            (or just ``y`` when the shortcut is removed)
    x = x + mlp(norm2(x)) * ls2

``ls1``/``ls2`` are per-channel branch scales initialised to one; setting
them to zero switches a residual branch off exactly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, GeometryError
from .nn import Conv2d, LayerNorm, Linear, Mlp, Module, Parameter, trunc_normal
from .resample import grid_resize_matrix


class MixerKind(str, Enum):
    ATTENTION = "attention"
    DEPTHWISE_CONV = "depthwise_conv"
    TOKEN_MLP = "token_mlp"
    POOLING = "pooling"
    RESIDUAL_CONV = "residual_conv"

    @classmethod
    def parse(cls, value) -> "MixerKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        key = _MIXER_ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown mixer {value!r}", keys=["mixer"]) from None

    @property
    def spatial(self) -> bool:
        return self is not MixerKind.ATTENTION


_MIXER_ALIASES = {
    "vit": "attention",
    "depthwiseconv": "depthwise_conv",
    "convnext": "depthwise_conv",
    "tokenmlp": "token_mlp",
    "resmlp": "token_mlp",
    "poolformer": "pooling",
    "residualconv": "residual_conv",
    "resnet": "residual_conv",
}

_DEFAULT_KERNEL = {MixerKind.DEPTHWISE_CONV: 7, MixerKind.POOLING: 3, MixerKind.RESIDUAL_CONV: 3}


@dataclass(frozen=True)
class BlockSpec:
    mixer: MixerKind
    width: int
    mlp_ratio: float = 4.0
    keep_shortcut: bool = True
    num_heads: int = 4
    kernel_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mixer", MixerKind.parse(self.mixer))
        if not self.width > 0:
            raise ConfigError(f"block width must be positive, got {self.width}", keys=["width"])
        if not self.mlp_ratio > 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}", keys=["mlp_ratio"])
        if self.mixer is MixerKind.ATTENTION and self.width % self.num_heads:
            raise ConfigError(f"width {self.width} not divisible by {self.num_heads} heads", keys=["num_heads"])

    @property
    def kernel(self) -> int:
        return self.kernel_size or _DEFAULT_KERNEL.get(self.mixer, 0)


@dataclass(frozen=True)
class AuxiliaryHeadSpec:
    id: str
    blocks: tuple = ()
    remove_first_shortcut: bool = False

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if self.remove_first_shortcut and blocks:
            blocks = (dataclasses.replace(blocks[0], keep_shortcut=False),) + blocks[1:]
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def uniform(cls, id, mixer, depth: int, width: int, mlp_ratio: float = 4.0,
                remove_first_shortcut: bool = False, **block_kw) -> "AuxiliaryHeadSpec":
        blocks = tuple(BlockSpec(mixer, width, mlp_ratio, **block_kw) for _ in range(depth))
        return cls(str(id), blocks, remove_first_shortcut)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        return self.blocks[0].width

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"auxiliary head {self.id!r} needs depth >= 1", keys=["depth"])
        if len({b.width for b in self.blocks}) != 1:
            raise ConfigError(f"auxiliary head {self.id!r} mixes block widths", keys=["width"])


@dataclass(frozen=True)
class BaseModelSpec:
    patch_size: int = 4
    image_size: int = 32
    embed_width: int = 64
    depth: int = 4
    mixer: MixerKind = MixerKind.ATTENTION
    mlp_ratio: float = 4.0
    num_heads: int = 4
    class_token: bool = False
    pooling: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "mixer", MixerKind.parse(self.mixer))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def validate(self):
        bad = []
        if self.patch_size < 1 or self.image_size < 1 or self.image_size % self.patch_size:
            bad.append("patch_size")
        if self.embed_width < 1:
            bad.append("embed_width")
        if self.depth < 0:
            bad.append("depth")
        if self.pooling not in ("mean", "class"):
            bad.append("pooling")
        if self.pooling == "class" and not self.class_token:
            bad.append("class_token")
        if bad:
            raise ConfigError(f"invalid base model spec fields: {bad}", keys=bad)
        BlockSpec(self.mixer, self.embed_width, self.mlp_ratio, num_heads=self.num_heads)


# -- token layout -------------------------------------------------------------

def token_grid_reshape(tokens) -> Tensor:
    """``[T,C]`` -> ``[C,s,s]`` (or batched ``[N,T,C]`` -> ``[N,C,s,s]``), raster order."""
    tokens = ag.as_tensor(tokens)
    t, c = tokens.shape[-2:]
    side = math.isqrt(t)
    if side * side != t or t == 0:
        raise GeometryError(f"{t} tokens do not form a square grid")
    if tokens.ndim == 2:
        return tokens.transpose(1, 0).reshape(c, side, side)
    n = tokens.shape[0]
    return tokens.transpose(0, 2, 1).reshape(n, c, side, side)


def grid_to_tokens(grid) -> Tensor:
    """Inverse of :func:`token_grid_reshape`."""
    grid = ag.as_tensor(grid)
    c, h, w = grid.shape[-3:]
    if grid.ndim == 3:
        return grid.reshape(c, h * w).transpose(1, 0)
    return grid.reshape(grid.shape[0], c, h * w).transpose(0, 2, 1)


def pooled_representation(tokens, policy: str = "mean", has_class_token: bool = False) -> Tensor:
    """Image-level vector: token 0 for ``"class"``, mean of patch tokens for ``"mean"``."""
    tokens = ag.as_tensor(tokens)
    if tokens.shape[-2] == 0:
        raise ContractError("cannot pool an empty token sequence")
    if policy == "class":
        if not has_class_token:
            raise ConfigError("class-token pooling on a model without a class token", keys=["pooling"])
        return tokens[..., 0, :]
    if policy != "mean":
        raise ConfigError(f"unknown pooling policy {policy!r}", keys=["pooling"])
    if has_class_token and tokens.shape[-2] > 1:
        tokens = tokens[..., 1:, :]
    return tokens.mean(axis=-2)


# -- mixers -------------------------------------------------------------------

class AttentionMixer(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.num_heads = num_heads

    def forward(self, x, has_cls: bool = False):
        n, t, c = x.shape
        h = self.num_heads
        d = c // h
        qkv = self.qkv(x).reshape(n, t, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ag.softmax(ag.matmul(q, k.swapaxes(-1, -2)) * (d ** -0.5), axis=-1)
        out = ag.matmul(att, v).transpose(0, 2, 1, 3).reshape(n, t, c)
        return self.proj(out)


class SpatialMixer(Module):
    """Mixes patch tokens on their 2-D grid; a class token passes through untouched."""

    def forward(self, x, has_cls: bool = False):
        cls_tok = None
        if has_cls:
            cls_tok, x = x[:, :1], x[:, 1:]
        out = grid_to_tokens(self.mix(token_grid_reshape(x)))
        return ag.concat([cls_tok, out], axis=1) if has_cls else out

    def mix(self, grid):
        raise NotImplementedError


class DepthwiseConvMixer(SpatialMixer):
    def __init__(self, dim: int, kernel: int, rng: np.random.Generator):
        self.dwconv = Conv2d(dim, dim, kernel, rng, padding=kernel // 2, groups=dim)

    def mix(self, grid):
        return self.dwconv(grid)


class PoolingMixer(SpatialMixer):
    def __init__(self, kernel: int):
        self.kernel = kernel

    def mix(self, grid):
        return ag.avg_pool2d(grid, self.kernel) - grid


class ResidualConvMixer(SpatialMixer):
    def __init__(self, dim: int, kernel: int, rng: np.random.Generator):
        self.conv1 = Conv2d(dim, dim, kernel, rng, padding=kernel // 2)
        self.conv2 = Conv2d(dim, dim, kernel, rng, padding=kernel // 2)

    def mix(self, grid):
        return self.conv2(ag.relu(self.conv1(grid)))


class TokenMlpMixer(Module):
    """Linear map across the token axis, sized for the native grid.

    Other grid sizes (small crops) resample tokens to the native grid,
    mix, and resample back.
    """

    def __init__(self, num_tokens: int, rng: np.random.Generator):
        self.weight = Parameter(trunc_normal(rng, (num_tokens, num_tokens)))
        self.bias = Parameter(np.zeros((num_tokens, 1)))
        self.num_tokens = num_tokens

    def forward(self, x, has_cls: bool = False):
        cls_tok = None
        if has_cls:
            cls_tok, x = x[:, :1], x[:, 1:]
        t = x.shape[1]
        side, native = math.isqrt(t), math.isqrt(self.num_tokens)
        if side * side != t:
            raise GeometryError(f"{t} tokens do not form a square grid")
        if t == self.num_tokens:
            w, b = self.weight, self.bias
        else:
            up = grid_resize_matrix(native, side).astype(x.dtype)
            down = grid_resize_matrix(side, native).astype(x.dtype)
            w = ag.matmul(ag.matmul(down, self.weight), up)
            b = ag.matmul(down, self.bias)
        out = ag.matmul(w, x) + b
        return ag.concat([cls_tok, out], axis=1) if has_cls else out


def make_mixer(spec: BlockSpec, num_tokens: int, rng: np.random.Generator) -> Module:
    kind = spec.mixer
    if kind is MixerKind.ATTENTION:
        return AttentionMixer(spec.width, spec.num_heads, rng)
    if kind is MixerKind.DEPTHWISE_CONV:
        return DepthwiseConvMixer(spec.width, spec.kernel, rng)
    if kind is MixerKind.POOLING:
        return PoolingMixer(spec.kernel)
    if kind is MixerKind.RESIDUAL_CONV:
        return ResidualConvMixer(spec.width, spec.kernel, rng)
    return TokenMlpMixer(num_tokens, rng)


class Block(Module):
    def __init__(self, spec: BlockSpec, num_tokens: int, rng: np.random.Generator):
        c = spec.width
        self.norm1 = LayerNorm(c)
        self.mixer = make_mixer(spec, num_tokens, rng)
        self.ls1 = Parameter(np.ones(c))
        self.norm2 = LayerNorm(c)
        self.mlp = Mlp(c, max(1, int(round(c * spec.mlp_ratio))), rng)
        self.ls2 = Parameter(np.ones(c))
        self.keep_shortcut = spec.keep_shortcut
        self.spec = spec

    def forward(self, x, has_cls: bool = False):
        y = self.mixer(self.norm1(x), has_cls) * self.ls1
        x = x + y if self.keep_shortcut else y
        return x + self.mlp(self.norm2(x)) * self.ls2


# -- models -------------------------------------------------------------------

class BaseModel(Module):
    """Patch embedding, learned positions, a stack of blocks, final norm."""

    def __init__(self, spec: BaseModelSpec, rng: np.random.Generator):
        c = spec.embed_width
        p = spec.patch_size
        self.patch_embed = Linear(3 * p * p, c, rng)
        self.pos_embed = Parameter(trunc_normal(rng, (spec.num_patches, c)))
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, c))) if spec.class_token else None
        block = BlockSpec(spec.mixer, c, spec.mlp_ratio, num_heads=spec.num_heads)
        self.blocks = [Block(block, spec.num_patches, rng) for _ in range(spec.depth)]
        self.norm = LayerNorm(c)
        self.spec = spec

    @property
    def has_cls(self) -> bool:
        return self.spec.class_token

    @property
    def width(self) -> int:
        return self.spec.embed_width

    def patchify(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        n, ch, h, w = images.shape
        p = self.spec.patch_size
        if ch != 3 or h % p or w % p or h != w:
            raise GeometryError(f"images of shape {images.shape} do not tile into {p}x{p} patches")
        g = h // p
        images = (images - 0.5) / 0.25
        return images.reshape(n, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, g * g, 3 * p * p)

    def embed(self, images, mask: np.ndarray | None = None, mask_token=None) -> Tensor:
        patches = self.patchify(images)
        x = self.patch_embed(patches)
        if mask is not None:
            m = np.asarray(mask, dtype=x.dtype)[..., None]
            x = x * (1.0 - m) + mask_token * m
        side = math.isqrt(patches.shape[1])
        pos = self.pos_embed
        if side != self.spec.grid:
            pos = ag.matmul(grid_resize_matrix(side, self.spec.grid).astype(pos.dtype), pos)
        x = x + pos
        if self.cls_token is not None:
            n = patches.shape[0]
            x = ag.concat([ag.broadcast_to(self.cls_token, (n, 1, self.width)), x], axis=1)
        return x

    def forward(self, images, mask: np.ndarray | None = None, mask_token=None) -> Tensor:
        x = self.embed(images, mask, mask_token)
        for blk in self.blocks:
            x = blk(x, self.has_cls)
        return self.norm(x)

    def pool(self, tokens) -> Tensor:
        return pooled_representation(tokens, self.spec.pooling, self.has_cls)


class AuxiliaryHead(Module):
    """Blocks applied serially to the base model's token sequence."""

    def __init__(self, spec: AuxiliaryHeadSpec, input_width: int, num_tokens: int,
                 rng: np.random.Generator):
        spec.validate()
        self.adapter = Linear(input_width, spec.width, rng) if input_width != spec.width else None
        self.blocks = [Block(b, num_tokens, rng) for b in spec.blocks]
        self.spec = spec

    @property
    def width(self) -> int:
        return self.spec.width

    def forward(self, tokens, has_cls: bool = False) -> Tensor:
        x = self.adapter(tokens) if self.adapter is not None else tokens
        for blk in self.blocks:
            x = blk(x, has_cls)
        return x


def build_base_model(spec: BaseModelSpec, seed: int) -> BaseModel:
    spec.validate()
    return BaseModel(spec, np.random.default_rng(seed))


def build_auxiliary_head(spec: AuxiliaryHeadSpec, input_width: int, seed: int,
                         num_tokens: int = 64) -> AuxiliaryHead:
    return AuxiliaryHead(spec, input_width, num_tokens, np.random.default_rng(seed))


def zero_residual_branches(model: Module) -> Module:
    """Switch off every residual branch (branch scales set to zero)."""
    for name, p in model.named_parameters():
        if name.rsplit(".", 1)[-1] in ("ls1", "ls2"):
            p.data = np.zeros_like(p.data)
    return model
