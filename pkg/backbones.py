"""
Vision encoders and the classifier head.

Three encoders produce a token sequence with a class token in front:

* ``vit2d`` - ViT over non-overlapping P x P patches.
* ``vit3d`` - ViT with joint space-time attention over tubelets.
* ``vivit_factorised`` - a spatial encoder per temporal slice, then a temporal
  encoder over the per-slice class tokens.

Blocks are pre-norm with GELU MLPs; positional embeddings are learned and
absolute.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from nn_core import (
    INIT_STD,
    AttentionConfig,
    ConfigError,
    ParamSpec,
    ParamStore,
    attention_layout,
    linear,
    linear_layout,
    mlp_layout,
    multi_head_attention,
    norm_layout,
    patch_embed_2d,
    patch_embed_3d,
    patch_embed_layout,
    patch_token_count,
    prepend_token,
    transformer_mlp,
)
from tensor_autograd import ShapeError, Tensor, gelu, getitem, layernorm, reshape

logger = logging.getLogger(__name__)

BACKBONE_KINDS = ("vit2d", "vit3d", "vivit_factorised")
LN_EPS = 1e-6

# Desk presets fit a CPU; the "-small" presets mirror ViT-S widths.
BACKBONE_PRESETS: Dict[str, Dict[str, Any]] = {
    "vit-tiny": {"kind": "vit2d", "d_model": 64, "depth": 4, "n_heads": 4,
                 "patch": [4], "input_shape": [1, 28, 28]},
    "vit3d-tiny": {"kind": "vit3d", "d_model": 64, "depth": 4, "n_heads": 4,
                   "patch": [7, 7, 7], "input_shape": [1, 28, 28, 28]},
    "vivit-tiny": {"kind": "vivit_factorised", "d_model": 64, "depth": 2, "depth_temporal": 2,
                   "n_heads": 4, "patch": [4, 7, 7], "input_shape": [1, 28, 28, 28]},
    "vit-small": {"kind": "vit2d", "d_model": 384, "depth": 12, "n_heads": 6,
                  "patch": [16], "input_shape": [3, 224, 224]},
    "vit3d-small": {"kind": "vit3d", "d_model": 384, "depth": 12, "n_heads": 6,
                    "patch": [7, 7, 7], "input_shape": [3, 28, 28, 28]},
    "vivit-small": {"kind": "vivit_factorised", "d_model": 384, "depth": 8, "depth_temporal": 4,
                    "n_heads": 6, "patch": [4, 7, 7], "input_shape": [3, 28, 28, 28]},
}


@dataclass
class BackboneConfig:
    kind: str = "vit2d"
    d_model: int = 64
    depth: int = 4
    depth_temporal: int = 2
    n_heads: int = 4
    ffn_ratio: float = 4.0
    patch: Tuple[int, ...] = (4,)
    input_shape: Tuple[int, ...] = (1, 28, 28)
    n_classes: int = 2
    pooling: str = "cls_token"

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"Unknown backbone kind '{self.kind}'. Valid: {', '.join(BACKBONE_KINDS)}")
        if self.depth < 1 or (self.kind == "vivit_factorised" and self.depth_temporal < 1):
            raise ConfigError(f"Backbone depth must be >= 1, got depth={self.depth}, "
                              f"depth_temporal={self.depth_temporal}")
        if self.pooling != "cls_token":
            raise ConfigError(f"Unknown pooling '{self.pooling}'. Valid: cls_token")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.ffn_hidden < 1:
            raise ConfigError(f"ffn_ratio={self.ffn_ratio} gives an empty MLP")
        AttentionConfig(self.d_model, self.n_heads)

        spatial_rank = 2 if self.kind == "vit2d" else 3
        if len(self.input_shape) != spatial_rank + 1:
            raise ConfigError(f"{self.kind} needs input_shape (C, {'H, W' if spatial_rank == 2 else 'D, H, W'}), "
                              f"got {self.input_shape}")
        if self.kind == "vit2d":
            if len(self.patch) == 1:
                self.patch = (self.patch[0], self.patch[0])
            if len(self.patch) != 2 or self.patch[0] != self.patch[1]:
                raise ConfigError(f"vit2d needs a square patch, got {self.patch}")
        elif len(self.patch) == 1:
            self.patch = (self.patch[0],) * 3
        if len(self.patch) != spatial_rank or min(self.patch) < 1:
            raise ConfigError(f"{self.kind} needs {spatial_rank} positive patch extents, got {self.patch}")
        for extent, p in zip(self.spatial, self.patch):
            if extent % p:
                raise ConfigError(f"Input extents {self.spatial} are not divisible by patch {self.patch}")

    @property
    def channels(self) -> int:
        return self.input_shape[0]

    @property
    def spatial(self) -> Tuple[int, ...]:
        return self.input_shape[1:]

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.d_model * self.ffn_ratio))

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, masking="padding_only", qkv_bias=True)

    @property
    def grid(self) -> Tuple[int, ...]:
        return tuple(extent // p for extent, p in zip(self.spatial, self.patch))

    @property
    def n_patches(self) -> int:
        return patch_token_count(self.spatial, self.patch)

    @property
    def spatial_tokens(self) -> int:
        """Tokens per temporal slice in the factorised encoder."""
        return int(np.prod(self.grid[1:]))

    @property
    def output_tokens(self) -> int:
        if self.kind == "vivit_factorised":
            return self.grid[0] + 1
        return self.n_patches + 1

    def block_names(self) -> List[str]:
        if self.kind == "vivit_factorised":
            return ([f"backbone.spatial.blocks.{i}" for i in range(self.depth)]
                    + [f"backbone.temporal.blocks.{i}" for i in range(self.depth_temporal)])
        return [f"backbone.blocks.{i}" for i in range(self.depth)]


def preset_config(name: str, **overrides: Any) -> BackboneConfig:
    if name not in BACKBONE_PRESETS:
        raise ConfigError(f"Unknown backbone preset '{name}'. Valid: {', '.join(BACKBONE_PRESETS)}")
    values = dict(BACKBONE_PRESETS[name])
    values.update(overrides)
    return BackboneConfig(**values)


# ---- layouts ----

def _block_layout(prefix: str, cfg: BackboneConfig) -> List[ParamSpec]:
    return (norm_layout(f"{prefix}.norm1", cfg.d_model)
            + attention_layout(f"{prefix}.attn", cfg.attention)
            + norm_layout(f"{prefix}.norm2", cfg.d_model)
            + mlp_layout(f"{prefix}.mlp", cfg.d_model, cfg.ffn_hidden, "gelu_2layer"))


def _encoder_layout(prefix: str, cfg: BackboneConfig, tokens: int, depth: int) -> List[ParamSpec]:
    layout = [ParamSpec(f"{prefix}.cls_token", (1, 1, cfg.d_model), "normal", INIT_STD),
              ParamSpec(f"{prefix}.pos_embed", (1, tokens + 1, cfg.d_model), "normal", INIT_STD)]
    for i in range(depth):
        layout += _block_layout(f"{prefix}.blocks.{i}", cfg)
    return layout


def backbone_layout(cfg: BackboneConfig) -> List[ParamSpec]:
    layout = patch_embed_layout("backbone.patch_embed", cfg.channels, cfg.patch, cfg.d_model)
    if cfg.kind == "vivit_factorised":
        layout += _encoder_layout("backbone.spatial", cfg, cfg.spatial_tokens, cfg.depth)
        layout += norm_layout("backbone.spatial.norm", cfg.d_model)
        layout += _encoder_layout("backbone.temporal", cfg, cfg.grid[0], cfg.depth_temporal)
    else:
        layout += _encoder_layout("backbone", cfg, cfg.n_patches, cfg.depth)
    layout += norm_layout("backbone.norm", cfg.d_model)
    return layout


def head_layout(d_model: int, n_classes: int) -> List[ParamSpec]:
    return linear_layout("head.fc1", d_model, d_model) + linear_layout("head.fc2", d_model, n_classes)


# ---- forward ----

def _norm(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return layernorm(x, store[f"{prefix}.weight"], store[f"{prefix}.bias"], LN_EPS)


def vit_block(cfg: BackboneConfig, store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    x = x + multi_head_attention(cfg.attention, store, f"{prefix}.attn", _norm(store, f"{prefix}.norm1", x))
    return x + transformer_mlp(store, f"{prefix}.mlp", _norm(store, f"{prefix}.norm2", x), "gelu_2layer")


def _encode(cfg: BackboneConfig, store: ParamStore, prefix: str, tokens: Tensor, depth: int,
            taps: Optional[Dict[str, Tensor]]) -> Tensor:
    x = prepend_token(store, f"{prefix}.cls_token", tokens) + store[f"{prefix}.pos_embed"]
    for i in range(depth):
        name = f"{prefix}.blocks.{i}"
        x = vit_block(cfg, store, name, x)
        if taps is not None:
            taps[name] = x
    return x


def backbone_forward(cfg: BackboneConfig, store: ParamStore, batch: Tensor,
                     taps: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """
    Encode a batch into [B, T+1, d_model] tokens (class token first).

    When ``taps`` is given, each block output is stored under its parameter
    prefix, e.g. ``backbone.blocks.3``.
    """
    expected = (batch.shape[0],) + cfg.input_shape
    if batch.shape != expected:
        raise ShapeError(f"{cfg.kind} expects a batch of shape {expected}, got {batch.shape}")
    if cfg.kind == "vit2d":
        tokens = patch_embed_2d(store, "backbone.patch_embed", batch, cfg.patch[0])
        x = _encode(cfg, store, "backbone", tokens, cfg.depth, taps)
    elif cfg.kind == "vit3d":
        tokens = patch_embed_3d(store, "backbone.patch_embed", batch, cfg.patch)
        x = _encode(cfg, store, "backbone", tokens, cfg.depth, taps)
    else:
        b = batch.shape[0]
        slices = cfg.grid[0]
        tokens = patch_embed_3d(store, "backbone.patch_embed", batch, cfg.patch)
        tokens = reshape(tokens, (b * slices, cfg.spatial_tokens, cfg.d_model))
        spatial = _encode(cfg, store, "backbone.spatial", tokens, cfg.depth, taps)
        spatial = _norm(store, "backbone.spatial.norm", spatial)
        per_slice = reshape(getitem(spatial, (slice(None), 0, slice(None))), (b, slices, cfg.d_model))
        x = _encode(cfg, store, "backbone.temporal", per_slice, cfg.depth_temporal, taps)
    return _norm(store, "backbone.norm", x)


def pool(features: Tensor) -> Tensor:
    """Class-token row of each sequence."""
    return getitem(features, (slice(None), 0, slice(None)))


def classify(store: ParamStore, features: Tensor) -> Tensor:
    """Two-layer GELU MLP head, d -> d -> K."""
    return linear(store, "head.fc2", gelu(linear(store, "head.fc1", features)))
