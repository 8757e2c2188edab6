"""
The frozen language-model block.

A LLaMA-style pre-norm transformer block (RMSNorm, padding-only attention
without biases, SwiGLU MLP) that operates on visual tokens. There is no
positional encoding of any kind in this module: token order carries no
information through the block, and there is no causal mask.

Weights come either from a checkpoint export of a real model layer or from a
seeded synthetic draw. With ``frozen=True`` (the default) every tensor of the
block is registered as non-trainable.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

import checkpoint_storage
from nn_core import (
    INIT_STD,
    AttentionConfig,
    ConfigError,
    ParamSpec,
    ParamStore,
    attention_layout,
    init_params,
    mlp_layout,
    multi_head_attention,
    norm_layout,
    transformer_mlp,
)
from tensor_autograd import PRECISIONS, ShapeError, Tensor, rmsnorm

logger = logging.getLogger(__name__)

PREFIX = "llm_block"
SYNTHETIC_STD = INIT_STD / math.sqrt(2.0)

# Block dimensions. "llama-7b" matches one LLaMA-7B decoder layer.
LLM_PRESETS: Dict[str, Dict[str, int]] = {
    "desk": {"d_llm": 128, "n_heads": 4, "d_ffn": 344},
    "llama-7b": {"d_llm": 4096, "n_heads": 32, "d_ffn": 11008},
}


class LlmBlockError(ValueError):
    """Checkpoint contents do not match the block configuration."""


@dataclass
class LlmBlockConfig:
    d_llm: int = 128
    n_heads: int = 4
    d_ffn: int = 344
    eps: float = 1e-5
    source: str = "synthetic"  # synthetic | checkpoint
    seed: int = 7
    checkpoint: Optional[str] = None
    layer_index: Optional[int] = None
    depth: int = 1
    frozen: bool = True

    def __post_init__(self):
        if self.d_llm < 1 or self.n_heads < 1 or self.d_llm % self.n_heads:
            raise ConfigError(f"d_llm={self.d_llm} must be a positive multiple of n_heads={self.n_heads}")
        if self.d_ffn < 0:
            raise ConfigError(f"d_ffn must be non-negative, got {self.d_ffn}")
        if self.depth < 1:
            raise ConfigError(f"LLM block depth must be >= 1, got {self.depth}")
        if self.source not in ("synthetic", "checkpoint"):
            raise ConfigError(f"Unknown LLM block source '{self.source}'. Valid: synthetic, checkpoint")
        if self.source == "checkpoint" and not self.checkpoint:
            raise ConfigError("LLM block source 'checkpoint' needs a checkpoint path")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_llm, self.n_heads, masking="padding_only", qkv_bias=False)


def block_prefix(index: int) -> str:
    return f"{PREFIX}.{index}"


def llm_layout(cfg: LlmBlockConfig) -> List[ParamSpec]:
    trainable = not cfg.frozen
    layout: List[ParamSpec] = []
    for i in range(cfg.depth):
        prefix = block_prefix(i)
        layout += norm_layout(f"{prefix}.attn_norm", cfg.d_llm, "rmsnorm", trainable)
        layout += attention_layout(f"{prefix}.attn", cfg.attention, SYNTHETIC_STD, trainable)
        layout += norm_layout(f"{prefix}.mlp_norm", cfg.d_llm, "rmsnorm", trainable)
        layout += mlp_layout(f"{prefix}.mlp", cfg.d_llm, cfg.d_ffn, "swiglu", SYNTHETIC_STD, trainable)
    return layout


def llm_param_count(cfg: LlmBlockConfig) -> int:
    d = cfg.d_llm
    return cfg.depth * (4 * d * d + 3 * d * cfg.d_ffn + 2 * d)


def llm_block_forward(cfg: LlmBlockConfig, store: ParamStore, tokens: Tensor,
                      pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """x1 = x + attn(rmsnorm(x)); out = x1 + swiglu(rmsnorm(x1)), per stacked block."""
    if tokens.ndim != 3 or tokens.shape[-1] != cfg.d_llm:
        raise ShapeError(f"LLM block expects tokens [B, T, {cfg.d_llm}], got {tokens.shape}")
    x = tokens
    for i in range(cfg.depth):
        prefix = block_prefix(i)
        h = rmsnorm(x, store[f"{prefix}.attn_norm.weight"], cfg.eps)
        x = x + multi_head_attention(cfg.attention, store, f"{prefix}.attn", h, pad_mask)
        h = rmsnorm(x, store[f"{prefix}.mlp_norm.weight"], cfg.eps)
        x = x + transformer_mlp(store, f"{prefix}.mlp", h, "swiglu")
    return x


def _select_exported(source: ParamStore, cfg: LlmBlockConfig) -> Dict[str, np.ndarray]:
    """Map checkpoint names onto llm_block.<i>.* names."""
    if cfg.layer_index is None:
        return {name: source[name].data for name in source.names(PREFIX)}
    wanted = f"layers.{cfg.layer_index}."
    picked = {f"{block_prefix(0)}.{name[len(wanted):]}": source[name].data
              for name in source if name.startswith(wanted)}
    if not picked:
        raise LlmBlockError(f"Checkpoint {cfg.checkpoint} has no tensors under '{wanted}'")
    return picked


def load_or_synthesize(cfg: LlmBlockConfig, precision: str = "single") -> ParamStore:
    """Return the llm_block.* fragment, trainable exactly when the block is not frozen."""
    layout = llm_layout(cfg)
    if cfg.source == "synthetic":
        fragment = init_params(layout, cfg.seed, precision)
        logger.info(f"Synthesised LLM block: d_llm={cfg.d_llm}, d_ffn={cfg.d_ffn}, depth={cfg.depth}, "
                    f"seed={cfg.seed}, frozen={cfg.frozen}")
        return fragment

    exported = _select_exported(checkpoint_storage.load_checkpoint(cfg.checkpoint), cfg)
    problems = []
    for spec in layout:
        found = exported.get(spec.name)
        if found is None:
            problems.append(f"{spec.name}: expected {spec.shape}, missing")
        elif tuple(found.shape) != spec.shape:
            problems.append(f"{spec.name}: expected {spec.shape}, found {tuple(found.shape)}")
    if problems:
        raise LlmBlockError(
            f"Checkpoint {cfg.checkpoint} does not match block config "
            f"(d_llm={cfg.d_llm}, n_heads={cfg.n_heads}, d_ffn={cfg.d_ffn}, depth={cfg.depth}): "
            + "; ".join(problems))

    fragment = ParamStore()
    for spec in layout:
        fragment.register(spec.name, exported[spec.name].astype(PRECISIONS[precision]), spec.trainable)
    logger.info(f"Loaded LLM block from {cfg.checkpoint} (layer_index={cfg.layer_index}, frozen={cfg.frozen})")
    return fragment
