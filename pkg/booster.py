"""
Booster wiring around the frozen language-model block.

The encoder adapter F_E maps backbone width to block width, F_L is the frozen
block, the decoder adapter F_D maps back. Variants differ only in where the
residual paths sit (applied to the full token sequence, class token included):

    baseline       tokens
    r-llm          F_D(F_L(F_E(x)) + F_E(x))
    out-r-llm      F_D(F_L(F_E(x))) + x
    hybrid-r-llm   F_D(F_L(F_E(x)) + F_E(x)) + x
    mlp-control    F_D(F_E(x))

mlp-control carries exactly the trainable parameters of r-llm with the block
removed, so capacity alone can be compared against the frozen block.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np

from backbones import (
    BackboneConfig,
    backbone_forward,
    backbone_layout,
    classify,
    head_layout,
    pool,
)
from llm_block import PREFIX as LLM_PREFIX
from llm_block import LlmBlockConfig, llm_block_forward, llm_layout, load_or_synthesize
from nn_core import ConfigError, ParamStore, init_params, linear, linear_layout, top_level_module
from tensor_autograd import ShapeError, Tensor

logger = logging.getLogger(__name__)

ENCODER = "booster.encoder"
DECODER = "booster.decoder"


class BoosterVariant(str, Enum):
    BASELINE = "baseline"
    R_LLM = "r-llm"
    OUT_R_LLM = "out-r-llm"
    HYBRID_R_LLM = "hybrid-r-llm"
    MLP_CONTROL = "mlp-control"

    @classmethod
    def parse(cls, value: Any) -> "BoosterVariant":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("_", "-")
        for variant in cls:
            if variant.value == text:
                return variant
        raise ConfigError(f"Unknown booster variant '{value}'. Valid variants: "
                          f"{', '.join(v.value for v in cls)}")

    @property
    def uses_llm(self) -> bool:
        return self in (BoosterVariant.R_LLM, BoosterVariant.OUT_R_LLM, BoosterVariant.HYBRID_R_LLM)

    @property
    def uses_adapters(self) -> bool:
        return self is not BoosterVariant.BASELINE


@dataclass
class ModelSpec:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: BoosterVariant = BoosterVariant.R_LLM
    llm: LlmBlockConfig = field(default_factory=LlmBlockConfig)
    unfreeze_llm: bool = False

    def __post_init__(self):
        self.variant = BoosterVariant.parse(self.variant)
        self.llm.frozen = not self.unfreeze_llm

    @property
    def d_model(self) -> int:
        return self.backbone.d_model

    @property
    def d_llm(self) -> int:
        return self.llm.d_llm

    @property
    def n_classes(self) -> int:
        return self.backbone.n_classes

    def param_layout(self):
        """Every parameter except the LLM block, whose weights come from load_or_synthesize."""
        layout = backbone_layout(self.backbone)
        if self.variant.uses_adapters:
            layout += linear_layout(ENCODER, self.d_model, self.d_llm)
            layout += linear_layout(DECODER, self.d_llm, self.d_model)
        layout += head_layout(self.d_model, self.n_classes)
        return layout


def build_model_params(spec: ModelSpec, seed: int, precision: str = "single") -> ParamStore:
    store = init_params(spec, seed, precision)
    if spec.variant.uses_llm:
        store.merge(load_or_synthesize(spec.llm, precision))
    logger.info(f"Built {spec.variant.value} model: {store.param_count()} parameters, "
                f"{store.param_count(trainable=True)} trainable")
    return store


def load_pretrained(store: ParamStore, source: ParamStore, prefixes: Iterable[str] = ("backbone",)) -> int:
    """Overwrite tensors under ``prefixes`` with same-named tensors from ``source``."""
    copied = 0
    for prefix in prefixes:
        for name in source.names(prefix):
            if name not in store:
                continue
            target = store[name]
            incoming = source[name].data
            if incoming.shape != target.shape:
                raise ConfigError(f"Pretrained tensor '{name}' has shape {incoming.shape}, "
                                  f"model expects {target.shape}")
            target.data = np.ascontiguousarray(incoming, dtype=target.data.dtype)
            copied += 1
    logger.info(f"Copied {copied} pretrained tensors under {list(prefixes)}")
    return copied


def booster_forward(spec: ModelSpec, store: ParamStore, tokens: Tensor,
                    pad_mask: Optional[np.ndarray] = None) -> Tensor:
    variant = spec.variant
    if variant is BoosterVariant.BASELINE:
        return tokens
    if tokens.shape[-1] != spec.d_model:
        raise ShapeError(f"Booster expects token width {spec.d_model}, got {tokens.shape}")

    r = linear(store, ENCODER, tokens)
    if variant is BoosterVariant.MLP_CONTROL:
        return linear(store, DECODER, r)

    block = llm_block_forward(spec.llm, store, r, pad_mask)
    if variant is BoosterVariant.OUT_R_LLM:
        return linear(store, DECODER, block) + tokens
    z = linear(store, DECODER, block + r)
    if variant is BoosterVariant.HYBRID_R_LLM:
        return z + tokens
    return z


def full_forward(spec: ModelSpec, store: ParamStore, batch: Tensor,
                 pad_mask: Optional[np.ndarray] = None,
                 taps: Optional[Dict[str, Tensor]] = None) -> Tensor:
    tokens = backbone_forward(spec.backbone, store, batch, taps)
    return classify(store, pool(booster_forward(spec, store, tokens, pad_mask)))


def _accounting(spec: ModelSpec, entries: Iterable[Tuple[str, int, bool]]) -> Dict[str, Any]:
    per_module: Dict[str, Dict[str, int]] = {}
    for name, size, trainable in entries:
        counts = per_module.setdefault(top_level_module(name), {"total": 0, "trainable": 0, "frozen": 0})
        counts["total"] += size
        counts["trainable" if trainable else "frozen"] += size
    trainable = sum(c["trainable"] for c in per_module.values())
    frozen = sum(c["frozen"] for c in per_module.values())
    return {
        "variant": spec.variant.value,
        "total": trainable + frozen,
        "trainable": trainable,
        "frozen": frozen,
        "per_module": per_module,
    }


def param_accounting(spec: ModelSpec, store: ParamStore) -> Dict[str, Any]:
    """Exact parameter counts of a built store, overall and per top-level module."""
    return _accounting(spec, ((name, int(p.tensor.size), p.trainable) for name, p in store.items()))


def layout_accounting(spec: ModelSpec) -> Dict[str, Any]:
    """Same counts as param_accounting, computed from layouts without allocating weights."""
    layout = list(spec.param_layout())
    if spec.variant.uses_llm:
        layout += llm_layout(spec.llm)
    return _accounting(spec, ((p.name, p.size, p.trainable) for p in layout))


def llm_names(store: ParamStore):
    return store.names(LLM_PREFIX)
