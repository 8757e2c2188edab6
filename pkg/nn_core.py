"""
Trainable layer primitives and the named parameter store.

Layers are plain functions over a ``ParamStore`` and a name prefix, e.g.
``linear(store, "booster.encoder", x)`` reads ``booster.encoder.weight`` and
``booster.encoder.bias``. Models describe their parameters as a list of
``ParamSpec`` entries (a layout); ``init_params`` turns a layout into a store
using the seeded PCG32 generator, so identical seeds give bitwise-identical
weights on every platform.
"""

import hashlib
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from tensor_autograd import (
    PRECISIONS,
    ShapeError,
    Tensor,
    concat,
    gelu,
    matmul,
    mul,
    reshape,
    silu,
    softmax_lastdim,
    swap_last,
    transpose,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class ConfigError(ValueError):
    """A layer or model configuration is invalid."""


class PaddingError(ValueError):
    """A sequence has no real tokens left after padding."""


# ---------------------------------------------------------------------------
# PCG32 random number generator
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
PCG_MULTIPLIER = 6364136223846793005
PCG_DEFAULT_STREAM = 54
_BLOCK = 4096
_U64 = np.uint64


def _pcg_output(old: np.ndarray) -> np.ndarray:
    xorshifted = (((old >> _U64(18)) ^ old) >> _U64(27)) & _U64(0xFFFFFFFF)
    rot = old >> _U64(59)
    return ((xorshifted >> rot) | (xorshifted << ((_U64(32) - rot) & _U64(31)))) & _U64(0xFFFFFFFF)


def _jump_tables(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Powers a^k and partial sums 1 + a + ... + a^(k-1), k = 1..n, mod 2^64."""
    with np.errstate(over="ignore"):
        powers = np.multiply.accumulate(np.full(n, PCG_MULTIPLIER, dtype=np.uint64))
        lower = np.concatenate([np.ones(1, dtype=np.uint64), powers[:-1]])
        sums = np.cumsum(lower, dtype=np.uint64)
    return powers, sums


_POWERS, _SUMS = _jump_tables(_BLOCK)


class Rng:
    """
    PCG32 (XSH-RR, 64-bit state, 64-bit increment) seeded like ``pcg32_srandom``.

    Blocks of draws are computed with the closed-form LCG jump
    state_k = a^k * state_0 + inc * (1 + a + ... + a^(k-1)) so long weight
    streams are generated without a Python loop, yet match ``next_u32`` draw
    for draw.
    """

    def __init__(self, seed: int, stream: int = PCG_DEFAULT_STREAM):
        self.inc = ((stream << 1) | 1) & _MASK64
        self.state = 0
        self._step()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * PCG_MULTIPLIER + self.inc) & _MASK64

    def next_u32(self) -> int:
        old = self.state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def u32(self, n: int) -> np.ndarray:
        """Next ``n`` raw 32-bit outputs as uint64 values."""
        out = np.empty(n, dtype=np.uint64)
        inc = _U64(self.inc)
        done = 0
        with np.errstate(over="ignore"):
            while done < n:
                take = min(_BLOCK, n - done)
                s0 = _U64(self.state)
                after = _POWERS[:take] * s0 + inc * _SUMS[:take]
                old = np.concatenate([np.array([s0], dtype=np.uint64), after[:-1]])
                out[done:done + take] = _pcg_output(old)
                self.state = int(after[-1])
                done += take
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1)."""
        return self.u32(n).astype(np.float64) / 4294967296.0

    def normal(self, n: int, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; an odd request discards the last sine half."""
        pairs = (n + 1) // 2
        draws = self.u32(2 * pairs).astype(np.float64)
        u1 = (draws[0::2] + 1.0) / 4294967296.0
        u2 = draws[1::2] / 4294967296.0
        radius = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(2.0 * math.pi * u2)
        out[1::2] = radius * np.sin(2.0 * math.pi * u2)
        return out[:n] * std

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        order = np.arange(n)
        if n < 2:
            return order
        draws = self.u32(n - 1)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[step]) % (i + 1)
            order[i], order[j] = order[j], order[i]
        return order


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

@dataclass
class Param:
    tensor: Tensor
    trainable: bool


def _valid_name(name: str) -> bool:
    return bool(name) and all(part for part in name.split("."))


def uses_weight_decay(name: str) -> bool:
    """Norm weights and biases are excluded from weight decay."""
    return not any("norm" in part for part in name.split(".")[:-1])


def top_level_module(name: str) -> str:
    return name.split(".", 1)[0]


class ParamStore:
    """Ordered map of dotted parameter names to tensors with a trainable flag."""

    def __init__(self):
        self._params: "OrderedDict[str, Param]" = OrderedDict()

    def register(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if not _valid_name(name):
            raise ConfigError(f"Invalid parameter name '{name}'")
        if name in self._params:
            raise ConfigError(f"Duplicate parameter name '{name}'")
        tensor = Tensor(data, requires_grad=trainable)
        self._params[name] = Param(tensor, trainable)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name].tensor
        except KeyError:
            raise KeyError(f"Parameter '{name}' is not in the store")

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self, prefix: Optional[str] = None) -> List[str]:
        if prefix is None:
            return list(self._params)
        return [n for n in self._params if n == prefix or n.startswith(prefix + ".")]

    def items(self) -> Iterator[Tuple[str, Param]]:
        return iter(self._params.items())

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def set_trainable(self, prefix: str, trainable: bool) -> int:
        """Flip the flag for ``prefix`` and everything under it; returns how many changed."""
        changed = 0
        for name in self.names(prefix):
            param = self._params[name]
            if param.trainable != trainable:
                changed += 1
            param.trainable = trainable
            param.tensor.requires_grad = trainable
            if not trainable:
                param.tensor.grad = None
        return changed

    def trainable_names(self) -> List[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def param_count(self, prefix: Optional[str] = None, trainable: Optional[bool] = None) -> int:
        total = 0
        for name in self.names(prefix):
            param = self._params[name]
            if trainable is None or param.trainable == trainable:
                total += int(param.tensor.size)
        return total

    def merge(self, other: "ParamStore") -> "ParamStore":
        for name, param in other.items():
            if name in self._params:
                raise ConfigError(f"Duplicate parameter name '{name}' while merging stores")
            self._params[name] = param
        return self

    def copy(self) -> "ParamStore":
        clone = ParamStore()
        for name, param in self._params.items():
            clone.register(name, param.tensor.data.copy(), param.trainable)
        return clone

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.tensor.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        """Gradients currently held by trainable parameters."""
        return {n: p.tensor.grad for n, p in self._params.items()
                if p.trainable and p.tensor.grad is not None}

    def digest(self, names: Optional[Iterable[str]] = None) -> str:
        """SHA-256 over the raw bytes of ``names`` (all parameters by default)."""
        h = hashlib.sha256()
        for name in (self._params if names is None else names):
            h.update(name.encode("utf-8"))
            h.update(self._params[name].tensor.data.tobytes())
        return h.hexdigest()

    def bitwise_equal(self, other: "ParamStore") -> bool:
        if list(self._params) != list(other._params):
            return False
        for name, param in self._params.items():
            theirs = other._params[name]
            if param.trainable != theirs.trainable:
                return False
            a, b = param.tensor.data, theirs.tensor.data
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


# ---------------------------------------------------------------------------
# Layouts and initialisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    init: str = "normal"  # normal | zeros | ones
    std: float = INIT_STD
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def linear_layout(prefix: str, d_in: int, d_out: int, bias: bool = True,
                  std: float = INIT_STD, trainable: bool = True) -> List[ParamSpec]:
    layout = [ParamSpec(f"{prefix}.weight", (d_in, d_out), "normal", std, trainable)]
    if bias:
        layout.append(ParamSpec(f"{prefix}.bias", (d_out,), "zeros", 0.0, trainable))
    return layout


def norm_layout(prefix: str, d: int, kind: str = "layernorm", trainable: bool = True) -> List[ParamSpec]:
    layout = [ParamSpec(f"{prefix}.weight", (d,), "ones", 0.0, trainable)]
    if kind == "layernorm":
        layout.append(ParamSpec(f"{prefix}.bias", (d,), "zeros", 0.0, trainable))
    return layout


def layout_param_count(layout: Iterable[ParamSpec]) -> int:
    return sum(spec.size for spec in layout)


def linear_param_count(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def init_params(spec, seed: int, precision: str = "single") -> ParamStore:
    """
    Build a ParamStore from a layout.

    ``spec`` is either an iterable of ParamSpec or any object exposing
    ``param_layout()``. Weights are Normal(0, std) from PCG32(seed) drawn in
    layout order, biases zero, norm weights one.
    """
    layout = spec.param_layout() if hasattr(spec, "param_layout") else spec
    dtype = PRECISIONS[precision]
    rng = Rng(seed)
    store = ParamStore()
    for entry in layout:
        if entry.init == "normal":
            data = rng.normal(entry.size, entry.std).reshape(entry.shape)
        elif entry.init == "zeros":
            data = np.zeros(entry.shape)
        elif entry.init == "ones":
            data = np.ones(entry.shape)
        else:
            raise ConfigError(f"Unknown initialiser '{entry.init}' for '{entry.name}'")
        store.register(entry.name, data.astype(dtype), entry.trainable)
    logger.debug(f"Initialised {len(store)} tensors ({store.param_count()} scalars) from seed {seed}")
    return store


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def linear(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    weight = store[f"{prefix}.weight"]
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear '{prefix}': input width {x.shape[-1]} does not match "
                         f"weight shape {weight.shape}")
    out = matmul(x, weight)
    bias_name = f"{prefix}.bias"
    if bias_name in store:
        out = out + store[bias_name]
    return out


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    masking: str = "padding_only"  # none | padding_only; causal masks do not exist here
    qkv_bias: bool = True

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model < 1:
            raise ConfigError(f"Attention needs positive d_model and n_heads, got {self.d_model}/{self.n_heads}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.masking not in ("none", "padding_only"):
            raise ConfigError(f"Unknown attention masking '{self.masking}'. Valid: none, padding_only")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def attention_layout(prefix: str, cfg: AttentionConfig, std: float = INIT_STD,
                     trainable: bool = True) -> List[ParamSpec]:
    layout: List[ParamSpec] = []
    for proj in ("q", "k", "v", "out"):
        layout += linear_layout(f"{prefix}.{proj}", cfg.d_model, cfg.d_model, cfg.qkv_bias, std, trainable)
    return layout


def padding_to_additive(pad_mask: np.ndarray, batch: int, tokens: int) -> np.ndarray:
    """Boolean keep-mask [B, T] -> additive mask [B, 1, 1, T] of 0 / -inf."""
    keep = np.asarray(pad_mask, dtype=bool)
    if keep.shape != (batch, tokens):
        raise ShapeError(f"pad_mask shape {keep.shape} does not match tokens [{batch}, {tokens}]")
    empty = np.flatnonzero(~keep.any(axis=1))
    if empty.size:
        raise PaddingError(f"Sequences {empty.tolist()} are entirely padding")
    return np.where(keep, 0.0, -np.inf)[:, None, None, :]


def multi_head_attention(cfg: AttentionConfig, store: ParamStore, prefix: str, x: Tensor,
                         pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product self-attention; padded keys are hidden, order is never."""
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ShapeError(f"attention '{prefix}' expects [B, T, {cfg.d_model}], got {x.shape}")
    batch, tokens, width = x.shape
    heads, head_dim = cfg.n_heads, cfg.head_dim

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, tokens, heads, head_dim)), (0, 2, 1, 3))

    q = split(linear(store, f"{prefix}.q", x))
    k = split(linear(store, f"{prefix}.k", x))
    v = split(linear(store, f"{prefix}.v", x))
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(head_dim))

    additive = None
    if pad_mask is not None and cfg.masking == "padding_only":
        additive = padding_to_additive(pad_mask, batch, tokens)
    weights = softmax_lastdim(scores, additive)
    context = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, tokens, width))
    return linear(store, f"{prefix}.out", context)


MLP_KINDS = ("gelu_2layer", "swiglu")


def mlp_layout(prefix: str, d: int, ff: int, kind: str, std: float = INIT_STD,
               trainable: bool = True) -> List[ParamSpec]:
    if kind == "gelu_2layer":
        return linear_layout(f"{prefix}.fc1", d, ff, True, std, trainable) + \
            linear_layout(f"{prefix}.fc2", ff, d, True, std, trainable)
    if kind == "swiglu":
        return linear_layout(f"{prefix}.gate", d, ff, False, std, trainable) + \
            linear_layout(f"{prefix}.up", d, ff, False, std, trainable) + \
            linear_layout(f"{prefix}.down", ff, d, False, std, trainable)
    raise ConfigError(f"Unknown MLP kind '{kind}'. Valid: {', '.join(MLP_KINDS)}")


def mlp_param_count(d: int, ff: int, kind: str) -> int:
    if kind == "gelu_2layer":
        return d * ff + ff + ff * d + d
    if kind == "swiglu":
        return 3 * d * ff
    raise ConfigError(f"Unknown MLP kind '{kind}'. Valid: {', '.join(MLP_KINDS)}")


def transformer_mlp(store: ParamStore, prefix: str, x: Tensor, kind: str) -> Tensor:
    if kind == "gelu_2layer":
        return linear(store, f"{prefix}.fc2", gelu(linear(store, f"{prefix}.fc1", x)))
    if kind == "swiglu":
        gated = mul(silu(linear(store, f"{prefix}.gate", x)), linear(store, f"{prefix}.up", x))
        return linear(store, f"{prefix}.down", gated)
    raise ConfigError(f"Unknown MLP kind '{kind}'. Valid: {', '.join(MLP_KINDS)}")


# ---------------------------------------------------------------------------
# Patch embeddings
# ---------------------------------------------------------------------------

def patch_token_count(spatial: Sequence[int], patch: Sequence[int]) -> int:
    count = 1
    for extent, p in zip(spatial, patch):
        count *= extent // p
    return count


def patch_embed_layout(prefix: str, channels: int, patch: Sequence[int], d: int,
                       trainable: bool = True) -> List[ParamSpec]:
    return linear_layout(prefix, channels * int(np.prod(patch)), d, True, INIT_STD, trainable)


def patch_embed_2d(store: ParamStore, prefix: str, images: Tensor, patch: int) -> Tensor:
    if images.ndim != 4:
        raise ShapeError(f"patch_embed_2d expects [B, C, H, W], got {images.shape}")
    batch, channels, height, width = images.shape
    if height % patch or width % patch:
        raise ShapeError(f"patch_embed_2d: image extents H={height}, W={width} are not "
                         f"divisible by patch size P={patch}")
    gh, gw = height // patch, width // patch
    x = reshape(images, (batch, channels, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (batch, gh * gw, channels * patch * patch))
    return linear(store, prefix, x)


def patch_embed_3d(store: ParamStore, prefix: str, volumes: Tensor, patch: Sequence[int]) -> Tensor:
    if volumes.ndim != 5:
        raise ShapeError(f"patch_embed_3d expects [B, C, D, H, W], got {volumes.shape}")
    batch, channels, depth, height, width = volumes.shape
    pd, ph, pw = patch
    if depth % pd or height % ph or width % pw:
        raise ShapeError(f"patch_embed_3d: volume extents D={depth}, H={height}, W={width} are not "
                         f"divisible by patch ({pd}, {ph}, {pw})")
    gd, gh, gw = depth // pd, height // ph, width // pw
    x = reshape(volumes, (batch, channels, gd, pd, gh, ph, gw, pw))
    x = transpose(x, (0, 2, 4, 6, 1, 3, 5, 7))
    x = reshape(x, (batch, gd * gh * gw, channels * pd * ph * pw))
    return linear(store, prefix, x)


def prepend_token(store: ParamStore, name: str, tokens: Tensor) -> Tensor:
    """Concatenate a learned [1, 1, d] token in front of every sequence."""
    token = store[name]
    batch = tokens.shape[0]
    cls = token if batch == 1 else concat([token] * batch, axis=0)
    return concat([cls, tokens], axis=1)
