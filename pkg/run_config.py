"""
JSON run configuration: parsing, --set overrides, validation and resolution.

A run config has four sections:

    {
      "model": {"preset": "vit-tiny", "backbone": {...}, "variant": "r-llm",
                "llm": {"preset": "desk", ...}, "unfreeze_llm": false,
                "init_from": null},
      "train": {"epochs": 30, "lr": 5e-4, ...},
      "data": {"kind": "synthetic", "generator": "blobs2d", ...},
      "output_dir": "runs/blobs2d-r-llm"
    }

Resolution fills every default, so the resolved dictionary echoed to
``resolved_config.json`` fully determines the run. Every failure is a
RunConfigError naming the offending JSON path.
"""

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from backbones import BACKBONE_PRESETS, BackboneConfig, preset_config
from booster import BoosterVariant, ModelSpec
from data_io import MAX_SYNTHETIC_CLASSES, MIN_SYNTHETIC_PER_CLASS, SYNTHETIC_KINDS, SYNTHETIC_SIZE
from llm_block import LLM_PRESETS, LlmBlockConfig
from nn_core import ConfigError
from train_eval import TrainConfig, default_lr

logger = logging.getLogger(__name__)

PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
DOTENV_PATH = os.path.join(PROJECT_ROOT, '.env')

DATA_KINDS = ("synthetic", "npz", "dir")
TOP_LEVEL_KEYS = ("model", "train", "data", "output_dir")
MODEL_KEYS = ("preset", "backbone", "variant", "llm", "unfreeze_llm", "init_from")
BACKBONE_KEYS = tuple(f.name for f in fields(BackboneConfig))
LLM_KEYS = ("preset",) + tuple(f.name for f in fields(LlmBlockConfig) if f.name != "frozen")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
DATA_KEYS = ("kind", "path", "generator", "n_per_class", "n_classes", "seed", "channels", "resize")

DEFAULT_DATA = {"kind": "synthetic", "path": None, "generator": "blobs2d", "n_per_class": 100,
                "n_classes": 4, "seed": 0, "channels": None, "resize": None}

# Field types checked before any config object is built. "ints" is a list of ints.
BACKBONE_TYPES = {"kind": "str", "d_model": "int", "depth": "int", "depth_temporal": "int", "n_heads": "int",
                  "ffn_ratio": "number", "patch": "ints", "input_shape": "ints", "n_classes": "int",
                  "pooling": "str"}
LLM_TYPES = {"d_llm": "int", "n_heads": "int", "d_ffn": "int", "eps": "number", "source": "str", "seed": "int",
             "checkpoint": "str?", "layer_index": "int?", "depth": "int"}


class RunConfigError(ValueError):
    """A run config is invalid; ``path`` is the dotted JSON path of the offending value."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: Optional[str] = None
    generator: str = "blobs2d"
    n_per_class: int = 100
    n_classes: int = 4
    seed: int = 0
    channels: Optional[int] = None
    resize: Optional[int] = None


@dataclass
class ResolvedConfig:
    model: ModelSpec
    train: TrainConfig
    data: DataConfig
    output_dir: str
    resolved: Dict[str, Any]
    init_from: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.resolved)

    def with_variant(self, variant: str, output_dir: str) -> "ResolvedConfig":
        raw = self.to_dict()
        raw["model"]["variant"] = variant
        raw["output_dir"] = output_dir
        return resolve(raw)

    def model_for(self, n_classes: int, input_shape: Sequence[int]) -> ModelSpec:
        """Rebuild the model spec for the dimensions of the loaded data."""
        backbone = dict(self.resolved["model"]["backbone"])
        if tuple(backbone["input_shape"]) != tuple(input_shape):
            raise RunConfigError("model.backbone.input_shape",
                                 f"model expects {tuple(backbone['input_shape'])}, data has {tuple(input_shape)}")
        backbone["n_classes"] = n_classes
        try:
            return ModelSpec(backbone=BackboneConfig(**backbone), variant=self.model.variant,
                             llm=LlmBlockConfig(**asdict(self.model.llm)),
                             unfreeze_llm=self.model.unfreeze_llm)
        except ConfigError as e:
            raise RunConfigError("model.backbone", str(e))


# ---- parsing ----

def parse_json(text: str, source: str = "<config>") -> Dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise RunConfigError("<root>", f"invalid JSON in {source} at line {e.lineno} column {e.colno}: {e.msg}")
    if not isinstance(doc, dict):
        raise RunConfigError("<root>", "a run config must be a JSON object")
    return doc


def load_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise RunConfigError("<root>", f"cannot read {path}: {e}")
    return parse_json(text, path)


def parse_override(expr: str) -> Tuple[List[str], Any]:
    """``train.lr=1e-5`` -> (["train", "lr"], 1e-05); values that are not JSON stay strings."""
    if "=" not in expr:
        raise RunConfigError("--set", f"expected dotted.path=value, got '{expr}'")
    path, raw = expr.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise RunConfigError("--set", f"invalid path '{path}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_overrides(doc: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    doc = copy.deepcopy(doc)
    for expr in overrides:
        keys, value = parse_override(expr)
        node = doc
        for depth, key in enumerate(keys[:-1]):
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise RunConfigError(".".join(keys[:depth + 1]), "cannot set a key inside a non-object value")
            node = child
        node[keys[-1]] = value
    return doc


# ---- validation helpers ----

def _section(doc: Dict[str, Any], key: str, path: str) -> Dict[str, Any]:
    value = doc.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise RunConfigError(path, f"expected an object, got {type(value).__name__}")
    return value


def _reject_unknown(section: Dict[str, Any], allowed: Sequence[str], path: str) -> None:
    for key in section:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise RunConfigError(where, f"unknown key (valid keys: {', '.join(allowed)})")


def _check_type(value: Any, expected: Tuple[type, ...], path: str, nullable: bool = False) -> Any:
    if value is None and nullable:
        return value
    if isinstance(value, bool) and bool not in expected:
        raise RunConfigError(path, f"expected {'/'.join(t.__name__ for t in expected)}, got bool")
    if not isinstance(value, expected):
        raise RunConfigError(path, f"expected {'/'.join(t.__name__ for t in expected)}, "
                                   f"got {type(value).__name__}")
    return value


def _check_fields(values: Dict[str, Any], types: Dict[str, str], prefix: str) -> None:
    for key, value in values.items():
        kind = types.get(key)
        if kind is None:
            continue
        path = f"{prefix}.{key}"
        nullable = kind.endswith("?")
        kind = kind.rstrip("?")
        if kind == "ints":
            if not isinstance(value, (list, tuple)) or not value:
                raise RunConfigError(path, f"expected a non-empty list of ints, got {type(value).__name__}")
            for i, item in enumerate(value):
                _check_type(item, (int,), f"{path}[{i}]")
        elif kind == "int":
            _check_type(value, (int,), path, nullable=nullable)
        elif kind == "number":
            _check_type(value, (int, float), path, nullable=nullable)
        else:
            _check_type(value, (str,), path, nullable=nullable)


def _resolve_data(raw: Dict[str, Any]) -> DataConfig:
    _reject_unknown(raw, DATA_KEYS, "data")
    values = dict(DEFAULT_DATA)
    values.update(raw)
    if values["kind"] not in DATA_KINDS:
        raise RunConfigError("data.kind", f"unknown data kind '{values['kind']}' (valid: {', '.join(DATA_KINDS)})")
    _check_type(values["path"], (str,), "data.path", nullable=True)
    if values["kind"] != "synthetic" and not values["path"]:
        raise RunConfigError("data.path", f"data kind '{values['kind']}' needs a path")
    if values["generator"] not in SYNTHETIC_KINDS:
        raise RunConfigError("data.generator", f"unknown generator '{values['generator']}' "
                                               f"(valid: {', '.join(SYNTHETIC_KINDS)})")
    for key in ("n_per_class", "n_classes", "seed"):
        _check_type(values[key], (int,), f"data.{key}")
    if values["n_per_class"] < MIN_SYNTHETIC_PER_CLASS:
        raise RunConfigError("data.n_per_class", f"must be >= {MIN_SYNTHETIC_PER_CLASS} to fill every split, "
                                                 f"got {values['n_per_class']}")
    if not 2 <= values["n_classes"] <= MAX_SYNTHETIC_CLASSES:
        raise RunConfigError("data.n_classes", f"must lie in [2, {MAX_SYNTHETIC_CLASSES}], got {values['n_classes']}")
    for key in ("channels", "resize"):
        if _check_type(values[key], (int,), f"data.{key}", nullable=True) is not None and values[key] < 1:
            raise RunConfigError(f"data.{key}", f"must be >= 1, got {values[key]}")
    return DataConfig(**values)


def _synthetic_input_shape(data: DataConfig) -> List[int]:
    rank = 2 if data.generator == "blobs2d" else 3
    return [data.channels or 1] + [SYNTHETIC_SIZE] * rank


def _resolve_backbone(model: Dict[str, Any], data: DataConfig) -> BackboneConfig:
    preset = model.get("preset", "vit-tiny")
    if preset not in BACKBONE_PRESETS:
        raise RunConfigError("model.preset", f"unknown preset '{preset}' (valid: {', '.join(BACKBONE_PRESETS)})")
    overrides = _section(model, "backbone", "model.backbone")
    _reject_unknown(overrides, BACKBONE_KEYS, "model.backbone")
    _check_fields(overrides, BACKBONE_TYPES, "model.backbone")
    overrides = dict(overrides)
    if data.kind == "synthetic":
        overrides.setdefault("n_classes", data.n_classes)
        overrides.setdefault("input_shape", _synthetic_input_shape(data))
    elif data.resize is not None or data.channels is not None:
        shape = list(overrides.get("input_shape", BACKBONE_PRESETS[preset]["input_shape"]))
        if data.channels is not None:
            shape[0] = data.channels
        if data.resize is not None:
            shape[1:] = [data.resize] * (len(shape) - 1)
        overrides.setdefault("input_shape", shape)
    try:
        return preset_config(preset, **overrides)
    except (ConfigError, TypeError, ValueError) as e:
        raise RunConfigError("model.backbone", str(e))


def _resolve_llm(model: Dict[str, Any], unfreeze: bool) -> LlmBlockConfig:
    raw = _section(model, "llm", "model.llm")
    _reject_unknown(raw, LLM_KEYS, "model.llm")
    _check_fields({k: v for k, v in raw.items() if k != "preset"}, LLM_TYPES, "model.llm")
    preset = raw.get("preset", "desk")
    if preset not in LLM_PRESETS:
        raise RunConfigError("model.llm.preset", f"unknown LLM preset '{preset}' (valid: {', '.join(LLM_PRESETS)})")
    values: Dict[str, Any] = dict(LLM_PRESETS[preset])
    values.update({k: v for k, v in raw.items() if k != "preset"})
    values["frozen"] = not unfreeze
    try:
        return LlmBlockConfig(**values)
    except (ConfigError, TypeError, ValueError) as e:
        raise RunConfigError("model.llm", str(e))


def _resolve_train(raw: Dict[str, Any], backbone: BackboneConfig) -> TrainConfig:
    _reject_unknown(raw, TRAIN_KEYS, "train")
    values = dict(raw)
    if values.get("lr") is None:
        values["lr"] = default_lr(backbone.kind)
    for key, value in values.items():
        if key in ("schedule", "precision"):
            _check_type(value, (str,), f"train.{key}")
        elif key == "betas":
            if not isinstance(value, list) or len(value) != 2:
                raise RunConfigError("train.betas", "expected a list of two numbers")
        elif key == "grad_clip":
            _check_type(value, (int, float), "train.grad_clip", nullable=True)
        elif key in ("lr", "weight_decay", "eps"):
            _check_type(value, (int, float), f"train.{key}")
        else:
            _check_type(value, (int,), f"train.{key}")
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise RunConfigError("train", str(e))


# ---- entry points ----

def resolve(doc: Dict[str, Any]) -> ResolvedConfig:
    """Validate a parsed config document and fill in every default."""
    _reject_unknown(doc, TOP_LEVEL_KEYS, "")
    model_raw = _section(doc, "model", "model")
    _reject_unknown(model_raw, MODEL_KEYS, "model")
    data = _resolve_data(_section(doc, "data", "data"))

    unfreeze = _check_type(model_raw.get("unfreeze_llm", False), (bool,), "model.unfreeze_llm")
    init_from = _check_type(model_raw.get("init_from"), (str,), "model.init_from", nullable=True)
    backbone = _resolve_backbone(model_raw, data)
    llm = _resolve_llm(model_raw, unfreeze)
    try:
        variant = BoosterVariant.parse(model_raw.get("variant", "r-llm"))
    except ConfigError as e:
        raise RunConfigError("model.variant", str(e))
    train = _resolve_train(_section(doc, "train", "train"), backbone)
    output_dir = _check_type(doc.get("output_dir", "runs/default"), (str,), "output_dir")

    spec = ModelSpec(backbone=backbone, variant=variant, llm=llm, unfreeze_llm=unfreeze)
    llm_echo = asdict(llm)
    llm_echo.pop("frozen")
    resolved = {
        "model": {
            "preset": model_raw.get("preset", "vit-tiny"),
            "backbone": {**asdict(backbone), "patch": list(backbone.patch),
                         "input_shape": list(backbone.input_shape)},
            "variant": variant.value,
            "llm": {"preset": _section(model_raw, "llm", "model.llm").get("preset", "desk"), **llm_echo},
            "unfreeze_llm": unfreeze,
            "init_from": init_from,
        },
        "train": {**asdict(train), "betas": list(train.betas)},
        "data": asdict(data),
        "output_dir": output_dir,
    }
    return ResolvedConfig(model=spec, train=train, data=data, output_dir=output_dir,
                          resolved=resolved, init_from=init_from)


def load_run_config(path: str, overrides: Sequence[str] = ()) -> ResolvedConfig:
    doc = apply_overrides(load_json(path), overrides)
    resolved = resolve(doc)
    logger.info(f"Resolved run config {path} ({len(overrides)} overrides): variant "
                f"{resolved.model.variant.value}, backbone {resolved.model.backbone.kind}")
    return resolved


def worker_count() -> int:
    """Evaluation thread cap from FB_THREADS (default: CPU count)."""
    load_dotenv(DOTENV_PATH)
    raw = os.getenv("FB_THREADS")
    if raw is None or raw.strip() == "":
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise RunConfigError("FB_THREADS", f"expected a positive integer, got '{raw}'")
    if value < 1:
        raise RunConfigError("FB_THREADS", f"expected a positive integer, got {value}")
    return value


def default_config(preset: str = "vit-tiny", variant: str = "r-llm", llm_preset: str = "desk",
                   data_kind: str = "synthetic", data_path: Optional[str] = None,
                   output_dir: str = "runs/default", epochs: int = 30) -> Dict[str, Any]:
    """Minimal run config document for a preset and variant."""
    generator = "blobs2d" if BACKBONE_PRESETS.get(preset, {}).get("kind") == "vit2d" else "blobs3d"
    data: Dict[str, Any] = {"kind": data_kind}
    if data_kind == "synthetic":
        data["generator"] = generator
    else:
        data["path"] = data_path
    return {
        "model": {"preset": preset, "variant": variant, "llm": {"preset": llm_preset}},
        "train": {"epochs": epochs},
        "data": data,
        "output_dir": output_dir,
    }
