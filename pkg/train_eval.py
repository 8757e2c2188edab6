"""
AdamW training loop, evaluation metrics and the metrics report.

Training is single-threaded and deterministic for a fixed seed: mini-batch
order comes from PCG32, and evaluation batches (which may run on worker
threads) are reduced in batch order.
"""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import anyio
import numpy as np
from scipy.stats import rankdata

from booster import ModelSpec, build_model_params, full_forward, param_accounting
from checkpoint_storage import save_checkpoint
from data_io import DatasetBundle, DatasetSplit
from nn_core import ParamStore, Rng, uses_weight_decay
from report_format import format_epoch
from tensor_autograd import PRECISIONS, Tape, Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine")
SHUFFLE_STREAM = 17
LR_2D = 5e-4
LR_3D = 1e-5
CKPT_BEST = "ckpt_best.rlbk"
CKPT_LAST = "ckpt_last.rlbk"
METRICS_FILE = "metrics.json"


class OptimizerContractError(ValueError):
    """The optimizer was handed a gradient it must never apply."""


class FreezeViolationError(RuntimeError):
    """A frozen tensor changed during training."""


class UndefinedAucError(ValueError):
    """AUC needs both positive and negative examples."""


def default_lr(backbone_kind: str) -> float:
    return LR_2D if backbone_kind == "vit2d" else LR_3D


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    lr: float = LR_2D
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    schedule: str = "constant"
    warmup_epochs: int = 0
    grad_clip: Optional[float] = None
    checkpoint_every: int = 1
    eval_batch_size: int = 256
    precision: str = "single"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not (self.lr > 0):
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError(f"batch sizes must be >= 1, got {self.batch_size}/{self.eval_batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if not (self.eps > 0):
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"Unknown schedule '{self.schedule}'. Valid: {', '.join(SCHEDULES)}")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs + 1:
            raise ValueError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.grad_clip is not None and not (self.grad_clip > 0):
            raise ValueError(f"grad_clip must be > 0 when set, got {self.grad_clip}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"Unknown precision '{self.precision}'. Valid: {', '.join(PRECISIONS)}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(store: ParamStore, grads: Dict[str, np.ndarray], cfg: TrainConfig, t: int,
               state: Optional[AdamState] = None, lr: Optional[float] = None) -> AdamState:
    """
    One AdamW update of every trainable tensor in ``store``.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta, with
    weight decay skipped for normalisation parameters. Trainable tensors
    without an entry in ``grads`` are treated as having a zero gradient.
    """
    if t < 1:
        raise OptimizerContractError(f"AdamW step index must be >= 1, got {t}")
    for name in grads:
        if name not in store:
            raise OptimizerContractError(f"Gradient supplied for unknown parameter '{name}'")
        if not store.is_trainable(name):
            raise OptimizerContractError(f"Gradient supplied for frozen parameter '{name}'")

    state = state if state is not None else AdamState()
    lr = cfg.lr if lr is None else lr
    beta1, beta2 = cfg.betas
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name in store.trainable_names():
        theta = store[name]
        data = theta.data
        g = grads.get(name)
        g = np.zeros_like(data) if g is None else np.asarray(g, dtype=data.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m.astype(data.dtype), v.astype(data.dtype)
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        decay = cfg.weight_decay * data if uses_weight_decay(name) else 0.0
        theta.data = np.ascontiguousarray(data - lr * update - lr * decay, dtype=data.dtype)
    state.step = t
    return state


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to a global L2 norm of at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def lr_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Learning rate for 0-based global ``step``: linear warmup, then constant or cosine."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    if cfg.schedule == "constant":
        return cfg.lr
    total = cfg.epochs * steps_per_epoch - warmup
    progress = (step - warmup) / max(1, total)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy(pred_labels: Sequence[int], labels: Sequence[int]) -> float:
    pred, true = np.asarray(pred_labels).reshape(-1), np.asarray(labels).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"accuracy: {pred.shape[0]} predictions for {true.shape[0]} labels")
    if pred.size == 0:
        raise ValueError("accuracy: no samples")
    return float(np.mean(pred == true))


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC; tied scores count one half per tied pair."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(f"AUC needs both classes, got {n_pos} positive and {n_neg} negative")
    ranks = rankdata(scores)
    u = float(ranks[positive].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc(scores: np.ndarray, labels: Sequence[int]) -> Dict[str, Any]:
    """
    Binary AUC for 1-D scores (or [N, 2] probabilities); macro one-vs-rest AUC
    for [N, K] probabilities. Classes absent from ``labels`` are left out of the
    macro mean and reported as None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape[0] != labels.shape[0]:
        raise ValueError(f"auc: {scores.shape[0]} scores for {labels.shape[0]} labels")
    if scores.ndim == 2 and scores.shape[1] == 2:
        scores = scores[:, 1]
    if scores.ndim == 1:
        value = binary_auc(scores, labels == 1)
        return {"overall": value, "per_class": {"1": value}}

    per_class: Dict[str, Optional[float]] = {}
    for k in range(scores.shape[1]):
        positive = labels == k
        if positive.all() or not positive.any():
            per_class[str(k)] = None
            continue
        per_class[str(k)] = binary_auc(scores[:, k], positive)
    defined = [v for v in per_class.values() if v is not None]
    if not defined:
        raise UndefinedAucError("No class has both positive and negative examples")
    return {"overall": float(np.mean(defined)), "per_class": per_class}


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _batch_slices(n: int, batch_size: int) -> List[slice]:
    return [slice(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


async def _gather_in_order(fn: Callable[[Any], Any], items: Sequence[Any], workers: int) -> List[Any]:
    limiter = anyio.CapacityLimiter(max(1, workers))
    results: List[Any] = [None] * len(items)

    async def run_one(index: int, item: Any) -> None:
        results[index] = await anyio.to_thread.run_sync(fn, item, limiter=limiter)

    async with anyio.create_task_group() as tg:
        for index, item in enumerate(items):
            tg.start_soon(run_one, index, item)
    return results


def predict_logits(spec: ModelSpec, store: ParamStore, images: np.ndarray, batch_size: int = 256,
                   workers: int = 1) -> np.ndarray:
    """Inference-mode logits for ``images``; batches run on up to ``workers`` threads."""
    if images.shape[0] == 0:
        return np.zeros((0, spec.n_classes))
    dtype = store[store.names()[0]].data.dtype

    def run_batch(batch: slice) -> np.ndarray:
        return full_forward(spec, store, Tensor(images[batch].astype(dtype, copy=False))).data

    batches = _batch_slices(images.shape[0], batch_size)
    if workers <= 1 or len(batches) == 1:
        return np.concatenate([run_batch(b) for b in batches])
    return np.concatenate(anyio.run(_gather_in_order, run_batch, batches, workers))


def evaluate(spec: ModelSpec, store: ParamStore, split: DatasetSplit, batch_size: int = 256,
             workers: int = 1) -> Dict[str, Any]:
    """ACC and AUC of ``store`` on ``split``; AUC is None when it is undefined for the split."""
    if len(split) == 0:
        return {"acc": None, "auc": None, "per_class_auc": None, "loss": None}
    logits = predict_logits(spec, store, split.images, batch_size, workers)
    probs = softmax_probs(logits)
    rows = np.arange(len(split))
    loss = float(-np.mean(np.log(np.maximum(probs[rows, split.labels], 1e-300))))
    result: Dict[str, Any] = {"acc": accuracy(np.argmax(logits, axis=1), split.labels), "loss": loss}
    try:
        area = auc(probs, split.labels)
        result["auc"], result["per_class_auc"] = area["overall"], area["per_class"]
    except UndefinedAucError as e:
        logger.warning(f"AUC undefined on this split: {e}")
        result["auc"], result["per_class_auc"] = None, None
    return result


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    config: Dict[str, Any]
    param_counts: Dict[str, int]
    epochs: List[Dict[str, Any]] = field(default_factory=list)
    test: Dict[str, Any] = field(default_factory=dict)
    best_epoch: Optional[int] = None
    wall_clock_s: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write(self, path: str) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")
        return path


@dataclass
class TrainResult:
    report: MetricsReport
    best_store: ParamStore
    last_store: ParamStore


def _test_section(metrics: Dict[str, Any]) -> Dict[str, Any]:
    return {"acc": metrics["acc"], "auc": metrics["auc"], "per_class_auc": metrics["per_class_auc"]}


def train(spec: ModelSpec, data: DatasetBundle, cfg: TrainConfig, run_dir: Optional[str] = None,
          store: Optional[ParamStore] = None, workers: int = 1,
          config_echo: Optional[Dict[str, Any]] = None) -> TrainResult:
    """
    Train ``spec`` on ``data`` with AdamW and cross-entropy.

    Validation runs after every epoch; the parameters with the best validation
    AUC (earliest epoch on ties, last epoch when AUC is never defined) are
    evaluated on the test split. With ``run_dir`` the best and last
    checkpoints and metrics.json are written there.
    """
    if tuple(data.image_shape) != tuple(spec.backbone.input_shape):
        raise ValueError(f"Data images have shape {data.image_shape}, "
                         f"model expects {spec.backbone.input_shape}")
    if data.n_classes != spec.n_classes:
        raise ValueError(f"Data has {data.n_classes} classes, model head has {spec.n_classes}")

    started = time.perf_counter()
    if store is None:
        store = build_model_params(spec, cfg.seed, cfg.precision)
    frozen_names = [n for n in store.names() if not store.is_trainable(n)]
    frozen_digest = store.digest(frozen_names)
    dtype = PRECISIONS[cfg.precision]

    train_split = data.train
    n = len(train_split)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    shuffler = Rng(cfg.seed, stream=SHUFFLE_STREAM)
    state = AdamState()
    report = MetricsReport(config=config_echo or {}, param_counts={})
    accounting = param_accounting(spec, store)
    report.param_counts = {k: accounting[k] for k in ("total", "trainable", "frozen")}

    best_store = store.copy()
    best_auc: Optional[float] = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffler.permutation(n)
        loss_sum, correct = 0.0, 0
        for batch in _batch_slices(n, cfg.batch_size):
            idx = order[batch]
            labels = train_split.labels[idx]
            x = Tensor(train_split.images[idx].astype(dtype, copy=False))
            with Tape():
                logits = full_forward(spec, store, x)
                loss = cross_entropy(logits, labels)
                backward(loss)
            grads = store.grads()
            if cfg.grad_clip is not None:
                clip_gradients(grads, cfg.grad_clip)
            step += 1
            adamw_step(store, grads, cfg, step, state, lr_at(cfg, step - 1, steps_per_epoch))
            store.zero_grad()
            loss_sum += float(loss.item()) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))

        if store.digest(frozen_names) != frozen_digest:
            raise FreezeViolationError(f"Frozen parameters changed during epoch {epoch}")

        val = evaluate(spec, store, data.val, cfg.eval_batch_size, workers)
        record = {"epoch": epoch, "train_loss": loss_sum / n, "train_acc": correct / n,
                  "val_acc": val["acc"], "val_auc": val["auc"]}
        report.epochs.append(record)
        logger.info(f"{format_epoch(record)} (of {cfg.epochs})")

        improved = val["auc"] is not None and (best_auc is None or val["auc"] > best_auc)
        if improved or (best_auc is None and val["auc"] is None):
            best_auc = val["auc"] if val["auc"] is not None else best_auc
            best_store = store.copy()
            report.best_epoch = epoch
            if run_dir:
                save_checkpoint(best_store, os.path.join(run_dir, CKPT_BEST))
        if run_dir and cfg.checkpoint_every and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            save_checkpoint(store, os.path.join(run_dir, CKPT_LAST))

    if run_dir and not cfg.checkpoint_every:
        save_checkpoint(store, os.path.join(run_dir, CKPT_LAST))

    report.test = _test_section(evaluate(spec, best_store, data.test, cfg.eval_batch_size, workers))
    report.wall_clock_s = round(time.perf_counter() - started, 3)
    logger.info(f"Finished training: best epoch {report.best_epoch}, test acc={report.test['acc']}, "
                f"test auc={report.test['auc']}")
    if run_dir:
        report.write(os.path.join(run_dir, METRICS_FILE))
    return TrainResult(report=report, best_store=best_store, last_store=store)
