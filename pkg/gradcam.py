"""
Grad-CAM for token-based 2D vision transformers, plus Netpbm export.

The patch tokens of a backbone block output are treated like the spatial
positions of a convolutional feature map: the class token is dropped, the
remaining T = (H/P)(W/P) tokens are weighted by the token-averaged gradient of
the target logit and folded back onto the patch grid.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from booster import ModelSpec, full_forward
from nn_core import ParamStore
from tensor_autograd import Tape, Tensor, backward, getitem

logger = logging.getLogger(__name__)

OVERLAY_ALPHA = 0.5


class GradCamError(ValueError):
    """Grad-CAM cannot be computed for this model, layer or target."""


@dataclass
class Heatmap:
    grid: np.ndarray
    target_class: int
    layer: str

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape


def _frozen_view(store: ParamStore) -> ParamStore:
    # Same arrays, no requires_grad, so backward leaves parameter grads alone
    view = ParamStore()
    for name in store:
        view.register(name, store[name].data, trainable=False)
    return view


def grad_cam(spec: ModelSpec, store: ParamStore, image: np.ndarray, target_class: Optional[int] = None,
             layer: Optional[str] = None) -> Heatmap:
    """
    Saliency grid of shape (H/P, W/P) for one channel-first image.

    ``target_class`` defaults to the predicted class; ``layer`` defaults to the
    last backbone block, e.g. ``backbone.blocks.3``.
    """
    backbone = spec.backbone
    if backbone.kind != "vit2d":
        raise GradCamError(f"Grad-CAM supports 2D models only, got a {backbone.kind} backbone")
    layers = backbone.block_names()
    layer = layer or layers[-1]
    if layer not in layers:
        raise GradCamError(f"Unknown layer '{layer}'. Valid layers: {', '.join(layers)}")
    image = np.asarray(image)
    if image.shape != backbone.input_shape:
        raise GradCamError(f"Image has shape {image.shape}, model expects {backbone.input_shape}")

    view = _frozen_view(store)
    dtype = store[store.names()[0]].data.dtype
    taps: Dict[str, Tensor] = {}
    with Tape(record_all=True):
        logits = full_forward(spec, view, Tensor(image[None].astype(dtype)), taps=taps)
        if target_class is None:
            target_class = int(np.argmax(logits.data[0]))
        if not 0 <= target_class < logits.shape[1]:
            raise GradCamError(f"target_class {target_class} outside [0, {logits.shape[1]})")
        activations = taps[layer]
        backward(getitem(logits, (0, target_class)), retain=[activations])

    acts = activations.data[0, 1:, :].astype(np.float64)
    grads = activations.grad[0, 1:, :].astype(np.float64) if activations.grad is not None \
        else np.zeros_like(acts)
    weights = grads.mean(axis=0)
    cam = np.maximum(acts @ weights, 0.0).reshape(backbone.grid)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    logger.debug(f"Grad-CAM on {layer} for class {target_class}: peak {peak:.4g}")
    return Heatmap(grid=cam, target_class=target_class, layer=layer)


# ---- Netpbm ----

def _quantise(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write(path: str, header: str, payload: np.ndarray) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(payload).tobytes())
    return path


def write_heatmap_pgm(heatmap: Heatmap, path: str) -> str:
    """Binary greyscale PGM (P5, maxval 255) of the raw grid."""
    grid = _quantise(heatmap.grid)
    height, width = grid.shape
    return _write(path, f"P5\n{width} {height}\n255\n", grid)


def write_overlay_ppm(heatmap: Heatmap, image: np.ndarray, path: str, upscale: Optional[int] = None) -> str:
    """
    Binary PPM (P6) of the heatmap, nearest-upscaled and drawn as a red ramp,
    alpha-blended at 0.5 over the greyscale image. Multi-channel images are
    averaged to grey first.
    """
    image = np.asarray(image, dtype=np.float64)
    grey = image.mean(axis=0) if image.ndim == 3 else image
    if grey.ndim != 2:
        raise GradCamError(f"Overlay needs a 2D image, got shape {image.shape}")
    rows, cols = heatmap.grid.shape
    if upscale is None:
        upscale = grey.shape[0] // rows
    if upscale < 1 or (rows * upscale, cols * upscale) != grey.shape:
        raise GradCamError(f"A {rows}x{cols} grid upscaled by {upscale} does not cover a "
                           f"{grey.shape[0]}x{grey.shape[1]} image")
    heat = np.repeat(np.repeat(heatmap.grid, upscale, axis=0), upscale, axis=1)
    base = np.repeat(np.clip(grey, 0.0, 1.0)[:, :, None], 3, axis=2)
    ramp = np.zeros_like(base)
    ramp[:, :, 0] = heat
    rgb = _quantise((1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * ramp)
    height, width = grey.shape
    return _write(path, f"P6\n{width} {height}\n255\n", rgb)


def read_netpbm(path: str) -> Tuple[str, np.ndarray]:
    """Parse a binary P5/P6 file; returns the magic and an (H, W) or (H, W, 3) uint8 array."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise GradCamError(f"{path}: truncated Netpbm header")
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte after maxval
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise GradCamError(f"{path}: unsupported Netpbm variant {magic} with maxval {maxval}")
    channels = 3 if magic == "P6" else 1
    payload = blob[pos:]
    if len(payload) != width * height * channels:
        raise GradCamError(f"{path}: payload has {len(payload)} bytes, expected {width * height * channels}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return magic, np.frombuffer(payload, dtype=np.uint8).reshape(shape)
