"""Tests for Grad-CAM heatmaps and the Netpbm writers."""

import numpy as np
import pytest

from backbones import BackboneConfig
from booster import DECODER, ENCODER, ModelSpec, build_model_params, llm_names
from gradcam import (
    GradCamError,
    Heatmap,
    grad_cam,
    read_netpbm,
    write_heatmap_pgm,
    write_overlay_ppm,
)
from llm_block import LlmBlockConfig
from train_eval import predict_logits


def _spec(variant="r-llm", depth=2):
    backbone = BackboneConfig(d_model=16, depth=depth, n_heads=2, patch=(4,), input_shape=(1, 16, 16),
                              n_classes=3)
    return ModelSpec(backbone=backbone, variant=variant, llm=LlmBlockConfig(d_llm=8, n_heads=2, d_ffn=12))


# --- Sample image ---

IMAGE = np.random.default_rng(0).uniform(size=(1, 16, 16)).astype(np.float32)


class TestGradCam:
    @pytest.mark.parametrize("variant", ["baseline", "r-llm", "hybrid-r-llm"])
    def test_grid_shape_and_range(self, variant):
        spec = _spec(variant)
        heatmap = grad_cam(spec, build_model_params(spec, seed=1), IMAGE)
        assert heatmap.shape == (4, 4)
        assert heatmap.grid.min() >= 0.0
        assert heatmap.grid.max() <= 1.0
        assert heatmap.grid.max() in (0.0, 1.0)

    def test_defaults_to_predicted_class_and_last_block(self):
        spec = _spec()
        store = build_model_params(spec, seed=1)
        heatmap = grad_cam(spec, store, IMAGE)
        assert heatmap.layer == "backbone.blocks.1"
        assert heatmap.target_class == int(np.argmax(predict_logits(spec, store, IMAGE[None])[0]))

    def test_explicit_layer_and_target(self):
        spec = _spec()
        heatmap = grad_cam(spec, build_model_params(spec, seed=1), IMAGE, target_class=2,
                           layer="backbone.blocks.0")
        assert (heatmap.target_class, heatmap.layer) == (2, "backbone.blocks.0")

    def test_parameters_are_untouched(self):
        spec = _spec()
        store = build_model_params(spec, seed=1)
        digest = store.digest()
        grad_cam(spec, store, IMAGE)
        assert store.digest() == digest
        assert store.grads() == {}

    def test_deterministic(self):
        spec = _spec()
        store = build_model_params(spec, seed=1)
        np.testing.assert_array_equal(grad_cam(spec, store, IMAGE).grid, grad_cam(spec, store, IMAGE).grid)

    def test_unknown_layer(self):
        spec = _spec()
        with pytest.raises(GradCamError, match="backbone.blocks.0"):
            grad_cam(spec, build_model_params(spec, seed=1), IMAGE, layer="backbone.blocks.7")

    def test_target_out_of_range(self):
        spec = _spec()
        with pytest.raises(GradCamError):
            grad_cam(spec, build_model_params(spec, seed=1), IMAGE, target_class=3)

    def test_image_shape_mismatch(self):
        spec = _spec()
        with pytest.raises(GradCamError):
            grad_cam(spec, build_model_params(spec, seed=1), IMAGE[:, :8, :8])

    def test_volumetric_backbones_are_rejected(self):
        backbone = BackboneConfig(kind="vit3d", d_model=8, depth=1, n_heads=2, patch=(4, 4, 4),
                                  input_shape=(1, 8, 8, 8), n_classes=2)
        spec = ModelSpec(backbone=backbone, variant="baseline")
        with pytest.raises(GradCamError, match="2D"):
            grad_cam(spec, build_model_params(spec, seed=0), np.zeros((1, 8, 8, 8)))


class TestNetpbm:
    HEAT = Heatmap(grid=np.array([[0.0, 0.5], [1.0, 0.25]]), target_class=0, layer="backbone.blocks.0")

    def test_pgm_round_trip(self, tmp_path):
        path = write_heatmap_pgm(self.HEAT, str(tmp_path / "heat.pgm"))
        magic, pixels = read_netpbm(path)
        assert magic == "P5"
        assert pixels.tolist() == [[0, 128], [255, 64]]

    def test_pgm_header(self, tmp_path):
        path = write_heatmap_pgm(self.HEAT, str(tmp_path / "heat.pgm"))
        with open(path, "rb") as f:
            assert f.read().startswith(b"P5\n2 2\n255\n")

    def test_overlay(self, tmp_path):
        image = np.full((1, 4, 4), 0.5)
        path = write_overlay_ppm(self.HEAT, image, str(tmp_path / "overlay.ppm"))
        magic, pixels = read_netpbm(path)
        assert magic == "P6"
        assert pixels.shape == (4, 4, 3)
        # top-left cell has zero heat, bottom-left full heat
        assert pixels[0, 0].tolist() == [64, 64, 64]
        assert pixels[3, 0].tolist() == [191, 64, 64]

    def test_overlay_averages_rgb(self, tmp_path):
        image = np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.full((2, 2), 0.5)])
        magic, pixels = read_netpbm(write_overlay_ppm(self.HEAT, image, str(tmp_path / "rgb.ppm")))
        assert pixels[0, 0].tolist() == [64, 64, 64]

    def test_overlay_size_mismatch(self, tmp_path):
        with pytest.raises(GradCamError):
            write_overlay_ppm(self.HEAT, np.zeros((1, 5, 4)), str(tmp_path / "bad.ppm"))

    def test_read_rejects_truncated_payload(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n2 2\n255\n\x00\x01")
        with pytest.raises(GradCamError):
            read_netpbm(str(path))

    def test_read_skips_comments(self, tmp_path):
        path = tmp_path / "comment.pgm"
        path.write_bytes(b"P5\n# made by hand\n1 2\n255\n\x07\x09")
        magic, pixels = read_netpbm(str(path))
        assert pixels.tolist() == [[7], [9]]


def test_zero_classifier_gives_empty_heatmap():
    spec = _spec()
    store = build_model_params(spec, seed=1)
    store["head.fc2.weight"].data[...] = 0.0
    heatmap = grad_cam(spec, store, IMAGE, target_class=0)
    assert heatmap.shape == (4, 4)
    assert not heatmap.grid.any()


def test_mirror_symmetric_input_and_model_give_symmetric_heatmap():
    spec = _spec("baseline")
    store = build_model_params(spec, seed=4, precision="double")
    rows, cols = spec.backbone.grid
    pos = store["backbone.pos_embed"].data
    for r in range(rows):
        for c in range(cols // 2):
            pos[0, 1 + r * cols + cols - 1 - c] = pos[0, 1 + r * cols + c]

    image = np.random.default_rng(5).uniform(size=(1, 16, 16))
    patch = spec.backbone.patch[1]
    for c in range(cols // 2):
        m = cols - 1 - c
        image[:, :, m * patch:(m + 1) * patch] = image[:, :, c * patch:(c + 1) * patch]

    for target in range(spec.n_classes):
        grid = grad_cam(spec, store, image, target_class=target).grid
        np.testing.assert_allclose(grid, grid[:, ::-1], atol=1e-9)


def test_identity_acting_block_keeps_the_hottest_cell():
    base_spec = _spec("baseline")
    base = build_model_params(base_spec, seed=2, precision="double")
    boosted_spec = ModelSpec(backbone=base_spec.backbone, variant="r-llm",
                             llm=LlmBlockConfig(d_llm=16, n_heads=2, d_ffn=12))
    boosted = build_model_params(boosted_spec, seed=2, precision="double")
    for name in base:
        boosted[name].data[...] = base[name].data
    for name in llm_names(boosted):
        if name.endswith(("attn.out.weight", "mlp.down.weight")):
            boosted[name].data[...] = 0.0
    eye = np.eye(16)
    boosted[f"{ENCODER}.weight"].data[...] = eye
    boosted[f"{ENCODER}.bias"].data[...] = 0.0
    # the block doubles its input, the decoder halves it back
    boosted[f"{DECODER}.weight"].data[...] = 0.5 * eye
    boosted[f"{DECODER}.bias"].data[...] = 0.0

    image = np.random.default_rng(6).uniform(size=(1, 16, 16))
    for target in range(base_spec.n_classes):
        plain = grad_cam(base_spec, base, image, target_class=target).grid
        boosted_grid = grad_cam(boosted_spec, boosted, image, target_class=target).grid
        assert np.unravel_index(plain.argmax(), plain.shape) == \
            np.unravel_index(boosted_grid.argmax(), boosted_grid.shape)
        np.testing.assert_allclose(boosted_grid, plain, atol=1e-9)
