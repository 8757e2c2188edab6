"""Tests for the frozen language-model block."""

import numpy as np
import pytest

from checkpoint_storage import save_checkpoint
from llm_block import (
    LLM_PRESETS,
    LlmBlockConfig,
    LlmBlockError,
    llm_block_forward,
    llm_layout,
    llm_param_count,
    load_or_synthesize,
)
from nn_core import ConfigError, ParamStore, layout_param_count
from tensor_autograd import ShapeError, Tensor

SMALL = dict(d_llm=8, n_heads=2, d_ffn=12)


def _tokens(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def _block(seed=7, **overrides):
    cfg = LlmBlockConfig(**{**SMALL, "seed": seed, **overrides})
    return cfg, load_or_synthesize(cfg, precision="double")


def _zero_projections(store):
    for name in store.names():
        if name.endswith("attn.out.weight") or name.endswith("mlp.down.weight"):
            store[name].data[...] = 0.0


class TestParamCount:
    def test_llama_7b_block(self):
        cfg = LlmBlockConfig(**LLM_PRESETS["llama-7b"])
        assert llm_param_count(cfg) == 202_383_360

    def test_small_block(self):
        assert llm_param_count(LlmBlockConfig(d_llm=64, n_heads=4, d_ffn=172)) == 49_536

    def test_degenerate_ffn(self):
        assert llm_param_count(LlmBlockConfig(d_llm=16, n_heads=2, d_ffn=0)) == 4 * 16 * 16 + 2 * 16

    def test_layout_agrees_with_formula(self):
        cfg = LlmBlockConfig(d_llm=64, n_heads=4, d_ffn=172, depth=3)
        assert layout_param_count(llm_layout(cfg)) == llm_param_count(cfg) == 3 * 49_536


class TestForward:
    def test_zero_projections_give_identity(self):
        cfg, store = _block()
        _zero_projections(store)
        x = _tokens((2, 5, 8))
        np.testing.assert_array_equal(llm_block_forward(cfg, store, Tensor(x)).data, x)

    def test_permutation_equivariance(self):
        cfg, store = _block()
        x = _tokens((2, 6, 8))
        perm = np.array([3, 0, 5, 1, 4, 2])
        out = llm_block_forward(cfg, store, Tensor(x)).data
        permuted = llm_block_forward(cfg, store, Tensor(x[:, perm])).data
        np.testing.assert_allclose(permuted, out[:, perm], rtol=0, atol=1e-12)

    def test_single_token_shape(self):
        cfg, store = _block()
        out = llm_block_forward(cfg, store, Tensor(_tokens((3, 1, 8))))
        assert out.shape == (3, 1, 8)
        assert np.isfinite(out.data).all()

    def test_non_causal(self):
        cfg, store = _block()
        x = _tokens((1, 4, 8))
        before = llm_block_forward(cfg, store, Tensor(x)).data
        x[0, 3] += 1.0
        after = llm_block_forward(cfg, store, Tensor(x)).data
        assert np.abs(after[0, 0] - before[0, 0]).max() > 0.0

    def test_width_mismatch(self):
        cfg, store = _block()
        with pytest.raises(ShapeError):
            llm_block_forward(cfg, store, Tensor(_tokens((1, 3, 9))))

    def test_stacked_blocks_all_used(self):
        cfg, store = _block(depth=2)
        _zero_projections(store)
        store["llm_block.1.mlp.down.weight"].data[0, 0] = 1.0
        x = _tokens((1, 3, 8))
        assert not np.array_equal(llm_block_forward(cfg, store, Tensor(x)).data, x)


class TestLoadOrSynthesize:
    def test_synthetic_is_deterministic(self):
        _, a = _block(seed=7)
        _, b = _block(seed=7)
        assert a.bitwise_equal(b)

    def test_frozen_by_default(self):
        _, store = _block()
        assert store.names() == store.names("llm_block")
        assert all(not p.trainable for _, p in store.items())

    def test_unfrozen_block_is_trainable(self):
        _, store = _block(frozen=False)
        assert all(p.trainable for _, p in store.items())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LlmBlockConfig(d_llm=10, n_heads=4)
        with pytest.raises(ConfigError):
            LlmBlockConfig(source="checkpoint")

    def test_checkpoint_round_trip(self, tmp_path):
        cfg, store = _block(seed=3)
        path = str(tmp_path / "block.rlbk")
        save_checkpoint(store, path)
        loaded = load_or_synthesize(LlmBlockConfig(**SMALL, source="checkpoint", checkpoint=path),
                                    precision="double")
        assert loaded.bitwise_equal(store)

    def test_checkpoint_dimension_mismatch_lists_both(self, tmp_path):
        _, store = _block()
        path = str(tmp_path / "block.rlbk")
        save_checkpoint(store, path)
        wrong = LlmBlockConfig(d_llm=16, n_heads=2, d_ffn=12, source="checkpoint", checkpoint=path)
        with pytest.raises(LlmBlockError) as exc:
            load_or_synthesize(wrong)
        message = str(exc.value)
        assert "(16, 16)" in message and "(8, 8)" in message

    def test_layer_index_selects_exported_layer(self, tmp_path):
        cfg, store = _block(seed=11)
        export = ParamStore()
        for name in store.names():
            suffix = name[len("llm_block.0."):]
            export.register(f"layers.0.{suffix}", np.zeros_like(store[name].data), trainable=False)
            export.register(f"layers.5.{suffix}", store[name].data, trainable=False)
        path = str(tmp_path / "export.rlbk")
        save_checkpoint(export, path)
        picked = load_or_synthesize(LlmBlockConfig(**SMALL, source="checkpoint", checkpoint=path, layer_index=5),
                                    precision="double")
        assert picked.bitwise_equal(store)

    def test_missing_layer_index(self, tmp_path):
        _, store = _block()
        path = str(tmp_path / "block.rlbk")
        save_checkpoint(store, path)
        with pytest.raises(LlmBlockError):
            load_or_synthesize(LlmBlockConfig(**SMALL, source="checkpoint", checkpoint=path, layer_index=2))
