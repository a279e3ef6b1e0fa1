"""
Unit tests for the channel branch: row-stochastic attention, loop-oracle
agreement for every compression / scaling / head variant, the zero-value
fixed point and the compression warnings.
"""

import logging

import numpy as np
import pytest

import pcsa
from exceptions import ConfigurationError, ShapeError
from models import PcsaConfig
from pcsa import channel_attention_matrix, compressed_grid, init_pcsa_params, pcsa_forward
from tensor import ParamStore, Tensor
from tests import loop_oracles as oracle


def _build(cfg, channels, rng=None):
    store = ParamStore()
    params = init_pcsa_params(store, channels, cfg)
    if rng is not None:
        for p in store:
            p.value.data[...] += 0.4 * rng.standard_normal(p.shape)
    return store, params


@pytest.mark.unit
class TestChannelAttention:

    def test_rows_sum_to_one(self, square_map, pcsa_cfg, rng):
        _, params = _build(pcsa_cfg, 8, rng)
        attn = channel_attention_matrix(square_map, params, pcsa_cfg)
        assert attn.shape == (2, 8, 8)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(attn.data >= 0.0)

    def test_multi_head_shape(self, square_map, rng):
        cfg = PcsaConfig(heads=2)
        _, params = _build(cfg, 8, rng)
        attn = channel_attention_matrix(square_map, params, cfg)
        assert attn.shape == (2, 2, 4, 4)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_output_shape(self, square_map, pcsa_cfg):
        _, params = _build(pcsa_cfg, 8)
        assert pcsa_forward(square_map, params, pcsa_cfg).shape == square_map.shape

    @pytest.mark.parametrize("cfg", [
        PcsaConfig(),
        PcsaConfig(scale_mode="sqrt_HW"),
        PcsaConfig(heads=2),
        PcsaConfig(heads=2, shuffle=True),
        PcsaConfig(heads=4, shuffle=True),
        PcsaConfig(progressive_compression=False),
        PcsaConfig(pre_norm=True),
    ], ids=["default", "sqrt_hw", "heads2", "heads2-shuffle", "heads4-shuffle", "wo-pc", "pre_norm"])
    def test_matches_loop_oracle(self, square_map, rng, cfg):
        _, params = _build(cfg, 8, rng)
        expected, _ = oracle.pcsa_oracle(square_map.data, params, cfg)
        np.testing.assert_allclose(pcsa_forward(square_map, params, cfg).data, expected, atol=1e-10)

    def test_windowed_compression_matches_loop_oracle(self, rng):
        cfg = PcsaConfig(pool_mode="windowed")
        x = Tensor(rng.standard_normal((2, 8, 15, 16)))
        _, params = _build(cfg, 8, rng)
        expected, _ = oracle.pcsa_oracle(x.data, params, cfg)
        np.testing.assert_allclose(pcsa_forward(x, params, cfg).data, expected, atol=1e-10)

    def test_shuffle_changes_output(self, square_map, rng):
        plain, shuffled = PcsaConfig(heads=2), PcsaConfig(heads=2, shuffle=True)
        _, params = _build(plain, 8, rng)
        assert not np.allclose(pcsa_forward(square_map, params, plain).data,
                               pcsa_forward(square_map, params, shuffled).data)

    def test_zero_values_gate_at_one_half(self, square_map, pcsa_cfg):
        _, params = _build(pcsa_cfg, 8)
        params.v_w.value.data[...] = 0.0
        params.v_b.value.data[...] = 0.0
        out = pcsa_forward(square_map, params, pcsa_cfg)
        np.testing.assert_allclose(out.data, 0.5 * square_map.data, atol=1e-15)

    def test_parameter_names(self):
        store, _ = _build(PcsaConfig(pre_norm=True), 8)
        assert store.names() == [
            "pcsa.q.weight", "pcsa.q.bias", "pcsa.k.weight", "pcsa.k.bias",
            "pcsa.v.weight", "pcsa.v.bias", "pcsa.norm.gamma", "pcsa.norm.beta",
        ]
        np.testing.assert_array_equal(store["pcsa.q.weight"].value.data, np.ones(8))


@pytest.mark.unit
class TestCompression:

    def test_compressed_grid(self):
        assert compressed_grid(56, 56, PcsaConfig()) == (7, 7)
        assert compressed_grid(56, 56, PcsaConfig(pool_mode="windowed")) == (8, 8)
        assert compressed_grid(5, 9, PcsaConfig()) == (5, 7)
        assert compressed_grid(12, 10, PcsaConfig(progressive_compression=False)) == (12, 10)

    def test_small_map_is_clamped_with_one_warning(self, monkeypatch, caplog, pcsa_cfg, rng):
        monkeypatch.setattr(pcsa, "_clamp_warned", set())
        _, params = _build(pcsa_cfg, 4)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)))
        with caplog.at_level(logging.WARNING, logger="pcsa"):
            first = pcsa_forward(x, params, pcsa_cfg)
            pcsa_forward(x, params, pcsa_cfg)
        clamped = [r for r in caplog.records if "clamping to 5x5" in r.getMessage()]
        assert len(clamped) == 1
        assert first.shape == x.shape

    def test_uncompressed_attention_over_budget_warns(self, caplog, rng):
        cfg = PcsaConfig(progressive_compression=False)
        _, params = _build(cfg, 8)
        x = Tensor(rng.standard_normal((1, 8, 60, 60)))
        with caplog.at_level(logging.WARNING, logger="pcsa"):
            pcsa_forward(x, params, cfg)
        assert any("budget" in r.getMessage() for r in caplog.records)

    def test_compressed_attention_does_not_warn(self, caplog, square_map, pcsa_cfg):
        _, params = _build(pcsa_cfg, 8)
        with caplog.at_level(logging.WARNING, logger="pcsa"):
            pcsa_forward(square_map, params, pcsa_cfg)
        assert caplog.records == []


@pytest.mark.unit
class TestPcsaErrors:

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigurationError) as exc:
            init_pcsa_params(ParamStore(), 6, PcsaConfig(heads=4))
        assert exc.value.key_path == "heads"

    def test_shuffle_needs_heads(self):
        with pytest.raises(ConfigurationError):
            PcsaConfig(shuffle=True)

    def test_rank_three_input(self, pcsa_cfg):
        _, params = _build(pcsa_cfg, 8)
        with pytest.raises(ShapeError):
            pcsa_forward(Tensor(np.ones((2, 8, 9))), params, pcsa_cfg)

    def test_pre_norm_without_norm_parameters(self, square_map, pcsa_cfg):
        _, params = _build(pcsa_cfg, 8)
        with pytest.raises(ShapeError):
            pcsa_forward(square_map, params, PcsaConfig(pre_norm=True))

    def test_params_for_another_width(self, square_map, pcsa_cfg):
        _, params = _build(pcsa_cfg, 4)
        with pytest.raises(ShapeError):
            pcsa_forward(square_map, params, pcsa_cfg)


@pytest.mark.unit
class TestPcsaInvariants:

    @staticmethod
    def _zero_query_key(params):
        for p in (params.q_w, params.q_b, params.k_w, params.k_b):
            p.value.data[...] = 0.0

    def test_zero_query_key_gives_uniform_rows(self, square_map, pcsa_cfg, rng):
        _, params = _build(pcsa_cfg, 8, rng)
        self._zero_query_key(params)
        attn = channel_attention_matrix(square_map, params, pcsa_cfg)
        np.testing.assert_allclose(attn.data, 1.0 / 8, atol=1e-15)

    def test_zero_query_key_mixes_the_channel_mean_of_values(self, pcsa_cfg, rng):
        # at 7x7 the compression is the identity, so V is an affine map of x
        x = rng.standard_normal((2, 8, 7, 7))
        _, params = _build(pcsa_cfg, 8, rng)
        self._zero_query_key(params)
        v_w, v_b = params.v_w.value.data, params.v_b.value.data
        values = v_w[None, :, None, None] * x + v_b[None, :, None, None]
        gate = 1.0 / (1.0 + np.exp(-values.mean(axis=(1, 2, 3))))
        out = pcsa_forward(Tensor(x), params, pcsa_cfg)
        np.testing.assert_allclose(out.data, gate[:, None, None, None] * x, atol=1e-12)

    def test_zero_query_key_is_channel_permutation_equivariant(self, square_map, pcsa_cfg, rng):
        _, params = _build(pcsa_cfg, 8)
        self._zero_query_key(params)
        perm = rng.permutation(8)
        out = pcsa_forward(square_map, params, pcsa_cfg).data
        permuted = pcsa_forward(Tensor(square_map.data[:, perm]), params, pcsa_cfg).data
        np.testing.assert_allclose(permuted, out[:, perm], atol=1e-12)

    def test_compression_is_exact_at_the_pooled_size(self, rng):
        x = Tensor(rng.standard_normal((2, 8, 7, 7)))
        on, off = PcsaConfig(), PcsaConfig(progressive_compression=False)
        _, params = _build(on, 8, rng)
        np.testing.assert_array_equal(pcsa_forward(x, params, on).data, pcsa_forward(x, params, off).data)

    def test_scale_modes_give_different_attention(self, square_map, rng):
        sqrt_c, sqrt_hw = PcsaConfig(), PcsaConfig(scale_mode="sqrt_HW")
        _, params = _build(sqrt_c, 8, rng)
        assert not np.allclose(channel_attention_matrix(square_map, params, sqrt_c).data,
                               channel_attention_matrix(square_map, params, sqrt_hw).data)

    @pytest.mark.parametrize("cfg", [PcsaConfig(), PcsaConfig(heads=2, shuffle=True),
                                     PcsaConfig(progressive_compression=False)],
                             ids=["default", "heads2-shuffle", "wo-pc"])
    def test_gate_never_amplifies(self, square_map, rng, cfg):
        _, params = _build(cfg, 8, rng)
        out = pcsa_forward(square_map, params, cfg)
        assert np.all(np.abs(out.data) <= np.abs(square_map.data))
