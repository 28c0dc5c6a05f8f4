import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from mamsr import tensor_ops as ops
from mamsr.gradcheck import grad_check
from mamsr.model import (ALL_PATHS, ModelParams, NetworkConfig, Path, PRESETS, TABLE_COMBINATIONS, _block_forward,
                         capture_maps, count_params, icd_path, init_params, mamb_backward, mamb_forward, network_backward,
                         network_forward, network_forward_cached, param_increase_exact_pct, param_increase_pct,
                         param_shapes, param_table)
from mamsr.tensor_ops import ConvParams, DenseParams, PoolStatistic, ShapeError

ANALYSIS = NetworkConfig(blocks=16, channels=64, scale=2)


class TestNetworkConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert (cfg.blocks, cfg.channels, cfg.scale, cfg.reduction) == (16, 64, 2, 16)
        assert cfg.paths == ALL_PATHS
        assert cfg.csi_stat is PoolStatistic.STDVAR and cfg.icd_stat is PoolStatistic.STDVAR

    def test_maxavg_only_for_icd(self):
        NetworkConfig(icd_stat="maxavg")
        with pytest.raises(ValidationError):
            NetworkConfig(csi_stat="maxavg")

    def test_channels_divisible_by_reduction(self):
        with pytest.raises(ValidationError):
            NetworkConfig(channels=60)
        NetworkConfig(channels=60, paths={Path.CSI, Path.CSD})

    @pytest.mark.parametrize("bad", [{"scale": 5}, {"blocks": 0}, {"channels": 0}, {"reduction": 0}])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(ValidationError):
            NetworkConfig(**bad)

    def test_json_round_trip(self):
        cfg = NetworkConfig(blocks=3, channels=32, scale=4, paths={Path.CSD, Path.CSI}, csi_stat="avg")
        dumped = cfg.model_dump(mode="json")
        assert dumped["paths"] == ["csd", "csi"]
        assert NetworkConfig.model_validate(dumped) == cfg

    def test_stages(self):
        assert NetworkConfig(scale=2).stages == (2,)
        assert NetworkConfig(scale=3).stages == (3,)
        assert NetworkConfig(scale=4).stages == (2, 2)

    def test_presets(self):
        assert PRESETS["r16c64"] == {"blocks": 16, "channels": 64}
        assert PRESETS["r64c64"] == {"blocks": 64, "channels": 64}


class TestParamCounts:
    @pytest.mark.parametrize("paths, expected", [
        ((), 1_369_859),
        ((Path.ICD,), 1_379_139),
        ((Path.CSD,), 1_380_099),
        ((Path.CSI, Path.ICD, Path.CSD), 1_389_379),
    ])
    def test_analysis_configuration(self, paths, expected):
        assert count_params(ANALYSIS.with_paths(paths)) == expected

    def test_csi_has_no_parameters(self):
        assert count_params(ANALYSIS.with_paths({Path.CSI})) == count_params(ANALYSIS.with_paths(()))

    def test_increase_percentages(self):
        assert param_increase_pct(ANALYSIS.with_paths({Path.ICD})) == 0.68
        assert param_increase_pct(ANALYSIS.with_paths({Path.CSD})) == 0.75
        assert param_increase_pct(ANALYSIS) == 1.43
        assert param_increase_pct(ANALYSIS.with_paths(())) == 0.0
        assert param_increase_exact_pct(ANALYSIS) == pytest.approx(100 * 19_520 / 1_369_859)

    def test_table(self):
        rows = param_table(ANALYSIS)
        assert [row.label for row in rows] == [label for label, _ in TABLE_COMBINATIONS]
        assert [row.count_k for row in rows] == [1370, 1370, 1379, 1380, 1379, 1380, 1389, 1389]
        assert [row.increase_pct for row in rows] == [0.0, 0.0, 0.68, 0.75, 0.68, 0.75, 1.43, 1.43]

    def test_table_without_buildable_icd(self):
        rows = param_table(NetworkConfig(channels=8, paths={Path.CSD}))
        icd_rows = [row for row in rows if "ICD" in row.label]
        assert len(icd_rows) == 4
        assert all(row.count is None and row.increase_pct is None for row in icd_rows)
        others = {row.label: row.count for row in rows if "ICD" not in row.label}
        assert others["CSD"] == count_params(NetworkConfig(channels=8, paths={Path.CSD}))
        assert None not in others.values()

    @pytest.mark.parametrize("cfg", [
        NetworkConfig(blocks=1, channels=16, scale=2),
        NetworkConfig(blocks=2, channels=8, reduction=4, scale=3, paths={Path.ICD}),
        NetworkConfig(blocks=3, channels=32, scale=4, paths={Path.CSD, Path.CSI}),
    ])
    def test_matches_initialized_tensors(self, cfg):
        params = init_params(cfg, seed=0)
        assert params.count() == count_params(cfg)
        assert [(name, params[name].shape) for name in params.names()] == param_shapes(cfg)

    def test_x4_uses_two_x2_stages(self):
        names = [name for name, _ in param_shapes(NetworkConfig(scale=4))]
        assert "up.0.kernel" in names and "up.1.kernel" in names and "up.2.kernel" not in names
        assert dict(param_shapes(NetworkConfig(scale=3)))["up.0.kernel"] == (576, 64, 3, 3)


class TestInitParams:
    def test_deterministic(self, tiny_cfg):
        a, b = init_params(tiny_cfg, seed=3), init_params(tiny_cfg, seed=3)
        for name in a.names():
            assert_array_equal(a[name], b[name])

    def test_seed_changes_weights(self, tiny_cfg):
        assert not np.array_equal(init_params(tiny_cfg, 1)["head.kernel"], init_params(tiny_cfg, 2)["head.kernel"])

    def test_he_normal(self):
        params = init_params(ANALYSIS.with_paths(()), seed=0)
        kernel = params["blocks.0.conv1.kernel"]
        assert kernel.dtype == np.float32
        assert abs(kernel.std() / math.sqrt(2 / (64 * 9)) - 1) < 0.05
        assert_array_equal(params["blocks.0.conv1.bias"], 0)

    def test_gradient_buffers(self, tiny_params):
        for name in tiny_params.names():
            assert tiny_params.grads[name].shape == tiny_params[name].shape
            assert not tiny_params.grads[name].any()


def zero_modulation(params: ModelParams, r: int):
    for name in params.names():
        if name.startswith(f"blocks.{r}.icd") or name.startswith(f"blocks.{r}.csd"):
            params.values[name][:] = 0


class TestMamb:
    def residual(self, f, params, r):
        h = ops.activation(ops.conv2d(f, params.conv(f"blocks.{r}.conv1")), ops.Activation.RELU)
        return ops.conv2d(h, params.conv(f"blocks.{r}.conv2"))

    def test_plain_residual_without_paths(self, rng):
        cfg = NetworkConfig(blocks=1, channels=8, paths=())
        params = init_params(cfg, 0, dtype=np.float64)
        f = rng.standard_normal((2, 8, 5, 5))
        out, maps = mamb_forward(f, params, 0, cfg)
        assert maps is None
        assert_allclose(out, f + self.residual(f, params, 0))

    def test_zero_modulation_gives_half_gate(self, rng):
        cfg = NetworkConfig(blocks=1, channels=8, reduction=4, paths={Path.ICD, Path.CSD})
        params = init_params(cfg, 0, dtype=np.float64)
        zero_modulation(params, 0)
        f = rng.standard_normal((1, 8, 6, 6))
        out, _ = mamb_forward(f, params, 0, cfg)
        assert np.max(np.abs(out - (f + 0.5 * self.residual(f, params, 0)))) < 1e-6

    def test_capture_shapes(self, rng, tiny_cfg, tiny_params):
        f = rng.standard_normal((2, 8, 5, 7)).astype(np.float32)
        out, maps = mamb_forward(f, tiny_params, 1, tiny_cfg, capture=True)
        assert out.shape == f.shape
        assert maps.csi.shape == (2, 8) and maps.csi_raw.shape == (2, 8) and maps.icd.shape == (2, 8)
        assert maps.csd.shape == (2, 8, 5, 7) and maps.gate.shape == (2, 8, 5, 7)
        assert np.all((maps.gate > 0) & (maps.gate < 1))

    def test_disabled_paths_are_not_captured(self, rng):
        cfg = NetworkConfig(blocks=1, channels=8, paths={Path.CSD})
        _, maps = mamb_forward(rng.standard_normal((1, 8, 4, 4)), init_params(cfg, 0), 0, cfg, capture=True)
        assert maps.csi is None and maps.csi_raw is None and maps.icd is None
        assert maps.csd is not None

    def test_raw_csi_is_variance(self, rng, tiny_cfg, tiny_params):
        f = rng.standard_normal((1, 8, 5, 5))
        params = tiny_params.astype(np.float64)
        _, maps = mamb_forward(f, params, 0, tiny_cfg, capture=True)
        x = self.residual(f, params, 0)
        assert_allclose(maps.csi_raw, x.reshape(1, 8, -1).var(axis=-1))
        assert_allclose(maps.csi, ops.standardize_channels(maps.csi_raw))

    def test_rejects_wrong_channels(self, rng, tiny_cfg, tiny_params):
        with pytest.raises(ShapeError):
            mamb_forward(rng.standard_normal((1, 4, 5, 5)), tiny_params, 0, tiny_cfg)

    def test_icd_path(self, rng):
        v = rng.standard_normal((2, 8))
        fc1 = DenseParams(rng.standard_normal((2, 8)), rng.standard_normal(2))
        fc2 = DenseParams(rng.standard_normal((8, 2)), rng.standard_normal(8))
        expected = np.maximum(v @ fc1.weight.T + fc1.bias, 0) @ fc2.weight.T + fc2.bias
        assert_allclose(icd_path(v, fc1, fc2), expected)

    def test_maxavg_sums_both_feeds(self, rng):
        cfg = NetworkConfig(blocks=1, channels=8, reduction=4, paths={Path.ICD}, icd_stat="maxavg")
        params = init_params(cfg, 1, dtype=np.float64)
        f = rng.standard_normal((1, 8, 5, 5))
        _, maps = mamb_forward(f, params, 0, cfg, capture=True)
        x = self.residual(f, params, 0)
        fc1, fc2 = params.dense("blocks.0.icd_fc1"), params.dense("blocks.0.icd_fc2")
        expected = (icd_path(ops.global_pool(x, PoolStatistic.MAX), fc1, fc2)
                    + icd_path(ops.global_pool(x, PoolStatistic.AVG), fc1, fc2))
        assert_allclose(maps.icd, expected)

    @staticmethod
    def check_block_gradients(cfg, img, params, seed=0, max_entries=None):
        f_in = ops.conv2d(img, params.conv("head"))
        block_names = [n for n in params.names() if n.startswith("blocks.0.")]
        inputs = {"f_in": f_in, **{n: params[n] for n in block_names}}

        def forward(v):
            return mamb_forward(v["f_in"], ModelParams(v), 0, cfg)[0]

        def backward(v, g):
            p = ModelParams(v)
            _, cache = _block_forward(v["f_in"], p, 0, cfg)
            grad_in = mamb_backward(g, cache, p, 0, cfg)
            return {"f_in": grad_in, **{n: p.grads[n] for n in block_names}}

        return grad_check(forward, backward, inputs, tol=1e-5, seed=seed, max_entries=max_entries)

    @pytest.mark.parametrize("csi_stat, icd_stat", [
        ("stdvar", "stdvar"), ("avg", "var"), ("power", "avg"), ("var", "maxavg"), ("max", "power"),
    ])
    def test_block_gradients(self, kink_free_network, csi_stat, icd_stat):
        cfg = NetworkConfig(blocks=1, channels=8, reduction=4, csi_stat=csi_stat, icd_stat=icd_stat)
        img, params = kink_free_network(cfg, seed=11)
        report = self.check_block_gradients(cfg, img, params)
        assert report.passed, report.message

    @pytest.mark.parametrize("seed", range(20))
    def test_full_block_gradients(self, kink_free_network, seed):
        cfg = NetworkConfig(blocks=1, channels=16, reduction=4)
        img, params = kink_free_network(cfg, seed=seed, h=6, w=6)
        assert ops.conv2d(img, params.conv("head")).shape == (1, 16, 6, 6)
        report = self.check_block_gradients(cfg, img, params, seed=seed, max_entries=24)
        assert report.passed, report.message

    def test_icd_map_is_icd_path_of_pooled_statistic(self, rng):
        cfg = NetworkConfig(blocks=1, channels=8, reduction=4, paths={Path.ICD})
        params = init_params(cfg, 2, dtype=np.float64)
        f = rng.standard_normal((2, 8, 5, 5))
        _, maps = mamb_forward(f, params, 0, cfg, capture=True)
        pooled = ops.global_pool(self.residual(f, params, 0), PoolStatistic.STDVAR)
        assert_allclose(maps.icd, icd_path(pooled, params.dense("blocks.0.icd_fc1"), params.dense("blocks.0.icd_fc2")))


class TestNetwork:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_output_shape(self, rng, scale):
        cfg = NetworkConfig(blocks=1, channels=8, reduction=4, scale=scale)
        out = network_forward(rng.standard_normal((2, 3, 5, 6)).astype(np.float32), init_params(cfg, 0), cfg)
        assert out.shape == (2, 3, 5 * scale, 6 * scale)
        assert out.dtype == np.float32

    def test_rejects_non_rgb(self, rng, tiny_cfg, tiny_params):
        with pytest.raises(ShapeError):
            network_forward(rng.standard_normal((1, 1, 5, 5)), tiny_params, tiny_cfg)

    def test_zero_weights_give_recon_bias(self, rng, tiny_cfg, tiny_params):
        for value in tiny_params.values.values():
            value[:] = 0
        tiny_params.values["recon.bias"][:] = [0.1, -0.2, 0.3]
        out = network_forward(rng.standard_normal((1, 3, 4, 4)).astype(np.float32), tiny_params, tiny_cfg)
        for c, b in enumerate([0.1, -0.2, 0.3]):
            assert_allclose(out[0, c], b, rtol=1e-6)

    def test_deterministic(self, rng, tiny_cfg, tiny_params):
        img = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        assert_array_equal(network_forward(img, tiny_params, tiny_cfg), network_forward(img, tiny_params, tiny_cfg))

    def test_float32_matches_float64(self, rng, tiny_cfg, tiny_params):
        img = rng.uniform(-0.5, 0.5, (1, 3, 6, 6))
        out32 = network_forward(img.astype(np.float32), tiny_params, tiny_cfg)
        out64 = network_forward(img, tiny_params.astype(np.float64), tiny_cfg)
        assert_allclose(out32, out64, atol=1e-4)

    def test_capture_maps(self, rng, tiny_cfg, tiny_params):
        maps = capture_maps(rng.standard_normal((1, 3, 5, 4)).astype(np.float32), tiny_params, tiny_cfg)
        assert len(maps) == tiny_cfg.blocks
        assert all(m.gate.shape == (1, 8, 5, 4) for m in maps)

    def test_backward_accumulates(self, rng, tiny_cfg, tiny_params):
        img = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        out, cache = network_forward_cached(img, tiny_params, tiny_cfg)
        network_backward(np.ones_like(out), cache, tiny_params, tiny_cfg)
        first = {n: g.copy() for n, g in tiny_params.grads.items()}
        network_backward(np.ones_like(out), cache, tiny_params, tiny_cfg)
        for name, grad in tiny_params.grads.items():
            assert_allclose(grad, 2 * first[name], rtol=1e-5, atol=1e-6)
        tiny_params.zero_grad()
        assert not any(g.any() for g in tiny_params.grads.values())

    @pytest.mark.parametrize("seed", range(20))
    def test_network_gradients(self, kink_free_network, seed):
        cfg = NetworkConfig(blocks=2, channels=8, reduction=4, scale=2)
        img, params = kink_free_network(cfg, seed=seed)
        inputs = {"img": img, **params.values}

        def forward(v):
            return network_forward(v["img"], ModelParams(v), cfg)

        def backward(v, g):
            p = ModelParams(v)
            _, cache = network_forward_cached(v["img"], p, cfg)
            grad_img = network_backward(g, cache, p, cfg)
            return {"img": grad_img, **{n: p.grads[n] for n in params.names()}}

        report = grad_check(forward, backward, inputs, tol=1e-5, seed=seed, max_entries=12)
        assert report.passed, report.message


def test_conv_params_view(tiny_params):
    p = tiny_params.conv("feat")
    assert isinstance(p, ConvParams)
    assert p.kernel is tiny_params["feat.kernel"]
