import dataclasses

import numpy as np
import pytest
import torch
from torch import nn

from helpers import gradient_check
from oracles import branch_shapes, conv_params, unet_branch_params
from salanet.exceptions import NumericalError, ValidationError
from salanet.losses import total_loss
from salanet.network import (
    NetworkConfig, build_network, count_parameters, forward, init_he_normal, param_address,
    parameter_report, parameter_table,
)

FIVE_LEVEL_TINY = NetworkConfig(filters=(2, 4, 8, 16, 32))


def _inputs(b=2, size=32, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, 1, size, size, generator=g, dtype=dtype),
            torch.randn(b, 1, size, size, generator=g, dtype=dtype))


def _targets(b=2, size=32, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 3, (b, size, size), generator=g), torch.randint(0, 3, (b, size, size), generator=g)


class TestArchitecture:
    def test_bottleneck_channels(self):
        on, off = NetworkConfig(), NetworkConfig(fusion=False)
        assert on.bottleneck_channels == 2 * 512 and off.bottleneck_channels == 512
        assert build_network(on).sa.decoder.ups[0].in_channels == 1024
        assert build_network(off).sa.decoder.ups[0].in_channels == 512

    @pytest.mark.parametrize("fusion", [True, False])
    def test_tiny_layer_shapes(self, fusion):
        cfg = dataclasses.replace(FIVE_LEVEL_TINY, fusion=fusion)
        net = build_network(cfg)
        expected = branch_shapes(cfg.filters, fusion=fusion)
        for branch in (net.sa, net.la):
            assert [tuple(p.shape) for p in branch.parameters()] == expected

    def test_fusion_off_is_two_disconnected_unets(self):
        net = build_network(dataclasses.replace(FIVE_LEVEL_TINY, fusion=False))
        sa_ids = {id(p) for p in net.sa.parameters()}
        assert not sa_ids & {id(p) for p in net.la.parameters()}

    def test_shared_branches(self):
        net = build_network(dataclasses.replace(FIVE_LEVEL_TINY, shared_branches=True))
        assert net.branches["sa"] is net.branches["la"]
        assert count_parameters(net.config) == unet_branch_params((2, 4, 8, 16, 32))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            NetworkConfig(levels=3, filters=(2, 4)).validate()
        with pytest.raises(ValidationError):
            NetworkConfig(levels=3, filters=(2, 4, 8), deep_supervision=3).validate()
        with pytest.raises(ValidationError):
            NetworkConfig.from_dict({"levels": 5, "bogus": 1})
        cfg = NetworkConfig(filters=(3, 5, 7, 9, 11))
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_he_variance(self):
        conv = nn.Sequential(nn.Conv2d(1, 1200, 3))
        init_he_normal(conv, seed=0)
        w = conv[0].weight.detach().numpy().ravel()
        assert w.size >= 10_000
        assert abs(w.var() / (2 / 9) - 1) < 0.10
        assert not conv[0].bias.detach().any()

    def test_deterministic_and_zero_bias(self):
        a = init_he_normal(build_network(FIVE_LEVEL_TINY), seed=4)
        b = init_he_normal(build_network(FIVE_LEVEL_TINY), seed=4)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q)
            if n.endswith("bias"):  # conv, transposed-conv and batch-norm shifts
                assert not p.detach().any()
        for m in a.modules():
            if isinstance(m, nn.BatchNorm2d):
                assert torch.all(m.weight == 1) and torch.all(m.bias == 0)


class TestForward:
    def test_default_shapes_and_simplex(self):
        net = init_he_normal(build_network(NetworkConfig()), 0)
        sa, la = _inputs(2, 256)
        with torch.no_grad():
            out = forward(net, sa, la, "eval")
        for branch in ("sa", "la"):
            assert tuple(out[branch].main.shape) == (2, 3, 256, 256)
            assert len(out[branch].aux) == 2
            assert all(tuple(a.shape) == (2, 3, 256, 256) for a in out[branch].aux)
            for h in out[branch].heads:
                s = torch.softmax(h.double(), 1).sum(1)
                assert torch.max(torch.abs(s - 1)) <= 1e-6

    def test_eval_is_deterministic(self, tiny_config):
        net = init_he_normal(build_network(tiny_config), 0)
        sa, la = _inputs()
        a = forward(net, sa, la, "eval").sa.main
        b = forward(net, sa, la, "eval").sa.main
        assert torch.equal(a, b)

    def test_input_checks(self, tiny_config):
        net = build_network(tiny_config)
        sa, la = _inputs()
        with pytest.raises(ValidationError):
            forward(net, sa[:, :, :30, :30], la[:, :, :30, :30])
        with pytest.raises(ValidationError):
            forward(net, sa, la[:1])
        with pytest.raises(ValidationError):
            forward(net, sa[0], la[0])
        bad = sa.clone()
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(NumericalError):
            forward(net, bad, la)
        with pytest.raises(ValidationError):
            forward(net, sa, la, "predict")


def _sa_only_grad_norm(cfg):
    net = init_he_normal(build_network(cfg), 0)
    sa, la = _inputs()
    sl, ll = _targets()
    br = total_loss(forward(net, sa, la, "train"), sl, ll)
    br.branch_total("sa").backward()
    grads = [p.grad for p in net.la.encoder.parameters()]
    return sum(0.0 if g is None else float(g.abs().sum()) for g in grads)


class TestFusionContract:
    def test_fusion_on_couples_views(self):
        assert _sa_only_grad_norm(FIVE_LEVEL_TINY) > 0

    def test_fusion_off_decouples_views(self):
        assert _sa_only_grad_norm(dataclasses.replace(FIVE_LEVEL_TINY, fusion=False)) == 0.0

    def test_fusion_off_sa_invariant_to_la(self):
        net = init_he_normal(build_network(dataclasses.replace(FIVE_LEVEL_TINY, fusion=False)), 0)
        sa, la = _inputs()
        other = torch.randn_like(la) * 5
        for mode in ("eval", "train"):
            a = forward(net, sa, la, mode).sa.heads
            b = forward(net, sa, other, mode).sa.heads
            assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_gradient_matches_finite_differences():
    errors, skipped = gradient_check(FIVE_LEVEL_TINY, n_params=100)
    assert len(errors) == 100 and skipped < 10
    assert errors.max() < 1e-3, errors.max()


class TestParameterCount:
    def test_single_conv(self):
        assert sum(p.numel() for p in nn.Conv2d(1, 4, 3).parameters()) == 40 == conv_params(1, 4, 3)

    @pytest.mark.parametrize("cfg", [
        FIVE_LEVEL_TINY,
        NetworkConfig(levels=3, filters=(3, 6, 12), deep_supervision=2, fusion=False),
        NetworkConfig(),
    ])
    def test_analytic_count(self, cfg):
        per_branch = unet_branch_params(cfg.filters, heads=cfg.deep_supervision, fusion=cfg.fusion)
        assert count_parameters(cfg) == 2 * per_branch

    def test_report_trend(self):
        rep = parameter_report(NetworkConfig())
        # fusion doubles the deepest up-conv input, so equal widths cost slightly more than two plain U-Nets
        extra = 2 * (512 * 256 * 4)
        assert rep["dual_fused"] - rep["two_independent_unets"] == extra
        assert rep["two_independent_unets"] == 2 * rep["single_unet"]
        wide = NetworkConfig(filters=(64, 128, 256, 512, 1024), fusion=False)
        rep2 = parameter_report(NetworkConfig(), wide)
        assert rep2["dual_fused"] < rep2["two_independent_unets"]

    def test_param_addresses(self):
        net = build_network(NetworkConfig())
        table = dict(parameter_table(net))
        assert ("LA", "decoder", 4, "blocks.3.weight") in table
        assert param_address("sa.encoder.blocks.0.0.weight") == ("SA", "encoder", 1, "0.weight")
        assert param_address("sa.decoder.heads.2.bias") == ("SA", "head", 3, "bias")
        assert sum(int(np.prod(s)) for s in table.values()) == count_parameters(NetworkConfig())
