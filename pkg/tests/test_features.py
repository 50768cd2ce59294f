import numpy as np
import pytest
import torch

from protosleep.errors import ConfigError, NumericError, ShapeError
from protosleep.features import (
    AFR,
    AFRConfig,
    Branch,
    BranchConfig,
    FeatureConfig,
    FeatureExtractor,
    MRCNN,
    MRCNNConfig,
    StackedCNN,
    StackedCNNConfig,
    branch_length,
    branch_spans,
)

from conftest import TINY_FEATURES, central_diff, rel_err


def test_default_shape_arithmetic():
    small = BranchConfig(64, 50, 6)
    assert branch_length(30_000, small) == 310
    assert branch_length(30_000, BranchConfig(64, 400, 50)) == 35
    # first pooled stage of the small branch
    x = torch.randn(1, 1, 30_000)
    b = Branch(small).eval()
    assert b.net[:4](x).shape == (1, 64, 1248)


def test_default_extractor_output_shape():
    ext = FeatureExtractor(FeatureConfig(), 30_000).eval()
    with torch.no_grad():
        s = ext(torch.randn(2, 30_000))
    assert s.shape == (2, 64, 345) and (ext.K, ext.C) == (345, 64)
    assert float(s.min()) > 0 and float(s.max()) < 1


def test_wrong_input_length():
    m = MRCNN(MRCNNConfig(), 30_000)
    with pytest.raises(ShapeError):
        m(torch.zeros(1, 29_999))
    with pytest.raises(ShapeError):
        branch_length(100, BranchConfig(8, 400, 50))


def test_position_spans_cover_receptive_fields():
    spans = branch_spans(30_000, BranchConfig(64, 400, 50))
    assert len(spans) == 35
    assert spans[0] == (0, 400 + 3 * 50 + 6 * 200 + 3 * 200)
    assert spans[1][0] - spans[0][0] == 50 * 4 * 4
    ext = FeatureExtractor(FeatureConfig(), 30_000)
    assert len(ext.position_spans()) == ext.K


def test_afr_gate_extremes():
    torch.manual_seed(0)
    afr = AFR(8, AFRConfig(8, 4)).eval()
    x = torch.randn(3, 8, 11)
    with torch.no_grad():
        res, feat = afr.residual(x), afr.features(x)
        torch.testing.assert_close(afr(x, gate=torch.zeros(1)), res)
        torch.testing.assert_close(afr(x, gate=torch.ones(1)), res + feat)
        g = afr.se(feat)
    assert float(g.min()) > 0 and float(g.max()) < 1
    with pytest.raises(ShapeError):
        afr(torch.randn(1, 5, 4))


def test_stacked_cnn_preserves_shape_and_zeroed_weights_reduce_to_norm():
    cfg = StackedCNNConfig(1, 1, 3, 3, 2)
    net = StackedCNN(8, cfg)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if "norm" not in name:
                p.zero_()
    x = torch.randn(2, 8, 13)
    y = net(x)
    assert y.shape == x.shape
    expected = torch.nn.functional.layer_norm(x.transpose(1, 2), (8,)).transpose(1, 2)
    torch.testing.assert_close(y, expected)


def test_stacked_cnn_rejects_non_finite():
    with pytest.raises(NumericError):
        StackedCNN(8, StackedCNNConfig(1, 1, 3, 3, 2))(torch.full((1, 8, 5), float("nan")))


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        FeatureConfig(output_activation="tanh")
    with pytest.raises(ShapeError):
        StackedCNN(8, StackedCNNConfig(1, 1, 4, 3, 2))
    assert FeatureConfig.from_dict(TINY_FEATURES.to_dict()) == TINY_FEATURES


def test_extractor_gradients_match_finite_differences():
    torch.manual_seed(1)
    ext = FeatureExtractor(TINY_FEATURES, 200).double().eval()
    x = torch.randn(2, 200, dtype=torch.float64, requires_grad=True)
    proj = torch.randn(2, 8, ext.K, dtype=torch.float64)

    def f():
        return (ext(x) * proj).sum()

    f().backward()
    w = ext.stacked.blocks[0].conv.weight
    assert rel_err(x.grad, central_diff(f, x)) < 1e-4
    assert rel_err(w.grad, central_diff(f, w)) < 1e-4
