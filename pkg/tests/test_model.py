import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from pydantic import ValidationError

from hierarchical_cxr.core.config import ModelConfig, TrainConfig
from hierarchical_cxr.core.errors import ChecksumMismatchError, ConfigError, ShapeMismatchError
from hierarchical_cxr.core.model import (
    HierarchicalClassifier,
    ToyBackbone,
    bce_grad,
    bce_loss,
    build_model,
    load_checkpoint,
    lr_at,
    save_checkpoint,
)


def small_model(num_outputs=5, dropout=0.2, seed=0):
    torch.manual_seed(seed)
    return build_model(ModelConfig(head_units=32, dropout=dropout), num_outputs=num_outputs)


class TestArchitecture:

    def test_output_range(self):
        model = small_model().eval()
        out = model(torch.randn(3, 1, 64, 64))
        assert out.shape == (3, 5)
        assert bool(((out > 0) & (out < 1)).all())

    def test_deterministic_without_dropout(self):
        model = small_model(dropout=0.0).train()
        x = torch.randn(4, 1, 48, 48)
        assert torch.equal(model(x), model(x))

    def test_zeroed_classifier_gives_half(self):
        model = small_model().eval()
        with torch.no_grad():
            model.classifier.weight.zero_()
            model.classifier.bias.zero_()
        assert torch.allclose(model(torch.randn(2, 1, 40, 40)), torch.full((2, 5), 0.5))

    def test_logits_are_pre_sigmoid(self):
        model = small_model().eval()
        x = torch.randn(2, 1, 32, 32)
        assert torch.allclose(torch.sigmoid(model.logits(x)), model(x))

    def test_head_layout(self):
        model = build_model(ModelConfig(), num_outputs=7)
        linears = [m for m in model.head if isinstance(m, nn.Linear)]
        dropouts = [m for m in model.head if isinstance(m, nn.Dropout)]
        assert [m.out_features for m in linears] == [512, 512]
        assert [m.p for m in dropouts] == [0.2, 0.2]
        assert model.classifier.out_features == 7

    def test_toy_backbone_parameters(self):
        backbone = ToyBackbone()
        convs = [m for m in backbone.modules() if isinstance(m, nn.Conv2d)]
        assert sum(p.numel() for m in convs for p in m.parameters()) == 60_480
        assert sum(p.numel() for p in backbone.parameters()) == 60_832

    def test_toy_backbone_feature_map(self):
        features = ToyBackbone().eval()(torch.zeros(1, 1, 299, 299))
        assert features.shape == (1, 64, 19, 19)

    def test_external_backbone(self):
        cfg = ModelConfig(backbone="external", external_backbone="hierarchical_cxr.core.model:ToyBackbone", head_units=16)
        model = build_model(cfg, num_outputs=3)
        assert isinstance(model.backbone, ToyBackbone)

    def test_external_backbone_requires_reference(self):
        with pytest.raises(ValidationError):
            ModelConfig(backbone="external")

    def test_bad_external_reference(self):
        cfg = ModelConfig(backbone="external", external_backbone="no_such_module_xyz:factory")
        with pytest.raises(ConfigError):
            build_model(cfg, num_outputs=3)

    def test_unknown_backbone(self):
        with pytest.raises(ValidationError):
            ModelConfig(backbone="inception")
        with pytest.raises(ConfigError):
            build_model(ModelConfig.model_construct(backbone="inception"), num_outputs=3)

    def test_missing_num_outputs(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig())

    def test_zero_outputs(self):
        with pytest.raises(ConfigError):
            HierarchicalClassifier(ToyBackbone(), num_outputs=0)


class TestLoss:

    def test_perfect_prediction(self):
        target = np.array([0, 1, 1, 0, 1], dtype=float)
        assert float(bce_loss(target, target)) <= 1e-6

    def test_half_is_ln2(self, rng):
        target = rng.integers(0, 2, size=12)
        assert abs(float(bce_loss(np.full(12, 0.5), target)) - math.log(2)) < 1e-9

    def test_scalar_oracle(self, rng):
        pred = rng.uniform(0.0, 1.0, size=10)
        target = rng.integers(0, 2, size=10)
        expected = 0.0
        for p, t in zip(pred, target):
            p = min(max(p, 1e-7), 1 - 1e-7)
            expected += -(t * math.log(p) + (1 - t) * math.log(1 - p))
        expected /= 10
        assert abs(float(bce_loss(pred, target)) - expected) < 1e-10

    def test_batched_mean(self, rng):
        pred = rng.uniform(0.01, 0.99, size=(4, 6))
        target = rng.integers(0, 2, size=(4, 6))
        rows = [float(bce_loss(p, t)) for p, t in zip(pred, target)]
        assert abs(float(bce_loss(pred, target)) - np.mean(rows)) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            bce_loss(np.full(3, 0.5), np.zeros(4))

    def test_gradient_matches_finite_differences(self, rng):
        h = 1e-5
        for _ in range(100):
            n = int(rng.integers(1, 20))
            pred = rng.uniform(0.05, 0.95, size=n)
            target = rng.integers(0, 2, size=n).astype(float)
            analytic = bce_grad(pred, target)
            numeric = np.empty(n)
            for i in range(n):
                up, down = pred.copy(), pred.copy()
                up[i] += h
                down[i] -= h
                numeric[i] = (float(bce_loss(up, target)) - float(bce_loss(down, target))) / (2 * h)
            assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-4

    def test_gradient_matches_autograd(self, rng):
        pred = torch.tensor(rng.uniform(0.05, 0.95, size=8), requires_grad=True)
        target = rng.integers(0, 2, size=8).astype(float)
        bce_loss(pred, target).backward()
        assert np.allclose(pred.grad.numpy(), bce_grad(pred.detach().numpy(), target), rtol=1e-10)


class TestSchedule:

    def test_endpoints_exact(self):
        tc = TrainConfig(epochs=50)
        assert lr_at(0, tc) == 1e-3
        assert lr_at(49, tc) == 1e-6

    def test_monotone(self):
        tc = TrainConfig(epochs=50)
        rates = [lr_at(e, tc) for e in range(50)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_geometric_midpoint(self):
        tc = TrainConfig(epochs=50)
        midpoint = math.sqrt(lr_at(24, tc) * lr_at(25, tc))
        assert abs(midpoint / 10 ** -4.5 - 1.0) < 0.05

    def test_single_epoch(self):
        assert lr_at(0, TrainConfig(epochs=1)) == 1e-3

    def test_out_of_range(self):
        tc = TrainConfig(epochs=5)
        with pytest.raises(ValueError):
            lr_at(5, tc)
        with pytest.raises(ValueError):
            lr_at(-1, tc)


class TestCheckpoint:

    def test_round_trip(self, toy_taxonomy, tmp_path):
        cfg = ModelConfig(head_units=16)
        torch.manual_seed(1)
        model = build_model(cfg, num_outputs=len(toy_taxonomy)).eval()
        path = save_checkpoint(model, cfg, toy_taxonomy, tmp_path / "ckpt" / "checkpoint.pt", extra={"best_epoch": 3})
        loaded, payload = load_checkpoint(path, toy_taxonomy)
        x = torch.randn(2, 1, 32, 32)
        assert torch.equal(loaded(x), model(x))
        assert not loaded.training
        assert payload["extra"] == {"best_epoch": 3}
        assert payload["node_ids"] == toy_taxonomy.node_ids

    def test_taxonomy_mismatch(self, toy_taxonomy, covid_taxonomy, tmp_path):
        cfg = ModelConfig(head_units=16)
        model = build_model(cfg, num_outputs=len(toy_taxonomy))
        path = save_checkpoint(model, cfg, toy_taxonomy, tmp_path / "checkpoint.pt")
        with pytest.raises(ChecksumMismatchError) as excinfo:
            load_checkpoint(path, covid_taxonomy)
        assert excinfo.value.exit_code == 3

    def test_missing_checkpoint(self, toy_taxonomy, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "nope.pt", toy_taxonomy)
