"""Attack algorithms: closed-form oracles, constraint invariants, reductions."""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from robustlab.attacks import (
    AttackSpec,
    ObsAtkResult,
    adaptive_cifs_attack,
    adaptive_loss_weights,
    cw_margin_loss,
    fgsm,
    obs_atk,
    pgd_eval_spec,
    pgd_linf,
    pgd_train_spec,
    random_zero_mean,
)
from robustlab.cifs import CifsConfig, SlimResNet
from robustlab.datasets import shape_classification_dataset
from robustlab.denoiser import Denoiser, DenoiserConfig
from robustlab.geometry import Perturbation
from robustlab.training import ClassifierSpec, TrainConfig, train_classifier


class IdentityDenoiser(nn.Module):
    def forward(self, y):
        return y


class ConstantLogits(nn.Module):
    def __init__(self, values=(0.0, 0.0, 0.0)):
        super().__init__()
        self.values = torch.tensor(values)
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.values.repeat(x.shape[0], 1) + 0.0 * x.reshape(x.shape[0], -1).sum(1, keepdim=True)


@pytest.fixture(scope="module")
def trained_classifier():
    """Small CNN fitted on the glyph dataset; shared across strength tests."""
    x, y = shape_classification_dataset(400, size=20, channels=1, seed=11)
    cfg = TrainConfig(epochs=3, batch_size=64, optimizer="sgd", lr=0.05, momentum=0.9,
                      method="nt", seed=11)
    result = train_classifier(cfg, ClassifierSpec(kind="cnn", width=16), x, y)
    result.model.eval()
    test_x, test_y = shape_classification_dataset(64, size=20, channels=1, seed=12)
    return result.model, torch.as_tensor(test_x, dtype=torch.float32), torch.as_tensor(test_y)


class TestAttackSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            AttackSpec(kind="bogus")
        with pytest.raises(ValueError):
            AttackSpec(eps=-1)
        with pytest.raises(ValueError):
            AttackSpec(steps=2, step_size=0.0)

    def test_protocol_defaults(self):
        ev = pgd_eval_spec(8 / 255)
        assert ev.steps == 20 and ev.step_size == pytest.approx(8 / 255 / 10) and not ev.rand_init
        tr = pgd_train_spec(8 / 255)
        assert tr.steps == 10 and tr.step_size == pytest.approx(8 / 255 / 4) and tr.rand_init


class TestFgsm:
    def test_eps_zero_unchanged(self):
        model = ConstantLogits()
        x = torch.rand(2, 4)
        torch.testing.assert_close(fgsm(model, x, torch.tensor([0, 1]), 0.0), x, rtol=0, atol=0)

    def test_zero_gradient_unchanged(self):
        model = ConstantLogits()
        x = torch.rand(2, 4) * 0.5 + 0.25
        out = fgsm(model, x, torch.tensor([0, 1]), 0.1)
        torch.testing.assert_close(out, x, rtol=0, atol=0)

    def test_linear_model_closed_form(self):
        # Two-class linear logits W x: the CE input-gradient is
        # W^T (softmax(Wx) - onehot(y)); FGSM adds eps * sign of that.
        w = np.array([[1.0, -2.0, 0.5, 3.0], [-1.5, 0.7, 2.0, -0.3]])
        x = np.array([[0.3, 0.6, 0.2, 0.8]])
        y = 0
        eps = 0.05
        logits = w @ x[0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        grad = w.T @ (p - np.eye(2)[y])
        expected = np.clip(x[0] + eps * np.sign(grad), 0.0, 1.0)

        model = nn.Linear(4, 2, bias=False).double()
        with torch.no_grad():
            model.weight.copy_(torch.tensor(w))
        out = fgsm(model, torch.tensor(x), torch.tensor([y]), eps)
        np.testing.assert_allclose(out.numpy()[0], expected, atol=1e-12)


class TestPgd:
    def test_zero_steps_unchanged(self, trained_classifier):
        model, x, y = trained_classifier
        torch.testing.assert_close(pgd_linf(model, x[:4], y[:4], 0.1, 0, 0.01), x[:4], rtol=0, atol=0)

    def test_single_step_equals_fgsm(self, trained_classifier):
        model, x, y = trained_classifier
        eps = 0.1
        a = pgd_linf(model, x[:8], y[:8], eps, steps=1, step_size=eps, rand_init=False)
        b = fgsm(model, x[:8], y[:8], eps)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_box_and_pixel_range(self, trained_classifier):
        model, x, y = trained_classifier
        eps = 0.07
        adv = pgd_linf(model, x, y, eps, steps=5, step_size=eps / 2, rand_init=True,
                       generator=torch.Generator().manual_seed(0))
        assert float((adv - x).abs().max()) <= eps + 1e-7
        assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0

    def test_pgd20_at_least_fgsm_loss(self, trained_classifier):
        # Attack-strength oracle: realized per-sample CE under PGD-20
        # should dominate FGSM on at least 90% of a test batch.
        model, x, y = trained_classifier
        eps = 0.1
        adv_f = fgsm(model, x, y, eps)
        adv_p = pgd_linf(model, x, y, eps, steps=20, step_size=eps / 10)
        with torch.no_grad():
            loss_f = F.cross_entropy(model(adv_f), y, reduction="none")
            loss_p = F.cross_entropy(model(adv_p), y, reduction="none")
        frac = float((loss_p >= loss_f - 1e-6).float().mean())
        assert frac >= 0.9


class TestCwMargin:
    def test_confident_correct(self):
        assert float(cw_margin_loss(torch.tensor([10.0, 0.0]), 0)) == -10.0

    def test_uniform_tie(self):
        assert float(cw_margin_loss(torch.tensor([1.0, 1.0, 1.0]), 2)) == 0.0

    def test_confident_wrong(self):
        logits = torch.tensor([[0.0, 7.0, 1.0]])
        assert float(cw_margin_loss(logits, torch.tensor([0]))[0]) == 7.0

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            cw_margin_loss(torch.tensor([1.0]), 0)


class TestObsAtk:
    def test_zero_steps_zero_delta(self):
        y = torch.rand(2, 1, 8, 8) + 0.2
        res = obs_atk(IdentityDenoiser(), y.clone(), y, eps=1.0, steps=0)
        assert isinstance(res, ObsAtkResult)
        torch.testing.assert_close(res.delta, torch.zeros_like(res.delta), rtol=0, atol=0)

    def test_identity_denoiser_closed_form(self):
        # For f = identity the objective is ||v + delta||^2 with gradient
        # 2(v + delta).  One large normalized step from zero lands on
        # eta * v/||v||; a zero-mean v passes the hyperplane projection
        # unchanged and the ball projection rescales to radius eps.
        torch.manual_seed(0)
        v = torch.randn(1, 1, 8, 8, dtype=torch.float64)
        v -= v.mean()
        x = torch.rand(1, 1, 8, 8, dtype=torch.float64) * 0.5 + 0.25
        y = x + v
        eps = 0.3
        res = obs_atk(IdentityDenoiser(), x, y, eps=eps, steps=1, eta=10 * eps)
        expected = eps * v / v.norm()
        torch.testing.assert_close(res.pre_clip, expected, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("steps", [1, 2, 5])
    def test_pre_clip_constraints_every_iteration_count(self, steps):
        torch.manual_seed(steps)
        model = Denoiser(DenoiserConfig(depth=3, width=8))
        x = torch.rand(3, 1, 12, 12)
        y = x + 0.1 * torch.randn(3, 1, 12, 12)
        eps = 0.5
        res = obs_atk(model, x, y, eps=eps, steps=steps)
        for i in range(x.shape[0]):
            pert = Perturbation(res.pre_clip[i].numpy().ravel(), eps)
            assert pert.satisfies_constraints()

    def test_clip_keeps_observation_in_range(self):
        torch.manual_seed(1)
        model = Denoiser(DenoiserConfig(depth=3, width=8))
        x = torch.rand(2, 1, 10, 10)
        y = x + 0.3 * torch.randn(2, 1, 10, 10)  # partly outside [0, 1]
        res = obs_atk(model, x, y, eps=1.0, steps=2)
        perturbed = y.double() + res.delta
        assert float(perturbed.min()) >= min(float(y.min()), 0.0) - 1e-9
        assert float(perturbed.max()) <= max(float(y.max()), 1.0) + 1e-9

    def test_objective_increases_on_most_inputs(self):
        torch.manual_seed(2)
        model = Denoiser(DenoiserConfig(depth=3, width=8))
        model.eval()
        x = torch.rand(64, 1, 12, 12)
        y = x + 0.08 * torch.randn_like(x)
        res = obs_atk(model, x, y, eps=0.4, steps=3)
        with torch.no_grad():
            base = ((model(y) - x) ** 2).sum(dim=(1, 2, 3))
            attacked = ((model(y + res.delta.float()) - x) ** 2).sum(dim=(1, 2, 3))
        frac = float((attacked >= base - 1e-9).float().mean())
        assert frac >= 0.95

    def test_negative_budget_rejected(self):
        with pytest.raises(ValueError):
            obs_atk(IdentityDenoiser(), torch.rand(1, 1, 4, 4), torch.rand(1, 1, 4, 4), eps=-1)


class TestRandomZeroMean:
    def test_zero_budget(self):
        out = random_zero_mean((1, 8, 8), 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, np.zeros((1, 8, 8)))

    def test_exact_mean_and_norm(self):
        out = random_zero_mean((3, 16, 16), 0.7, np.random.default_rng(1))
        assert abs(out.mean()) <= 1e-9
        assert abs(np.linalg.norm(out) - 0.7) <= 1e-9

    def test_streams_differ(self):
        a = random_zero_mean((4, 4), 1.0, np.random.default_rng(1))
        b = random_zero_mean((4, 4), 1.0, np.random.default_rng(2))
        assert np.abs(a - b).max() > 1e-6


class TestAdaptiveWeights:
    def test_finite_beta(self):
        w_final, w_probes = adaptive_loss_weights(2.0, 2)
        assert w_final == pytest.approx(1 / 3)
        assert w_probes == pytest.approx([1 / 3, 1 / 3])
        assert w_final + sum(w_probes) == pytest.approx(1.0)

    def test_infinity_variants(self):
        assert adaptive_loss_weights("inf", 2) == (0.0, [0.5, 0.5])
        assert adaptive_loss_weights("inf-1", 2) == (0.0, [1.0, 0.0])
        assert adaptive_loss_weights("inf-2", 2) == (0.0, [0.0, 1.0])
        assert adaptive_loss_weights(math.inf, 3) == (0.0, [1 / 3] * 3)

    def test_bad_entries(self):
        with pytest.raises(ValueError):
            adaptive_loss_weights("inf-3", 2)
        with pytest.raises(ValueError):
            adaptive_loss_weights(-1.0, 2)


@pytest.fixture(scope="module")
def cifs_model():
    torch.manual_seed(5)
    model = SlimResNet(widths=(8, 16, 16, 32), in_channels=1, cifs=CifsConfig())
    model.eval()
    return model


@pytest.fixture(scope="module")
def batch():
    x, y = shape_classification_dataset(24, size=20, channels=1, seed=21)
    return torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(y)


class TestAdaptiveCifsAttack:
    def test_beta_zero_matches_plain_attack(self, cifs_model, batch):
        x, y = batch
        eps = 0.05
        grid_out = adaptive_cifs_attack(cifs_model, x, y, "pgd", (0.0,), eps=eps, steps=3)
        plain = pgd_linf(cifs_model, x, y, eps, 3, eps / 10)
        torch.testing.assert_close(grid_out, plain, rtol=0, atol=0)

    def test_empty_grid_rejected(self, cifs_model, batch):
        x, y = batch
        with pytest.raises(ValueError):
            adaptive_cifs_attack(cifs_model, x, y, "pgd", (), eps=0.05)

    def test_probe_free_model_collapses_grid(self, batch):
        torch.manual_seed(6)
        model = SlimResNet(widths=(8, 16, 16, 32), in_channels=1)
        model.eval()
        x, y = batch
        with pytest.warns(UserWarning, match="no probes"):
            out = adaptive_cifs_attack(model, x, y, "pgd", (0.0, "inf"), eps=0.05, steps=2)
        assert out.shape == x.shape

    def test_grid_is_pointwise_worst_case(self, cifs_model, batch):
        x, y = batch
        eps = 0.2
        grid = (0.0, 1.0, "inf")
        best = adaptive_cifs_attack(cifs_model, x, y, "pgd", grid, eps=eps, steps=4)

        def accuracy(adv):
            with torch.no_grad():
                logits, _ = cifs_model(adv)
            return float((logits.argmax(1) == y).float().mean())

        acc_grid = accuracy(best)
        for beta in grid:
            single = adaptive_cifs_attack(cifs_model, x, y, "pgd", (beta,), eps=eps, steps=4)
            assert acc_grid <= accuracy(single) + 1e-9

    def test_cw_base_attack_runs(self, cifs_model, batch):
        x, y = batch
        out = adaptive_cifs_attack(cifs_model, x[:6], y[:6], "cw_pgd", (0.0, "inf"), eps=0.05, steps=2)
        assert out.shape == (6, *x.shape[1:])
        assert float((out - x[:6]).abs().max()) <= 0.05 + 1e-7
