import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from icgan import losses


class TestCriticParts:
    def test_equal_scores_give_zero(self):
        scores = torch.full((8,), 3.7)
        assert losses.critic_loss(scores, scores).item() == 0.0

    def test_simple_values(self):
        d_fake = torch.tensor([1.0, 1.0])
        d_real = torch.tensor([0.0, 0.0])
        assert losses.critic_loss(d_fake, d_real).item() == 1.0
        assert losses.generator_adv_loss(d_fake).item() == -1.0

    def test_translation_invariant(self):
        d_fake = torch.tensor([0.3, -1.2, 4.0])
        d_real = torch.tensor([1.0, 0.5, -0.5])
        base = losses.critic_loss(d_fake, d_real)
        shifted = losses.critic_loss(d_fake + 17.0, d_real + 17.0)
        assert torch.allclose(base, shifted, atol=1e-5)

    def test_empty_batch_rejected(self):
        empty = torch.empty(0)
        with pytest.raises(ValueError):
            losses.critic_loss(empty, torch.ones(3))
        with pytest.raises(ValueError):
            losses.generator_adv_loss(empty)


class TestGradientPenalty:
    def _rng(self):
        return torch.Generator().manual_seed(0)

    def test_unit_gradient_critic_gives_zero(self):
        u = torch.randn(3 * 28 * 28, generator=self._rng())
        u = u / u.norm()

        def critic(x):
            return x.flatten(1) @ u

        real = torch.rand(4, 3, 28, 28, generator=self._rng())
        fake = torch.rand(4, 3, 28, 28, generator=self._rng())
        gp = losses.gradient_penalty(critic, real, fake, self._rng())
        assert gp.item() == pytest.approx(0.0, abs=1e-8)

    def test_constant_critic_gives_lambda(self):
        def critic(x):
            return torch.full((x.shape[0],), 2.5)

        real = torch.rand(4, 3, 8, 8, generator=self._rng())
        fake = torch.rand(4, 3, 8, 8, generator=self._rng())
        gp = losses.gradient_penalty(critic, real, fake, self._rng())
        assert gp.item() == pytest.approx(10.0)

    def test_double_slope_critic(self):
        u = torch.randn(48, generator=self._rng())
        u = u / u.norm()

        def critic(x):
            return 2.0 * (x.flatten(1) @ u)

        real = torch.rand(5, 3, 4, 4, generator=self._rng())
        fake = torch.rand(5, 3, 4, 4, generator=self._rng())
        gp = losses.gradient_penalty(critic, real, fake, self._rng())
        assert gp.item() == pytest.approx(10.0, rel=1e-5)

    def test_nonnegative_on_random_critic(self):
        w = torch.randn(48, 1, generator=self._rng(), requires_grad=True)

        def critic(x):
            return torch.tanh(x.flatten(1) @ w).squeeze(1)

        for seed in range(5):
            gen = torch.Generator().manual_seed(seed)
            real = torch.rand(6, 3, 4, 4, generator=gen)
            fake = torch.rand(6, 3, 4, 4, generator=gen)
            assert losses.gradient_penalty(critic, real, fake, gen).item() >= 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.gradient_penalty(lambda x: x.sum(1), torch.rand(2, 4),
                                    torch.rand(3, 4), self._rng())


class TestCategoricalLoss:
    def test_confident_correct_logit_approaches_zero(self):
        c = torch.zeros(2, 10)
        c[:, 3] = 1.0
        logits = torch.zeros(2, 10)
        logits[:, 3] = 1e4
        assert losses.categorical_loss(c, logits).item() < 1e-9

    def test_uniform_logits_give_log10(self):
        c = torch.zeros(4, 10)
        c[:, 7] = 1.0
        loss = losses.categorical_loss(c, torch.zeros(4, 10, dtype=torch.float64))
        assert loss.item() == pytest.approx(math.log(10), abs=1e-9)

    def test_class_permutation_symmetry(self):
        gen = torch.Generator().manual_seed(3)
        c = torch.eye(10)[torch.randint(0, 10, (6,), generator=gen)]
        logits = torch.randn(6, 10, generator=gen)
        perm = torch.randperm(10, generator=gen)
        base = losses.categorical_loss(c, logits)
        permuted = losses.categorical_loss(c[:, perm], logits[:, perm])
        assert torch.allclose(base, permuted, atol=1e-6)

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(4)
        for _ in range(10):
            c = torch.eye(10)[torch.randint(0, 10, (5,), generator=gen)]
            logits = torch.randn(5, 10, generator=gen) * 10
            assert losses.categorical_loss(c, logits).item() >= 0.0


class TestContinuousLoss:
    def test_exact_prediction(self):
        c = torch.tensor([[0.2, 0.5, 0.9]])
        assert losses.continuous_loss(c, c.clone()).item() == 0.0

    def test_maximal_error(self):
        c = torch.zeros(2, 3)
        pred = torch.ones(2, 3)
        assert losses.continuous_loss(c, pred).item() == pytest.approx(1.0)

    def test_single_channel_error(self):
        c = torch.tensor([[1.0, 0.0, 0.0]])
        pred = torch.zeros(1, 3)
        assert losses.continuous_loss(c, pred).item() == pytest.approx(1 / 3)


class TestTotals:
    def test_zero_weights_reduce_to_adversarial(self):
        w = losses.LossWeights(lambda1=0.0, lambda2=0.0)
        adv, cat, con = (torch.tensor(v) for v in (1.5, 9.0, 4.0))
        assert losses.total_generator_loss(adv, cat, con, w).item() == 1.5
        total_d = losses.total_discriminator_loss(
            torch.tensor(-0.5), torch.tensor(2.0), cat, con, w)
        assert total_d.item() == 1.5

    def test_unit_weights_sum_parts(self):
        w = losses.LossWeights()
        parts = [torch.tensor(float(v)) for v in (1, 2, 3)]
        assert losses.total_generator_loss(*parts, w).item() == 6.0

    def test_doubling_lambda1_doubles_contribution(self):
        adv, cat, con = (torch.tensor(v) for v in (0.0, 5.0, 0.0))
        base = losses.total_generator_loss(adv, cat, con, losses.LossWeights())
        doubled = losses.total_generator_loss(
            adv, cat, con, losses.LossWeights(lambda1=2.0))
        assert doubled.item() == pytest.approx(2 * base.item())

    def test_supervised_term(self):
        w = losses.LossWeights(supervised_cat=True)
        args = [torch.tensor(1.0)] * 4
        total = losses.total_discriminator_loss(*args, w,
                                                supervised=torch.tensor(0.25))
        assert total.item() == pytest.approx(4.25)
        with pytest.raises(ValueError):
            losses.total_discriminator_loss(*args, w)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            losses.LossWeights(lambda1=-0.1)


class TestEnsureFinite:
    def test_passes_finite(self):
        value = torch.tensor(3.0)
        assert losses.ensure_finite("x", value) is value

    def test_raises_on_nan_and_inf(self):
        for bad in (float("nan"), float("inf")):
            with pytest.raises(losses.TrainingDivergence):
                losses.ensure_finite("x", torch.tensor(bad))


class TestLossGradients:
    def test_gradients_match_finite_differences(self):
        # tiny linear critic + heads, 64-bit central differences
        gen = torch.Generator().manual_seed(5)
        w = torch.randn(12, 1, generator=gen, dtype=torch.float64,
                        requires_grad=True)
        real = torch.rand(3, 12, generator=gen, dtype=torch.float64)
        fake = torch.rand(3, 12, generator=gen, dtype=torch.float64)

        def total():
            d_fake = (fake @ w).squeeze(1)
            d_real = (real @ w).squeeze(1)
            gp = losses.gradient_penalty(lambda x: (x @ w).squeeze(1), real,
                                         fake, torch.Generator().manual_seed(9))
            return losses.critic_loss(d_fake, d_real) + gp

        loss = total()
        loss.backward()
        autodiff = w.grad.clone()

        h = 1e-6
        fd = torch.zeros_like(w)
        for i in range(w.numel()):
            with torch.no_grad():
                w.reshape(-1)[i] += h
            up = total().item()
            with torch.no_grad():
                w.reshape(-1)[i] -= 2 * h
            down = total().item()
            with torch.no_grad():
                w.reshape(-1)[i] += h
            fd.reshape(-1)[i] = (up - down) / (2 * h)
        rel = (autodiff - fd).abs().max() / fd.abs().max()
        assert rel.item() < 1e-3


@given(st.integers(min_value=1, max_value=32), st.floats(-5, 5))
@settings(max_examples=25)
def test_critic_loss_deterministic(n, shift):
    d_fake = torch.linspace(-1, 1, n) + shift
    d_real = torch.linspace(0, 2, n)
    a = losses.critic_loss(d_fake, d_real)
    b = losses.critic_loss(d_fake.clone(), d_real.clone())
    assert torch.equal(a, b)
