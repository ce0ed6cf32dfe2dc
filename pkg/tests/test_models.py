import numpy as np
import pytest
import torch

from icgan import checkpoint, losses, models
from icgan.colormnist import hsv_to_rgb


class TestLatents:
    def test_layout_for_fixed_digit_and_hue(self, torch_rng):
        code = models.make_latent(0, 0.0, torch_rng)
        assert code.shape == (100,)
        assert code[0] == 1.0 and code[1:10].sum() == 0.0
        np.testing.assert_allclose(code[10:13].numpy(), [1, 0, 0], atol=1e-7)
        assert (code[13:] >= 0).all() and (code[13:] <= 1).all()

    def test_dimension_is_100(self, torch_rng):
        assert models.make_latent(None, None, torch_rng).shape == (100,)
        assert models.sample_latents(5, torch_rng).shape == (5, 100)

    def test_one_hot_exactly_one(self, torch_rng):
        codes = models.sample_latents(200, torch_rng)
        cats = codes[:, :10]
        assert ((cats == 1).sum(dim=1) == 1).all()
        assert ((cats == 0).sum(dim=1) == 9).all()

    def test_digit_frequencies_near_uniform(self, torch_rng):
        codes = models.sample_latents(10_000, torch_rng)
        freqs = codes[:, :10].mean(dim=0)
        assert ((freqs - 0.1).abs() < 0.02).all()

    def test_hues_on_grid(self, torch_rng):
        codes = models.sample_latents(50, torch_rng)
        col = models.latent_colors(codes).numpy()
        grid = hsv_to_rgb(np.arange(100) / 100).astype(np.float32)
        for row in col:
            assert np.abs(grid - row).max(axis=1).min() < 1e-6

    def test_digit_out_of_range_rejected(self, torch_rng):
        with pytest.raises(ValueError):
            models.make_latent(10, None, torch_rng)
        with pytest.raises(ValueError):
            models.make_latent(-1, None, torch_rng)


class TestGenerator:
    def test_output_shape_and_range(self, tiny_generator, torch_rng):
        z = models.sample_latents(7, torch_rng)
        out = tiny_generator(z)
        assert out.shape == (7, 3, 28, 28)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_wrong_latent_dim_rejected(self, tiny_generator):
        with pytest.raises(ValueError):
            tiny_generator(torch.randn(2, 99))

    def test_deterministic_forward(self, tiny_generator, torch_rng):
        z = models.sample_latents(3, torch_rng)
        assert torch.equal(tiny_generator(z), tiny_generator(z))

    def test_identity_modulation_matches_plain_variant(self, torch_rng):
        cfg_ic = models.GeneratorConfig(base_channels=16, ic_enabled=True)
        cfg_no = models.GeneratorConfig(base_channels=16, ic_enabled=False)
        g_ic = models.build_generator(cfg_ic, seed=3)
        g_no = models.build_generator(cfg_no, seed=4)
        # same trunk weights; force alpha=1, beta=0
        trunk = {k: v for k, v in g_ic.state_dict().items()
                 if not k.startswith("mod.")}
        g_no.load_state_dict(trunk)
        with torch.no_grad():
            for block in g_ic.mod.values():
                block.scale.weight.zero_()
                block.scale.bias.fill_(1.0)
                block.shift.weight.zero_()
                block.shift.bias.zero_()
        z = models.sample_latents(4, torch_rng)
        assert torch.allclose(g_ic(z), g_no(z), atol=1e-6)

    def test_parameter_count_delta(self):
        for base in (16, 64):
            cfg = models.GeneratorConfig(base_channels=base)
            g_ic = models.build_generator(cfg, seed=0)
            g_no = models.build_generator(
                models.GeneratorConfig(base_channels=base, ic_enabled=False), 0)
            delta = (sum(p.numel() for p in g_ic.parameters())
                     - sum(p.numel() for p in g_no.parameters()))
            assert delta == models.modulation_param_count(cfg)

    def test_batch_composition_independence(self, tiny_generator, torch_rng):
        z = models.sample_latents(5, torch_rng)
        joint = tiny_generator(z)
        singles = torch.cat([tiny_generator(z[i : i + 1]) for i in range(5)])
        assert torch.allclose(joint, singles, atol=1e-6)

    def test_autodiff_matches_finite_differences(self, torch_rng):
        cfg = models.GeneratorConfig(base_channels=8)
        gen = models.build_generator(cfg, seed=5).double()
        z = models.sample_latents(2, torch_rng).double()
        param = gen.mod["D2"].scale.weight

        out = gen(z).sum()
        gen.zero_grad()
        out.backward()
        autodiff = param.grad.clone()

        h = 1e-5
        idx = (3, 17)
        with torch.no_grad():
            param[idx] += h
            up = gen(z).sum().item()
            param[idx] -= 2 * h
            down = gen(z).sum().item()
            param[idx] += h
        fd = (up - down) / (2 * h)
        assert autodiff[idx].item() == pytest.approx(fd, rel=1e-3)

    def test_every_parameter_reachable_by_gradient(self, torch_rng):
        for ic in (True, False):
            cfg = models.GeneratorConfig(base_channels=16, ic_enabled=ic)
            gen = models.build_generator(cfg, seed=6)
            disc = models.build_discriminator(
                models.DiscriminatorConfig(base_channels=8), seed=7)
            z = models.sample_latents(4, torch_rng)
            fake = gen(z)
            out = disc(fake)
            total = losses.total_generator_loss(
                losses.generator_adv_loss(out.critic),
                losses.categorical_loss(z[:, :10], out.cat_logits),
                losses.continuous_loss(models.latent_colors(z), out.con_pred),
                losses.LossWeights(),
            )
            total.backward()
            for name, p in gen.named_parameters():
                assert p.grad is not None and p.grad.abs().sum() > 0, name

    def test_site_hook_sees_all_sites(self, tiny_generator, torch_rng):
        seen = []
        z = models.sample_latents(1, torch_rng)
        tiny_generator(z, site_hook=lambda name, t: (seen.append(name), t)[1])
        for layer in models.ABLATABLE_LAYERS:
            assert layer in seen


class TestDiscriminator:
    def test_head_shapes(self, torch_rng):
        disc = models.build_discriminator(
            models.DiscriminatorConfig(base_channels=8), seed=1)
        out = disc(torch.rand(5, 3, 28, 28, generator=torch_rng))
        assert out.critic.shape == (5,)
        assert out.cat_logits.shape == (5, 10)
        assert out.con_pred.shape == (5, 3)

    def test_continuous_head_strictly_inside_unit_interval(self, torch_rng):
        disc = models.build_discriminator(
            models.DiscriminatorConfig(base_channels=8), seed=2)
        out = disc(torch.rand(8, 3, 28, 28, generator=torch_rng))
        assert (out.con_pred > 0).all() and (out.con_pred < 1).all()

    def test_shape_mismatch_rejected(self):
        disc = models.build_discriminator(
            models.DiscriminatorConfig(base_channels=8), seed=3)
        with pytest.raises(ValueError):
            disc(torch.rand(2, 3, 27, 27))

    def test_every_parameter_reachable_by_gradient(self, torch_rng):
        disc = models.build_discriminator(
            models.DiscriminatorConfig(base_channels=8), seed=4)
        real = torch.rand(4, 3, 28, 28, generator=torch_rng)
        fake = torch.rand(4, 3, 28, 28, generator=torch_rng)
        out_fake, out_real = disc(fake), disc(real)
        total = losses.total_discriminator_loss(
            losses.critic_loss(out_fake.critic, out_real.critic),
            losses.gradient_penalty(disc.critic_score, real, fake, torch_rng),
            losses.categorical_loss(torch.eye(10)[:4], out_fake.cat_logits),
            losses.continuous_loss(torch.rand(4, 3, generator=torch_rng),
                                   out_fake.con_pred),
            losses.LossWeights(),
        )
        total.backward()
        for name, p in disc.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name

    def test_translation_gentler_than_random_perturbation(self):
        # blur-pooled trunk: a 1-pixel shift moves the critic less than a
        # random perturbation of equal energy, on average over 100 trials
        disc = models.build_discriminator(
            models.DiscriminatorConfig(base_channels=8), seed=5)
        disc.eval()
        d_shift, d_rand = [], []
        with torch.no_grad():
            for trial in range(100):
                gen = torch.Generator().manual_seed(trial)
                x = torch.rand(1, 3, 28, 28, generator=gen)
                shifted = torch.roll(x, shifts=1, dims=3)
                noise = torch.randn(x.shape, generator=gen)
                noise = noise / noise.norm() * (shifted - x).norm()
                base = disc(x).critic
                d_shift.append((disc(shifted).critic - base).abs().item())
                d_rand.append((disc(x + noise).critic - base).abs().item())
        assert np.mean(d_shift) < np.mean(d_rand)


class TestClassifier:
    def test_twelve_way_logits(self, torch_rng):
        clf = models.build_classifier(
            models.DiscriminatorConfig(base_channels=8), seed=1)
        x = torch.rand(4, 3, 28, 28, generator=torch_rng)
        assert clf(x).shape == (4, 12)
        assert clf.features(x).shape == (4, 256)


class TestCheckpoints:
    def test_roundtrip_bitwise(self, tmp_path, tiny_generator, torch_rng):
        path = tmp_path / "gen.ckpt"
        models.save_model(path, "generator", tiny_generator, step=17,
                          extra={"note": "x"})
        loaded, manifest = models.load_model(path, "generator")
        assert manifest["step"] == 17 and manifest["note"] == "x"
        for (na, pa), (nb, pb) in zip(tiny_generator.state_dict().items(),
                                      loaded.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)
        z = models.sample_latents(2, torch_rng)
        assert torch.equal(tiny_generator(z), loaded(z))

    def test_kind_mismatch_rejected(self, tmp_path, tiny_generator):
        path = tmp_path / "gen.ckpt"
        models.save_model(path, "generator", tiny_generator, step=0)
        with pytest.raises(checkpoint.CheckpointError):
            models.load_model(path, "classifier")

    def test_spec_hash_verified(self, tmp_path, tiny_generator):
        path = tmp_path / "gen.ckpt"
        models.save_model(path, "generator", tiny_generator, step=0)
        manifest, arrays = checkpoint.load_checkpoint(path)
        manifest["config"]["base_channels"] = 32  # tamper
        checkpoint.save_checkpoint(path, manifest, arrays)
        with pytest.raises(checkpoint.CheckpointError):
            models.load_model(path, "generator")

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"junkjunkjunk")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path, tiny_generator):
        path = tmp_path / "gen.ckpt"
        models.save_model(path, "generator", tiny_generator, step=0)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_checkpoint(path)
