import copy

import numpy as np
import pytest
import torch

from dropsynth.networks import (
    Discriminator,
    GanConfig,
    Generator,
    minibatch_stddev,
    pixel_norm,
)


class TestPixelNorm:
    def test_hand_vector(self):
        x = torch.tensor([3.0, 4.0]).view(1, 2, 1, 1)
        out = pixel_norm(x, eps=0.0).flatten()
        np.testing.assert_allclose(out, [0.84852814, 1.13137085], atol=1e-6)

    def test_zero_input_stays_zero(self):
        x = torch.zeros(2, 4, 3, 3)
        assert pixel_norm(x).abs().max() == 0.0

    def test_scale_invariance(self):
        x = torch.randn(2, 8, 4, 4)
        a = pixel_norm(x, eps=1e-12)
        b = pixel_norm(5.0 * x, eps=1e-12)
        assert (a - b).abs().max() < 1e-5

    def test_unit_mean_square(self):
        x = torch.randn(4, 16, 8, 8)
        out = pixel_norm(x)
        ms = out.pow(2).mean(dim=1)
        assert (ms - 1.0).abs().max() < 1e-4


def test_minibatch_stddev_appends_channel():
    x = torch.randn(4, 8, 4, 4)
    out = minibatch_stddev(x)
    assert out.shape == (4, 9, 4, 4)
    # identical batch -> stddev channel is ~0
    same = torch.randn(1, 8, 4, 4).expand(4, -1, -1, -1)
    assert minibatch_stddev(same)[:, -1].abs().max() < 1e-3


class TestGenerator:
    def test_stage_shapes(self, small_cfg):
        gen = Generator(small_cfg, active_stage=4)
        z = torch.randn(3, small_cfg.latent_dim)
        for stage in range(1, 5):
            out = gen(z, stage, 1.0)
            assert out.shape == (3, 1, 2 ** (stage + 1), 2 ** (stage + 1))

    def test_stage_beyond_depth_errors(self, small_cfg):
        gen = Generator(small_cfg, active_stage=2)
        with pytest.raises(ValueError, match="beyond"):
            gen(torch.randn(1, small_cfg.latent_dim), 3, 1.0)

    def test_alpha_zero_is_upsampled_previous_stage(self, small_cfg):
        gen = Generator(small_cfg, active_stage=3)
        z = torch.randn(2, small_cfg.latent_dim)
        prev = gen(z, 2, 1.0)
        blended = gen(z, 3, 0.0)
        up = torch.nn.functional.interpolate(prev, scale_factor=2, mode="nearest")
        assert (blended - up).abs().max() < 1e-6

    def test_grow_preserves_parameters(self, small_cfg):
        gen = Generator(small_cfg, active_stage=2)
        before = {k: v.clone() for k, v in gen.state_dict().items()}
        gen.grow()
        after = gen.state_dict()
        for k, v in before.items():
            assert torch.equal(v, after[k])

    def test_grow_past_max_errors(self):
        cfg = GanConfig(latent_dim=8, channels=(8,) * 9, max_stage=9)
        gen = Generator(cfg, active_stage=9)
        with pytest.raises(ValueError, match="max stage"):
            gen.grow()

    def test_post_grow_alpha_zero_matches_pre_grow(self, small_cfg):
        gen = Generator(small_cfg, active_stage=2)
        z = torch.randn(2, small_cfg.latent_dim)
        pre = gen(z, 2, 1.0)
        grown = copy.deepcopy(gen)
        grown.grow()
        post = grown(z, 3, 0.0)
        up = torch.nn.functional.interpolate(pre, scale_factor=2, mode="nearest")
        assert (post - up).abs().max() < 1e-6

    def test_fade_in_continuity(self, small_cfg):
        gen = Generator(small_cfg, active_stage=3)
        z = torch.randn(2, small_cfg.latent_dim)
        delta = 1e-3
        a = gen(z, 3, 0.5)
        b = gen(z, 3, 0.5 + delta)
        # |f(a+d) - f(a)| is proportional to d for the linear blend
        span = (gen(z, 3, 1.0) - gen(z, 3, 0.0)).abs().max()
        assert (a - b).abs().max() <= span * delta + 1e-7

    def test_determinism(self, small_cfg):
        gen = Generator(small_cfg, active_stage=3)
        z = torch.randn(2, small_cfg.latent_dim)
        out1 = gen(z, 3, 0.7)
        out2 = gen(z, 3, 0.7)
        assert torch.equal(out1, out2)


class TestDiscriminator:
    def test_score_shape(self, small_cfg):
        disc = Discriminator(small_cfg, active_stage=3)
        imgs = torch.randn(8, 1, 16, 16)
        assert disc(imgs, 3, 1.0).shape == (8,)

    def test_resolution_mismatch_errors(self, small_cfg):
        disc = Discriminator(small_cfg, active_stage=3)
        with pytest.raises(ValueError, match="16x16"):
            disc(torch.randn(2, 1, 8, 8), 3, 1.0)

    def test_alpha_zero_matches_downsampled_previous_stage(self, small_cfg):
        disc = Discriminator(small_cfg, active_stage=3)
        imgs = torch.randn(4, 1, 16, 16)
        blended = disc(imgs, 3, 0.0)
        down = torch.nn.functional.avg_pool2d(imgs, 2)
        prev = disc(down, 2, 1.0)
        assert (blended - prev).abs().max() < 1e-6

    def test_duplicate_images_equal_scores(self, small_cfg):
        disc = Discriminator(small_cfg, active_stage=2)
        one = torch.randn(1, 1, 8, 8)
        batch = one.expand(6, -1, -1, -1)
        scores = disc(batch, 2, 1.0)
        assert (scores - scores[0]).abs().max() < 1e-6

    def test_grow_preserves_parameters(self, small_cfg):
        disc = Discriminator(small_cfg, active_stage=2)
        before = {k: v.clone() for k, v in disc.state_dict().items()}
        disc.grow()
        for k, v in before.items():
            assert torch.equal(v, disc.state_dict()[k])


class TestConfig:
    def test_channel_schedule_must_not_increase(self):
        with pytest.raises(ValueError, match="non-increasing"):
            GanConfig(channels=(16, 32, 16), max_stage=3)

    def test_schedule_shorter_than_stages(self):
        with pytest.raises(ValueError, match="shorter"):
            GanConfig(channels=(16, 16), max_stage=4)

    def test_round_trip(self):
        cfg = GanConfig(latent_dim=32, channels=(8, 8, 8), max_stage=3)
        assert GanConfig.from_dict(cfg.to_dict()) == cfg
