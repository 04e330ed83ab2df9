import json

import numpy as np
import pytest
import torch

from dropsynth.networks import Discriminator, GanConfig, Generator
from dropsynth.train import (
    GanCheckpoint,
    TrainSchedule,
    _module_state,
    config_hash,
    generate,
    gradient_norms,
    gradient_penalty,
    interpolate_pairs,
    minimax_losses,
    render_batch,
    train,
)

SMALL = GanConfig(latent_dim=16, channels=(16, 16, 16), max_stage=3)


class TestSchedule:
    def test_scalar_values_apply_to_every_stage(self):
        sched = TrainSchedule(max_stage=3, fade_images=100,
                              stabilize_images=200, batch_size=4)
        assert [sched.fade_at(s) for s in (1, 2, 3)] == [100, 100, 100]
        assert sched.stabilize_at(2) == 200
        assert sched.batch_at(3) == 4

    def test_per_stage_lists(self):
        sched = TrainSchedule(max_stage=3, fade_images=[10, 20, 30],
                              stabilize_images=[1, 2, 3],
                              batch_size=[8, 4, 2])
        assert [sched.fade_at(s) for s in (1, 2, 3)] == [10, 20, 30]
        assert [sched.batch_at(s) for s in (1, 2, 3)] == [8, 4, 2]

    def test_short_list_rejected(self):
        with pytest.raises(ValueError, match="shorter than max_stage"):
            TrainSchedule(max_stage=3, batch_size=[8, 4])

    def test_nonpositive_value_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            TrainSchedule(max_stage=2, fade_images=[100, 0])

    def test_round_trip_preserves_lists(self):
        sched = TrainSchedule(max_stage=2, batch_size=[8, 4])
        again = TrainSchedule.from_dict(sched.to_dict())
        assert again.batch_at(2) == 4
        assert config_hash(SMALL, sched) == config_hash(SMALL, again)


class TestLosses:
    def test_wasserstein_arithmetic(self):
        g, d = minimax_losses(torch.tensor([1.0, 1.0]), torch.tensor([0.0, 0.0]),
                              "wasserstein")
        assert d.item() == pytest.approx(-1.0)
        assert g.item() == pytest.approx(0.0)

    def test_wasserstein_symmetry(self):
        s = torch.tensor([0.3, -0.7, 1.2])
        _, d = minimax_losses(s, s, "wasserstein")
        assert d.item() == pytest.approx(0.0)

    def test_standard_at_half(self):
        zeros = torch.zeros(5)  # logit 0 <-> D = 0.5
        _, d = minimax_losses(zeros, zeros, "standard")
        assert d.item() == pytest.approx(-2 * np.log(0.5), rel=1e-6)

    def test_nan_names_side(self):
        good = torch.zeros(2)
        bad = torch.tensor([float("nan"), 0.0])
        with pytest.raises(ValueError, match="real"):
            minimax_losses(bad, good, "wasserstein")
        with pytest.raises(ValueError, match="fake"):
            minimax_losses(good, bad, "wasserstein")

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            minimax_losses(torch.zeros(0), torch.zeros(2), "wasserstein")


class TestGradientPenalty:
    def test_unit_norm_linear_critic_zero(self):
        w = torch.tensor([0.6, 0.8])
        penalty = gradient_penalty(lambda x: x @ w, torch.randn(16, 2),
                                   torch.randn(16, 2), 10.0)
        assert penalty.item() == 0.0

    def test_linear_critic_analytic(self):
        critic = lambda x: 3.0 * x[:, 0]
        penalty = gradient_penalty(critic, torch.randn(16, 2),
                                   torch.randn(16, 2), 10.0)
        assert penalty.item() == pytest.approx(40.0, abs=1e-4)

    def test_lambda_zero(self):
        critic = lambda x: (x ** 3).sum(dim=1)
        assert gradient_penalty(critic, torch.randn(4, 2),
                                torch.randn(4, 2), 0.0).item() == 0.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            gradient_penalty(lambda x: x.sum(dim=1), torch.randn(2, 2),
                             torch.randn(2, 2), -1.0)

    def test_interpolates_contained(self):
        g = torch.Generator().manual_seed(3)
        real = torch.randn(32, 4)
        fake = torch.randn(32, 4)
        x_hat = interpolate_pairs(real, fake, g)
        lo = torch.minimum(real, fake)
        hi = torch.maximum(real, fake)
        assert (x_hat >= lo - 1e-7).all() and (x_hat <= hi + 1e-7).all()

    def test_gradient_matches_finite_differences(self):
        critic = lambda x: torch.sin(x).sum(dim=1) + (x ** 2).sum(dim=1)
        points = torch.randn(8, 3, dtype=torch.float64)
        auto = gradient_norms(critic, points)
        h = 1e-6
        fd = torch.zeros_like(points)
        for j in range(points.shape[1]):
            dp = points.clone(); dp[:, j] += h
            dm = points.clone(); dm[:, j] -= h
            fd[:, j] = (critic(dp) - critic(dm)) / (2 * h)
        fd_norm = fd.norm(2, dim=1)
        assert ((auto - fd_norm).abs() / fd_norm).max() < 1e-3

    def test_penalty_step_reduces_gradient_mismatch(self):
        torch.manual_seed(0)
        disc = Discriminator(GanConfig(latent_dim=8, channels=(8, 8), max_stage=2),
                             active_stage=1)
        real = torch.randn(8, 1, 4, 4)
        fake = torch.randn(8, 1, 4, 4)
        g = torch.Generator().manual_seed(1)
        x_hat = interpolate_pairs(real, fake, g)

        def mismatch():
            norms = gradient_norms(lambda x: disc(x, 1, 1.0), x_hat)
            return ((norms - 1.0) ** 2).mean()

        before = mismatch().item()
        opt = torch.optim.SGD(disc.parameters(), lr=1e-4)
        loss = 1e4 * mismatch()
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert mismatch().item() < before


class TestCheckpoint:
    def _make(self, tmp_path, stage=2):
        torch.manual_seed(7)
        gen = Generator(SMALL, active_stage=stage)
        disc = Discriminator(SMALL, active_stage=stage)
        sched = TrainSchedule(max_stage=3, fade_images=64, stabilize_images=64,
                              batch_size=8)
        return GanCheckpoint(
            gan_config=SMALL, schedule=sched, stage=stage, alpha=1.0,
            images_seen=128, generator_state=_module_state(gen),
            discriminator_state=_module_state(disc), checkpoint_id="t",
        )

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self._make(tmp_path)
        path = tmp_path / "c.ckpt"
        ckpt.save(path)
        loaded = GanCheckpoint.load(path)
        assert loaded.stage == 2 and loaded.images_seen == 128
        for k, v in ckpt.generator_state.items():
            np.testing.assert_array_equal(v, loaded.generator_state[k])

    def test_forward_identical_after_round_trip(self, tmp_path):
        ckpt = self._make(tmp_path)
        z = torch.randn(2, SMALL.latent_dim)
        before = ckpt.build_generator()(z, 2, 1.0)
        path = tmp_path / "c.ckpt"
        ckpt.save(path)
        after = GanCheckpoint.load(path).build_generator()(z, 2, 1.0)
        assert torch.equal(before, after)

    def test_config_hash_mismatch_refused(self, tmp_path):
        ckpt = self._make(tmp_path)
        path = tmp_path / "c.ckpt"
        ckpt.save(path)
        other = GanConfig(latent_dim=8, channels=(8, 8, 8), max_stage=3)
        with pytest.raises(ValueError, match="refusing to resume"):
            GanCheckpoint.load(path,
                               expect_config_hash=config_hash(other, ckpt.schedule))


SMOKE_SCHED = TrainSchedule(max_stage=2, fade_images=64, stabilize_images=64,
                            batch_size=8)


class TestTrainLoop:
    def test_smoke_emits_stage_checkpoints(self, corpus, tmp_path):
        paths = train(corpus, SMOKE_SCHED, SMALL, seed=0, out_dir=tmp_path,
                      log_path=tmp_path / "log.ndjson")
        names = [p.name for p in paths]
        assert "stage_1.ckpt" in names and "stage_2.ckpt" in names
        final = GanCheckpoint.load(paths[-1])
        assert final.stage == 2

    def test_alpha_trace_ramps_and_resets(self, corpus, tmp_path):
        train(corpus, SMOKE_SCHED, SMALL, seed=0, out_dir=tmp_path,
              log_path=tmp_path / "log.ndjson")
        records = [json.loads(l) for l in
                   (tmp_path / "log.ndjson").read_text().splitlines()]
        by_stage = {}
        for r in records:
            by_stage.setdefault(r["stage"], []).append(r["alpha"])
        for stage, alphas in by_stage.items():
            assert alphas == sorted(alphas)  # non-decreasing within stage
        assert by_stage[2][0] == 0.0  # reset at grow

    def test_stage_resolution_monotone(self, corpus, tmp_path):
        paths = train(corpus, SMOKE_SCHED, SMALL, seed=0, out_dir=tmp_path)
        stages = [GanCheckpoint.load(p).stage for p in paths]
        assert stages == sorted(stages)

    def test_resume_continues_images_seen(self, corpus, tmp_path):
        paths = train(corpus, SMOKE_SCHED, SMALL, seed=0, out_dir=tmp_path / "a")
        first = GanCheckpoint.load(paths[0])
        resumed = train(corpus, SMOKE_SCHED, SMALL, seed=1,
                        out_dir=tmp_path / "b", resume_from=paths[0])
        final = GanCheckpoint.load(resumed[-1])
        assert final.images_seen > first.images_seen

    def test_empty_train_split_rejected(self, corpus, tmp_path):
        from dropsynth.data import DatasetManifest
        empty = DatasetManifest(resolution=32, channels=1, seed=0,
                                splits={"train": []})
        with pytest.raises(ValueError, match="empty"):
            train(empty, SMOKE_SCHED, SMALL, seed=0, out_dir=tmp_path)


class TestGenerate:
    def _checkpoint(self, tmp_path):
        torch.manual_seed(3)
        gen = Generator(SMALL, active_stage=2)
        sched = TrainSchedule(max_stage=2, fade_images=32, stabilize_images=32,
                              batch_size=4)
        ckpt = GanCheckpoint(SMALL, sched, 2, 1.0, 0, _module_state(gen), {}, {})
        path = tmp_path / "g.ckpt"
        ckpt.save(path)
        return path

    def test_count_and_resolution(self, tmp_path):
        path = self._checkpoint(tmp_path)
        from PIL import Image
        files = generate(path, 4, seed=0, out_dir=tmp_path / "imgs")
        assert len(files) == 4
        with Image.open(files[0]) as im:
            assert im.size == (8, 8)

    def test_same_seed_byte_identical(self, tmp_path):
        path = self._checkpoint(tmp_path)
        a = generate(path, 3, seed=5, out_dir=tmp_path / "a")
        b = generate(path, 3, seed=5, out_dir=tmp_path / "b")
        for fa, fb in zip(a, b):
            assert fa.read_bytes() == fb.read_bytes()

    def test_matches_forward_after_export_mapping(self, tmp_path):
        from dropsynth.data import load_image
        path = self._checkpoint(tmp_path)
        ckpt = GanCheckpoint.load(path)
        rng = torch.Generator().manual_seed(9)
        z = torch.randn(1, SMALL.latent_dim, generator=rng)
        expected = render_batch(ckpt, z)[0]
        files = generate(path, 1, seed=9, out_dir=tmp_path / "imgs")
        written = load_image(files[0])
        # export quantizes to 8 bits
        assert np.abs(written - expected).max() <= 1.0 / 127.5

    def test_count_must_be_positive(self, tmp_path):
        path = self._checkpoint(tmp_path)
        with pytest.raises(ValueError):
            generate(path, 0, seed=0, out_dir=tmp_path / "x")
