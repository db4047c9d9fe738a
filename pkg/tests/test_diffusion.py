import math

import numpy as np
import pytest
import torch

from conceptmark import codec, diffusion
from conceptmark.codebook import assign_secrets
from conceptmark.data import build_encrypted_dataset
from conceptmark.diffusion import (
    Denoiser,
    DiffusionError,
    IdentityCodec,
    NoiseSchedule,
    SoftDecoder,
    TinyAutoencoder,
    TrainConfig,
    denoise_from,
    linear_schedule,
    load_checkpoint,
    loss_bce,
    loss_ldm,
    predicted_x0,
    q_sample,
    sample,
    save_checkpoint,
    train_autoencoder,
    train_model,
    train_step,
)


class EpsOracle:
    """Returns exactly the noise implied by a known clean latent."""

    def __init__(self, z0, schedule):
        self.z0 = z0
        self.schedule = schedule

    def eval(self):
        return self

    def __call__(self, z_t, t, cond=None):
        ab = self.schedule.alpha_bars[int(t) if not torch.is_tensor(t) else int(t[0])]
        return (z_t - math.sqrt(ab) * self.z0) / math.sqrt(1.0 - ab)


class ZeroModel:
    def eval(self):
        return self

    def __call__(self, z_t, t, cond=None):
        return torch.zeros_like(z_t)


@pytest.fixture(scope="module")
def schedule():
    return linear_schedule()


class TestNoiseSchedule:
    def test_alpha_bar_structure(self, schedule):
        assert schedule.alpha_bars[0] == 1.0
        assert (np.diff(schedule.alpha_bars) < 0).all()
        assert ((schedule.betas > 0) & (schedule.betas < 1)).all()
        assert schedule.T == 200

    def test_rejects_bad_betas(self):
        with pytest.raises(DiffusionError):
            NoiseSchedule(betas=np.array([0.1, 0.0, 0.2]))
        with pytest.raises(DiffusionError):
            NoiseSchedule(betas=np.array([1.0]))


class TestQSample:
    def test_low_t_keeps_signal(self, schedule):
        z0 = torch.rand(2, 3, 8, 8)
        eps = torch.randn_like(z0)
        z1 = q_sample(schedule, z0, 1, eps)
        assert float((z1 - z0).abs().max()) < 0.1

    def test_high_t_is_mostly_noise(self):
        sched = linear_schedule(T=1000)  # alpha_bar(T) ~ 4e-5
        z0 = torch.rand(2, 3, 8, 8)
        eps = torch.randn_like(z0)
        zT = q_sample(sched, z0, 1000, eps)
        assert float((zT - eps).abs().max()) < 0.2

    def test_marginal_variance_monte_carlo(self, schedule):
        # oracle: var(z_t) = ab_t * var(z0) + (1 - ab_t), estimated over 10k draws
        gen = torch.Generator().manual_seed(0)
        t = 120
        z0 = torch.randn(10000, 1, 2, 2, generator=gen) * 0.7
        eps = torch.randn(10000, 1, 2, 2, generator=gen)
        zt = q_sample(schedule, z0, t, eps)
        ab = schedule.alpha_bars[t]
        expected = ab * 0.49 + (1 - ab)
        assert float(zt.var()) == pytest.approx(expected, rel=0.05)

    def test_rejects_out_of_range(self, schedule):
        z0 = torch.zeros(1, 3, 8, 8)
        with pytest.raises(DiffusionError):
            q_sample(schedule, z0, 0, torch.zeros_like(z0))
        with pytest.raises(DiffusionError):
            q_sample(schedule, z0, 201, torch.zeros_like(z0))
        with pytest.raises(DiffusionError):
            q_sample(schedule, z0, 5, torch.zeros(1, 3, 4, 4))


class TestLossLdm:
    def test_perfect_model_zero_loss(self, schedule):
        z0 = torch.rand(4, 3, 8, 8)
        eps = torch.randn_like(z0)
        model = EpsOracle(z0, schedule)
        assert float(loss_ldm(model, schedule, z0, 37, eps)) == pytest.approx(0.0, abs=1e-10)

    def test_zero_model_unit_loss(self, schedule):
        gen = torch.Generator().manual_seed(1)
        z0 = torch.rand(16, 3, 8, 8)
        eps = torch.randn(16, 3, 8, 8, generator=gen)
        assert float(loss_ldm(ZeroModel(), schedule, z0, 50, eps)) == pytest.approx(1.0, abs=0.1)


class TestLossBce:
    def test_perfect_prediction_near_zero(self):
        target = np.array([0, 1, 1, 0], dtype=np.float64)
        assert loss_bce(target, target) == pytest.approx(0.0, abs=1e-6)

    def test_half_everywhere_is_ln2(self):
        target = np.array([0, 1, 0, 1, 1], dtype=np.float64)
        assert loss_bce(target, np.full(5, 0.5)) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_independent_reference(self, rng):
        # second implementation: plain python loop over math.log
        p = rng.integers(0, 2, 64).astype(np.float64)
        p_hat = rng.uniform(0.01, 0.99, 64)
        expected = -sum(
            pi * math.log(qi) + (1 - pi) * math.log(1 - qi) for pi, qi in zip(p, p_hat)
        ) / 64
        assert loss_bce(p, p_hat) == pytest.approx(expected, abs=1e-9)
        got_torch = loss_bce(torch.from_numpy(p), torch.from_numpy(p_hat))
        assert float(got_torch) == pytest.approx(expected, abs=1e-9)

    def test_rejects_length_mismatch(self):
        with pytest.raises(DiffusionError):
            loss_bce(np.zeros(4), np.zeros(5))


class TestSoftDecoderBridge:
    def test_matches_numpy_codec(self, rng):
        bank = codec.build_carrier_bank(seed=3, b=32, shape=(16, 16, 3))
        decoder = SoftDecoder(bank, (16, 16, 3))
        imgs = rng.random((5, 16, 16, 3))
        want = codec.decode_soft(imgs, bank)
        got = decoder.soft_bits(torch.from_numpy(imgs.transpose(0, 3, 1, 2)).float())
        assert np.abs(got.numpy() - want).max() < 1e-5

    def test_dual_split_matches_codec_halves(self, rng):
        bank = codec.build_carrier_bank(seed=3, b=16, shape=(16, 16, 3))
        decoder = SoftDecoder(bank, (16, 16, 3), placement="top-bottom")
        imgs = rng.random((2, 16, 16, 3))
        soft_a, soft_b = decoder.soft_bits_dual(torch.from_numpy(imgs.transpose(0, 3, 1, 2)).float())
        first, second = codec.split_halves(imgs, "top-bottom")
        half_bank = bank.resized((8, 16, 3))
        assert np.abs(soft_a.numpy() - codec.decode_soft(np.ascontiguousarray(first), half_bank)).max() < 1e-5
        assert np.abs(soft_b.numpy() - codec.decode_soft(np.ascontiguousarray(second), half_bank)).max() < 1e-5


def tiny_model(num_classes=None, seed=0):
    torch.manual_seed(seed)
    return Denoiser(channels=(8, 16, 24), time_dim=32, num_classes=num_classes)


class TestDenoiser:
    def test_output_shape_and_param_budget(self):
        model = tiny_model()
        out = model(torch.randn(2, 3, 16, 16), 5)
        assert out.shape == (2, 3, 16, 16)
        assert Denoiser().parameter_count() <= 1_000_000

    def test_conditioning_changes_output(self):
        model = tiny_model(num_classes=4)
        z = torch.randn(2, 3, 16, 16)
        a = model(z, 3, torch.tensor([0, 0]))
        b = model(z, 3, torch.tensor([1, 1]))
        assert not torch.allclose(a, b)

    def test_unconditional_rejects_cond(self):
        model = tiny_model()
        with pytest.raises(DiffusionError):
            model(torch.randn(1, 3, 16, 16), 3, torch.tensor([0]))


class TestGradients:
    def test_ldm_gradient_matches_central_differences(self, schedule):
        torch.manual_seed(2)
        model = Denoiser(channels=(8, 16, 24), time_dim=32).double()
        z0 = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        eps = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        loss = loss_ldm(model, schedule, z0, 17, eps)
        loss.backward()
        checked = 0
        for name, p in model.named_parameters():
            if p.numel() == 0 or checked >= 8:
                continue
            flat = p.detach().reshape(-1)
            idx = checked % flat.numel()
            h = 1e-5
            with torch.no_grad():
                flat[idx] += h
                hi = float(loss_ldm(model, schedule, z0, 17, eps))
                flat[idx] -= 2 * h
                lo = float(loss_ldm(model, schedule, z0, 17, eps))
                flat[idx] += h
            fd = (hi - lo) / (2 * h)
            an = float(p.grad.reshape(-1)[idx])
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8), name
            checked += 1
        assert checked >= 8


class TestTrainStep:
    def make_batch(self, bank, n=4, b=16):
        rng = np.random.default_rng(0)
        images = torch.rand(n, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        secrets = torch.from_numpy(rng.integers(0, 2, (n, b)).astype(np.float32))
        return {"images": images, "secrets": secrets, "indices": list(range(n))}

    def test_alpha_zero_total_equals_ldm(self, schedule):
        bank = codec.build_carrier_bank(seed=1, b=16, shape=(16, 16, 3))
        model = tiny_model()
        opt = torch.optim.Adam(model.parameters(), lr=1e-4)
        decoder = SoftDecoder(bank, (16, 16, 3))
        cfg = TrainConfig(alpha_bce=0.0, iterations=1)
        out = train_step(model, opt, schedule, self.make_batch(bank), cfg, decoder,
                         generator=torch.Generator().manual_seed(3))
        assert out["total"] == out["ldm"]
        assert out["bce"] == 0.0

    def test_breakdown_identity(self, schedule):
        bank = codec.build_carrier_bank(seed=1, b=16, shape=(16, 16, 3))
        model = tiny_model()
        opt = torch.optim.Adam(model.parameters(), lr=1e-4)
        decoder = SoftDecoder(bank, (16, 16, 3))
        cfg = TrainConfig(alpha_bce=2.0, iterations=1)
        out = train_step(model, opt, schedule, self.make_batch(bank), cfg, decoder,
                         generator=torch.Generator().manual_seed(3))
        assert out["total"] == pytest.approx(out["ldm"] + 2.0 * out["bce"], rel=1e-6)

    def test_nonfinite_loss_reports_indices(self, schedule):
        bank = codec.build_carrier_bank(seed=1, b=16, shape=(16, 16, 3))

        class NanModel(ZeroModel):
            def __call__(self, z_t, t, cond=None):
                return torch.full_like(z_t, float("nan"))

        opt = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=0.1)
        decoder = SoftDecoder(bank, (16, 16, 3))
        batch = self.make_batch(bank)
        batch["indices"] = [11, 12, 13, 14]
        with pytest.raises(DiffusionError, match="11, 12, 13, 14"):
            train_step(NanModel(), opt, schedule, batch, TrainConfig(), decoder,
                       generator=torch.Generator().manual_seed(3))


class TestDenoiseFrom:
    def test_one_step_with_perfect_model_recovers_input(self, schedule):
        z0 = torch.rand(3, 3, 8, 8)
        eps = torch.randn_like(z0)
        z1 = q_sample(schedule, z0, 1, eps)
        out = denoise_from(EpsOracle(z0, schedule), schedule, z1, 1)
        rms = float(((out - z0) ** 2).mean().sqrt())
        assert rms <= 1e-3

    def test_full_chain_from_noise_matches_sample(self, schedule):
        model = tiny_model()
        got = sample(model, schedule, 2, (8, 8, 3), seed=9, deterministic=True)
        gen = torch.Generator().manual_seed(9)
        probe = torch.zeros(1, 3, 8, 8)
        z = torch.empty((2,) + tuple(probe.shape[1:])).normal_(generator=gen)
        manual = denoise_from(model, schedule, z, schedule.T, deterministic=True,
                              generator=gen, clip_bounds=(0.0, 1.0))
        manual = manual.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()
        assert np.array_equal(got, manual)

    def test_mixed_timesteps_match_individual_runs(self, schedule):
        model = tiny_model()
        z = torch.randn(3, 3, 8, 8, generator=torch.Generator().manual_seed(4))
        t = np.array([5, 60, 130])
        batched = denoise_from(model, schedule, z, t)
        for i in range(3):
            single = denoise_from(model, schedule, z[i : i + 1], int(t[i]))
            assert torch.allclose(batched[i], single[0], atol=1e-6)

    def test_rejects_out_of_range(self, schedule):
        with pytest.raises(DiffusionError):
            denoise_from(tiny_model(), schedule, torch.zeros(1, 3, 8, 8), 0)


class TestSample:
    def test_untrained_model_finite_in_range(self, schedule):
        imgs = sample(tiny_model(), schedule, 2, (16, 16, 3), seed=0)
        assert imgs.shape == (2, 16, 16, 3)
        assert np.isfinite(imgs).all()
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_deterministic_per_seed(self, schedule):
        model = tiny_model()
        a = sample(model, schedule, 2, (8, 8, 3), seed=5)
        b = sample(model, schedule, 2, (8, 8, 3), seed=5)
        assert np.array_equal(a, b)


class TestTrainLoop:
    def test_short_run_writes_log_and_history(self, tmp_path, schedule):
        bank = codec.build_carrier_bank(seed=2, b=32, shape=(16, 16, 3))
        registry = assign_secrets(2, b=32, seed=0)
        ds = build_encrypted_dataset(bank, registry, per_concept=6, shape=(16, 16, 3), strength=0.3, seed=1)
        model = tiny_model()
        cfg = TrainConfig(iterations=5, batch_size=4, seed=0)
        log = tmp_path / "train.log"
        history = train_model(model, schedule, ds, bank, registry, cfg, log_path=log)
        assert len(history) == 5
        lines = log.read_text().strip().split("\n")
        assert lines[0] == "iter, ldm, bce, total"
        assert len(lines) == 6
        assert lines[1].startswith("1, ")

    def test_dual_training_runs(self, schedule):
        bank = codec.build_carrier_bank(seed=2, b=32, shape=(16, 16, 3))
        media = assign_secrets(2, b=32, seed=0)
        content = assign_secrets(2, b=32, seed=1)
        ds = build_encrypted_dataset(bank, media, per_concept=4, shape=(16, 16, 3),
                                     strength=0.5, seed=1, dual=True, registry2=content)
        model = tiny_model()
        cfg = TrainConfig(iterations=3, batch_size=4, seed=0)
        history = train_model(model, schedule, ds, bank, media, cfg, registry2=content)
        assert len(history) == 3
        assert all(np.isfinite(h["total"]) for h in history)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, schedule):
        model = tiny_model(num_classes=3)
        path = tmp_path / "model.pmck"
        save_checkpoint(path, model, schedule, meta={"note": "test"})
        loaded, sched2, meta = load_checkpoint(path)
        assert meta["note"] == "test"
        assert np.allclose(sched2.betas, schedule.betas, rtol=1e-6)
        z = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            assert torch.equal(model(z, 3, torch.tensor([1])), loaded(z, 3, torch.tensor([1])))

    def test_header_versioned(self, tmp_path, schedule):
        path = tmp_path / "model.pmck"
        save_checkpoint(path, tiny_model(), schedule)
        assert open(path, "rb").readline() == b"PMCK1\n"

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.pmck"
        path.write_bytes(b"nonsense\n")
        with pytest.raises(DiffusionError):
            load_checkpoint(path)


class TestTinyAutoencoder:
    def test_reconstruction_reaches_35_db(self):
        from conceptmark.data import default_style, synth_concept_image

        rng = np.random.default_rng(0)
        images = np.stack([
            synth_concept_image(j % 2, default_style(j % 2, seed=1), (32, 32, 3), rng)
            for j in range(24)
        ])
        batch = torch.from_numpy(images.transpose(0, 3, 1, 2)).float()
        torch.manual_seed(0)
        ae = TinyAutoencoder()
        train_autoencoder(ae, batch, iterations=500, lr=2e-3, seed=0)
        with torch.no_grad():
            recon = ae.decode(ae.encode(batch)).clamp(0, 1)
        value = codec.psnr(recon.permute(0, 2, 3, 1).numpy(), images)
        assert value >= 35.0

    def test_identity_codec_is_exact(self):
        x = torch.rand(2, 3, 8, 8)
        ic = IdentityCodec()
        assert torch.equal(ic.decode(ic.encode(x)), x)
