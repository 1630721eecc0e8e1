import numpy as np
import pytest
import torch

from avse import audio, model
from avse.audio import Waveform
from avse.model import AvseConfig, TrainSettings, Utterance
from avse.nn import ShapeError

from gradcheck import numeric_grad, relative_error

MINI = AvseConfig(n_bins=9, context=1, conv_channels=(2, 2, 2), lstm_hidden=3, fc2=4, latent_dim=4)
SMALL = AvseConfig(conv_channels=(2, 2, 2), lstm_hidden=8, fc2=16, latent_dim=16)


def toy_dataset(n=4, frames=40, cfg=SMALL, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        z = rng.standard_normal((frames, cfg.latent_dim)).astype(np.float32)
        y = rng.standard_normal((frames, cfg.n_bins))
        x = y + 0.5 * rng.standard_normal(y.shape)
        out.append(Utterance(f"u{i}", x, y, z))
    return out


class TestArchitecture:
    def test_default_dimensions(self):
        cfg = AvseConfig()
        assert cfg.audio_latent_shape() == (32, 128, 5)
        assert cfg.audio_latent_dim == 20480
        assert cfg.fused_input_dim == 20480 + 2048 * 5

    def test_forward_shapes(self):
        net = model.build(SMALL)
        y, z = net(torch.zeros(2, 7, 257, 5), torch.zeros(2, 7, 16 * 5))
        assert y.shape == (2, 7, 257)
        assert z.shape == (2, 7, 16)

    def test_audio_context_checked(self):
        with pytest.raises(ShapeError, match="audio context"):
            model.build(SMALL).audio_latent(torch.zeros(1, 3, 257, 3))

    def test_visual_length_checked(self):
        net = model.build(SMALL)
        a = net.audio_latent(torch.zeros(1, 3, 257, 5))
        with pytest.raises(ShapeError, match="visual context"):
            net.fuse(a, torch.zeros(1, 4, 80))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            AvseConfig(kernel=2)


class TestEndToEndGradient:
    def test_combined_loss(self):
        torch.manual_seed(0)
        net = model.build(MINI, seed=0).double()
        x = torch.randn(1, 4, 9, 3, dtype=torch.float64)
        v = torch.randn(1, 4, 12, dtype=torch.float64)
        y = torch.randn(1, 4, 9, dtype=torch.float64)
        z = torch.randn(1, 4, 4, dtype=torch.float64)
        mask = torch.tensor([[False, True, True, True]])

        def loss():
            y_hat, z_hat = net(x, v)
            return model.combined_loss(y_hat, y, z_hat, z, 0.5, mask)

        net.zero_grad()
        loss().backward()
        worst = 0.0
        for name, p in net.named_parameters():
            worst = max(worst, relative_error(p.grad, numeric_grad(loss, p)))
        assert worst < 1e-3

    def test_mu_weights_latent_term(self):
        y_hat, y = torch.zeros(1, 2, 3), torch.ones(1, 2, 3)
        z_hat, z = torch.zeros(1, 2, 4), torch.full((1, 2, 4), 2.0)
        assert model.combined_loss(y_hat, y, z_hat, z, 1e-3).item() == pytest.approx(1.0 + 1e-3 * 4.0)


class TestLatents:
    def test_quantize_per_frame(self):
        z = np.array([[1e-6, 3e-6], [100.0, 1e-6]], dtype=np.float32)
        v = model.quantize_latent(z, 3)
        assert np.all(v[0] != 0)

    def test_visual_context_order(self):
        v = np.arange(4, dtype=np.float32)[:, None] * np.ones((1, 2), np.float32)
        ctx = model.visual_context(v, 1)
        assert ctx.shape == (4, 6)
        assert ctx[0].tolist() == [0, 0, 0, 0, 1, 1]
        assert ctx[2].tolist() == [1, 1, 2, 2, 3, 3]

    def test_align_latents(self):
        z = np.ones((10, 3))
        assert len(model.align_latents(z, 11)) == 11
        assert len(model.align_latents(z, 9)) == 9
        with pytest.raises(ValueError, match="video has 10 frames"):
            model.align_latents(z, 12)


class TestBatching:
    def test_segment_masks_drop_edges(self):
        utt = toy_dataset(1, frames=20)[0]
        segs = model.utterance_segments(utt, TrainSettings(segment=8), SMALL, np.random.default_rng(0))
        assert len(segs) == 3
        mask = np.concatenate([s.mask for s in segs])
        assert mask[:2].tolist() == [False, False]
        assert mask[2:18].all()
        assert not mask[18:].any()
        assert segs[0].v_halo.shape == (12, 16)

    def test_zero_out_span_shared_across_batch(self):
        utts = toy_dataset(3, frames=30)
        segs = [model.utterance_segments(u, TrainSettings(segment=30), SMALL, np.random.default_rng(0))[0]
                for u in utts]
        _, v, *_ = model.collate(segs, SMALL, 20.0, np.random.default_rng(5))
        blank = (v.reshape(3, 30, 5, 16)[:, :, 2] == 0).all(dim=-1)
        assert blank.sum(dim=1).tolist() == [6, 6, 6]
        assert torch.equal(blank[0], blank[1]) and torch.equal(blank[1], blank[2])

    def test_offset_training_shortens_streams(self):
        utt = toy_dataset(1, frames=40)[0]
        rng = np.random.default_rng(3)
        lengths = set()
        for _ in range(30):
            segs = model.utterance_segments(utt, TrainSettings(segment=50, ofr_k=3), SMALL, rng)
            lengths.add(int(segs[0].mask.sum()) + 2 * SMALL.context)
        assert lengths == {37, 38, 39, 40}

    def test_utterance_length_checks(self):
        with pytest.raises(ValueError, match="noisy frames"):
            Utterance("a", np.zeros((5, 257)), np.zeros((4, 257)), np.zeros((5, 8)))
        with pytest.raises(ValueError, match="video frames"):
            Utterance("a", np.zeros((5, 257)), np.zeros((5, 257)), np.zeros((2, 8)))


class TestTraining:
    def test_loss_decreases(self):
        net = model.build(SMALL, seed=0)
        hist = model.train(net, toy_dataset(), TrainSettings(epochs=6, batch_size=2, lr=3e-3, segment=20))
        assert len(hist) == 6
        assert hist[-1] < hist[0]

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = toy_dataset()
        settings = TrainSettings(epochs=4, batch_size=2, lr=1e-3, segment=20, seed=7, ofr_k=2, lpr=50)
        full = model.train(model.build(SMALL, seed=1), data, settings)

        net = model.build(SMALL, seed=1)
        opt = model.core.make_adam(net.parameters(), lr=1e-3)
        model.train(net, data, TrainSettings(**{**settings.__dict__, "epochs": 3}), opt)
        model.save_model(tmp_path / "m.avb", net, opt)
        net2, opt2, _ = model.load_model(tmp_path / "m.avb", with_optimizer=True, lr=1e-3)
        rest = model.train(net2, data, settings, opt2, start_epoch=3)
        assert rest[0] == pytest.approx(full[3], rel=1e-6)

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            model.train(model.build(SMALL), [], TrainSettings())


class TestInference:
    def test_no_video_equals_zero_latents(self):
        net = model.build(SMALL, seed=2)
        noisy = Waveform(np.random.default_rng(0).standard_normal(8000) * 0.1)
        n = audio.n_frames_for(len(noisy))
        a = model.enhance(noisy, net, None)
        b = model.enhance(noisy, net, np.zeros((n, 16), np.float32))
        assert np.array_equal(a.samples, b.samples)
        assert len(a) == len(noisy)

    def test_absent_frames_zeroed(self):
        net = model.build(SMALL)
        z = np.ones((10, 16), np.float32)
        absent = np.zeros(10, bool)
        absent[3:6] = True
        v = model.model_latents(net, z, 10, absent)
        assert not v[3:6].any() and v[:3].all()

    def test_sample_rate_checked(self):
        with pytest.raises(ValueError, match="16000"):
            model.enhance(Waveform(np.zeros(800), 8000), model.build(SMALL))

    def test_checkpoint_kind_checked(self, tmp_path):
        from avse import autoencoder

        autoencoder.save_ae(tmp_path / "ae.avb", autoencoder.build(autoencoder.AeConfig(widths=(4,))))
        with pytest.raises(ValueError, match="not an enhancement model"):
            model.load_model(tmp_path / "ae.avb")
