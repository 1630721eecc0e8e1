"""Acceptance suite: one test per criterion, reported as PASS/FAIL lines at the end of the run.

Criteria 7 to 9 share one desk-scale experiment (synthetic corpus, autoencoder,
three enhancement models) built once per session by the ``desk`` fixture.
"""
import struct
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch
from pystoi import stoi as reference_stoi
from scipy import stats

from avse import audio, augment, autoencoder, corpus, eofp, metrics, model, pipeline
from avse import config as avse_config
from avse import nn as core
from avse.audio import Waveform
from avse.autoencoder import AeConfig
from avse.crq import CrqConfig
from avse.model import AvseConfig
from avse.nn import LayerSpec
from avse.pipeline import Condition

from conftest import note
from gradcheck import numeric_grad, relative_error

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"


def oracle_fields(x: float):
    (bits,) = struct.unpack(">I", struct.pack(">f", x))
    return bits >> 31, (bits >> 23) & 0xFF, bits & ((1 << 23) - 1)


def oracle_from_fields(sign: int, exponent: int, mantissa: int) -> float:
    return struct.unpack(">f", struct.pack(">I", (sign << 31) | (exponent << 23) | mantissa))[0]


def random_finite_floats(n: int, seed: int) -> np.ndarray:
    """Half uniformly random bit patterns (all exponents), half lognormal magnitudes."""
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2 ** 32, n // 2, dtype=np.uint64).astype(np.uint32)
    patterns = bits.view(np.float32)
    patterns = patterns[np.isfinite(patterns)]
    while patterns.size < n // 2:
        extra = rng.integers(0, 2 ** 32, n // 2, dtype=np.uint64).astype(np.uint32).view(np.float32)
        patterns = np.concatenate([patterns, extra[np.isfinite(extra)]])
    signs = rng.choice([-1.0, 1.0], n - n // 2)
    lognormal = (signs * rng.lognormal(0.0, 3.0, n - n // 2)).astype(np.float32)
    return np.concatenate([patterns[: n // 2], lognormal])


class TestEofpBitExactness:
    def test_c01_eofp_bit_exactness(self):
        x = random_finite_floats(10 ** 6, seed=2021).reshape(-1, 64)
        start = time.perf_counter()
        for bits in (3, 5, 7, 9):
            once = eofp.quantize_dequantize(x, bits, rows=True)
            _, _, mantissa = eofp.split_fields(once)
            assert not mantissa.any(), f"{bits}-bit output has mantissa bits set"
            twice = eofp.quantize_dequantize(once, bits, rows=True)
            assert np.array_equal(once.view(np.uint32), twice.view(np.uint32)), f"{bits}-bit not idempotent"
        elapsed = time.perf_counter() - start
        note(1, f"{x.size} values x 4 widths in {elapsed:.2f} s")
        assert elapsed < 5.0, f"took {elapsed:.2f} s"


class TestFigureDecode:
    PATTERN = 0x3E500600

    def test_c02_figure_decode(self):
        value = eofp.bits_to_float(self.PATTERN)
        assert value == oracle_from_fields(0, 124, self.PATTERN & ((1 << 23) - 1))
        assert f"{value:.10f}"[:10] == "0.20314788"
        out = float(eofp.eofp_dequantize(eofp.eofp_quantize(np.float32(0.20314788), 5)))
        sign, exponent, _ = oracle_fields(0.20314788)
        assert out == oracle_from_fields(sign, exponent, 0) == 0.125


class TestCompressionRatios:
    def test_c03_compression_ratios(self):
        full = eofp.compression_ratio(CrqConfig("RGB", 64, 32), CrqConfig("GRAY", 16, 5))
        assert full.r_comp == Fraction(1536, 5) and float(full.r_comp) == 307.2
        equal_bits = eofp.compression_ratio(CrqConfig("RGB", 64, 32), CrqConfig("GRAY", 16, 32))
        assert equal_bits.r_comp == 48


class TestDspRoundTrip:
    def test_c04_dsp_round_trip(self):
        rng = np.random.default_rng(4)
        worst = np.inf
        for i in range(100):
            seconds = float(rng.uniform(0.5, 4.0))
            speech, _ = corpus.synth_speech(corpus._voice(rng), seconds, rng)
            x = speech + 0.01 * rng.standard_normal(speech.size)
            spec = audio.stft(Waveform(x))
            assert spec.frame_rate == 50
            back = audio.istft(spec)
            assert len(back) == len(x)
            worst = min(worst, metrics.snr_db(x, back.samples))

            feature = audio.log1p_feature(spec)
            np.testing.assert_allclose(audio.inverse_log1p(feature), np.abs(spec.frames), rtol=1e-6, atol=1e-9)
            normed, norm_stats = audio.normalize(feature)
            np.testing.assert_allclose(audio.denormalize(normed, norm_stats), feature, rtol=1e-6, atol=1e-6)
        note(4, f"worst round-trip SNR {worst:.1f} dB")
        assert worst >= 40.0, f"worst round-trip SNR {worst:.1f} dB"


class TestGradientSuite:
    LAYERS = [
        LayerSpec("conv2d", {"in_channels": 2, "out_channels": 3, "kernel": 3, "padding": 1}),
        LayerSpec("conv2d", {"in_channels": 1, "out_channels": 2, "kernel": 3, "stride": 2, "padding": 1}),
        LayerSpec("maxpool2d", {"kernel": (2, 1)}),
        LayerSpec("linear", {"in_features": 7, "out_features": 4}),
        LayerSpec("lstm", {"input_size": 4, "hidden_size": 3}),
        LayerSpec("lstm", {"input_size": 4, "hidden_size": 3, "bidirectional": True}),
    ]
    SHAPES = [(2, 2, 6, 5), (1, 1, 8, 8), (2, 3, 8, 5), (3, 7), (2, 5, 4), (2, 5, 4)]

    def layer_errors(self, spec, shape):
        torch.manual_seed(0)
        layer = spec.build().double()
        x = torch.randn(*shape, dtype=torch.float64)
        up = torch.randn_like(core.forward(layer, x))
        gx, gp = core.backward(layer, x, up)
        objective = lambda: (core.forward(layer, x) * up).sum()  # noqa: E731
        errors = [relative_error(gx, numeric_grad(objective, x))]
        errors += [relative_error(gp[n], numeric_grad(objective, p)) for n, p in layer.named_parameters()]
        return max(errors)

    def model_error(self, net, loss):
        # zero biases put ReLU inputs exactly on the kink; check at a generic point instead
        generator = torch.Generator().manual_seed(5)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=generator, dtype=p.dtype))
        net.zero_grad()
        loss().backward()
        return max(relative_error(p.grad, numeric_grad(loss, p)) for p in net.parameters())

    def test_c05_gradient_suite(self):
        start = time.perf_counter()
        errors = {spec.kind + str(i): self.layer_errors(spec, shape)
                  for i, (spec, shape) in enumerate(zip(self.LAYERS, self.SHAPES))}

        pred = torch.randn(2, 4, 3, dtype=torch.float64, requires_grad=True)
        target = torch.randn(2, 4, 3, dtype=torch.float64)
        mask = torch.tensor([[1, 1, 0, 1], [0, 1, 1, 1]], dtype=torch.bool)
        core.mse(pred, target, mask).backward()
        errors["mse"] = relative_error(pred.grad, numeric_grad(lambda: core.mse(pred, target, mask), pred))

        mini = AvseConfig(n_bins=9, context=1, conv_channels=(2, 2, 2), lstm_hidden=3, fc2=4, latent_dim=4)
        net = model.build(mini, seed=0).double()
        x = torch.randn(1, 4, 9, 3, dtype=torch.float64)
        v = torch.randn(1, 4, 12, dtype=torch.float64)
        y, z = torch.randn(1, 4, 9, dtype=torch.float64), torch.randn(1, 4, 4, dtype=torch.float64)
        frames = torch.tensor([[False, True, True, True]])

        def combined():
            y_hat, z_hat = net(x, v)
            return model.combined_loss(y_hat, y, z_hat, z, 0.5, frames)

        errors["combined loss"] = self.model_error(net, combined)

        ae = autoencoder.build(AeConfig(resolution=4, channels=1, latent_dim=8, widths=(2,)), seed=0).double()
        img = torch.rand(2, 1, 4, 4, dtype=torch.float64)
        errors["autoencoder"] = self.model_error(ae, lambda: ((ae(img) - img) ** 2).mean())

        elapsed = time.perf_counter() - start
        worst = max(errors, key=errors.get)
        note(5, f"worst relative error {errors[worst]:.1e} ({worst}), {elapsed:.1f} s")
        assert errors[worst] <= 1e-3, f"{worst}: relative error {errors[worst]:.2e}"
        assert elapsed < 60.0, f"took {elapsed:.1f} s"


class TestAugmentationExactness:
    def test_c06_augmentation_exactness(self):
        rng = np.random.default_rng(6)
        latents = np.ones((150, 8), dtype=np.float32)
        zeroed = np.flatnonzero(~augment.zero_out(latents, 4.0, rng).any(axis=1))
        assert zeroed.size == 6 and np.all(np.diff(zeroed) == 1)

        k = 3
        draws = np.array([augment.sample_offset(k, rng) for _ in range(10 ** 4)])
        counts = np.bincount(draws + k, minlength=2 * k + 1)
        assert counts.size == 2 * k + 1
        assert stats.chisquare(counts).pvalue > 0.01

        clean = Waveform(corpus.synth_speech(corpus._voice(rng), 2.0, rng)[0])
        noise = Waveform(corpus.synth_noise("pink", 3.0, rng))
        for snr in (-10.0, -4.0, 0.0, 6.0, 12.0):
            mixed = augment.mix_at_snr(clean, noise, snr, rng)
            achieved = metrics.snr_db(clean.samples, mixed.samples)
            assert achieved == pytest.approx(snr, abs=0.01)


class TestStoiValidity:
    def test_c10_stoi_validity(self):
        rng = np.random.default_rng(10)
        clean = corpus.synth_speech(corpus._voice(rng), 3.0, rng)[0]
        assert metrics.stoi(clean, clean) == pytest.approx(1.0, abs=1e-6)

        noise = rng.standard_normal(clean.size)
        noisy = clean + 0.1 * noise
        base = metrics.stoi(clean, noisy)
        for scale in (0.125, 2.0, 64.0):
            assert metrics.stoi(clean, scale * noisy) == base

        gain = lambda snr: np.sqrt(np.mean(clean ** 2) / (np.mean(noise ** 2) * 10 ** (snr / 10)))  # noqa: E731
        scores = [metrics.stoi(clean, clean + gain(snr) * noise) for snr in (10, 0, -10)]
        assert scores[0] > scores[1] > scores[2]

        diffs = []
        for i in range(20):
            r = np.random.default_rng(1000 + i)
            c = corpus.synth_speech(corpus._voice(r), float(r.uniform(1.5, 3.0)), r)[0]
            n = r.standard_normal(c.size)
            p = c + np.sqrt(np.mean(c ** 2) / (np.mean(n ** 2) * 10 ** ([-10, -5, 0, 5, 10][i % 5] / 10))) * n
            if i % 4 == 3:
                p = np.convolve(p, np.ones(5) / 5, mode="same")
            diffs.append(abs(metrics.stoi(c, p) - reference_stoi(c, p, 16000)))
        note(10, f"max difference from the reference {max(diffs):.4f}")
        assert max(diffs) <= 0.01, f"max difference from the reference {max(diffs):.4f}"


class DeskExperiment:
    """Synthetic corpus, autoencoder and cached features; enhancement models train on first use."""

    VARIANTS = {"base": {}, "lpr100": {"augmentation.lpr": 100.0}, "ofr3": {"augmentation.ofr_k": 3}}

    def __init__(self, root: Path):
        self.root = root
        start = time.perf_counter()
        path = corpus.generate_synthetic_corpus(root / "corpus", corpus.SyntheticSpec(), seed=0)
        self.manifest = corpus.read_manifest(path)
        self.config = self.load_config()
        ae = pipeline.train_autoencoder(self.manifest, self.config, root / "ae")
        pipeline.prepare(self.manifest, root / "cache", self.config.crq, ae)
        self.setup_seconds = time.perf_counter() - start
        self.cache = pipeline.FeatureCache(root / "cache")
        self.items = pipeline.test_items(self.manifest, self.config)
        self.runs, self.scores = {}, {}

    def load_config(self, overrides=None):
        return avse_config.load(DESK_CONFIG, {"paths.cache_dir": str(self.root / "cache"), **(overrides or {})})

    def utterance_counts(self) -> tuple[int, int]:
        split = self.manifest.split
        train = sum(u.speaker in split.train_speakers for u in self.manifest.utterances)
        test = sum(u.speaker in split.test_speakers for u in self.manifest.utterances)
        return train, test

    def run(self, name: str) -> dict:
        if name not in self.runs:
            cfg = self.load_config(self.VARIANTS[name])
            start = time.perf_counter()
            history = pipeline.train_enhancer(self.manifest, cfg, self.root / "cache", self.root / name)
            seconds = time.perf_counter() - start
            net, _ = model.load_model(self.root / name / "avse.avb")
            self.runs[name] = {"net": net, "history": history, "seconds": seconds}
        return self.runs[name]

    def stoi(self, name: str, condition: Condition = Condition()) -> float:
        key = (name, condition)
        if key not in self.scores:
            rows = pipeline.evaluate(self.run(name)["net"], self.manifest, self.items, self.cache, condition)
            self.scores[key] = float(np.mean([r["stoi"] for r in rows]))
            self.scores["noisy", condition.offset] = float(np.mean([r["stoi_noisy"] for r in rows]))
        return self.scores[key]

    def noisy_stoi(self) -> float:
        self.stoi("base")
        return self.scores["noisy", 0]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return DeskExperiment(tmp_path_factory.mktemp("desk"))


@pytest.mark.slow
class TestDeskScale:
    def test_c07_training_smoke(self, desk):
        train, test = desk.utterance_counts()
        assert train >= 50 and test >= 10, f"{train} train / {test} test utterances"
        run = desk.run("base")
        history = run["history"]
        enhanced, noisy = desk.stoi("base"), desk.noisy_stoi()
        minutes = (desk.setup_seconds + run["seconds"]) / 60
        note(7, f"loss {history[0]:.3f} -> {history[-1]:.3f} in {len(history)} epochs, {minutes:.1f} min; "
                f"STOI enhanced {enhanced:.4f} vs noisy {noisy:.4f}")
        assert len(history) <= 20
        assert history[-1] <= 0.5 * history[0]
        assert minutes <= 30
        assert enhanced >= noisy + 0.01

    def test_c08_zero_out_robustness(self, desk):
        at_full_loss = desk.stoi("lpr100", Condition(lp=100.0))
        no_video = desk.stoi("lpr100", Condition(no_video=True))
        base_drop = desk.stoi("base") - desk.stoi("base", Condition(lp=50.0))
        robust_drop = desk.stoi("lpr100") - desk.stoi("lpr100", Condition(lp=50.0))
        note(8, f"LPR100 model: LP100 {at_full_loss:.4f} vs no video {no_video:.4f}; "
                f"drop at LP50: LPR0 {base_drop:.4f}, LPR100 {robust_drop:.4f}")
        assert abs(at_full_loss - no_video) <= 0.02
        assert base_drop > robust_drop

    def test_c09_asynchronization_robustness(self, desk):
        def drop(name):
            shifted = [desk.stoi(name, Condition(offset=k)) for k in (-3, 3)]
            return desk.stoi(name) - float(np.mean(shifted))

        base_drop, robust_drop = drop("base"), drop("ofr3")
        note(9, f"drop at offsets +-3: OFR0 {base_drop:.4f}, OFR3 {robust_drop:.4f}")
        assert base_drop > robust_drop
