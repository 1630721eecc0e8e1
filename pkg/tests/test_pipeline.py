import numpy as np
import pytest

from avse import config, corpus, model, pipeline, tensorio

from conftest import TINY_CONFIG


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    """A tiny autoencoder + enhancer trained end to end on the tiny corpus."""
    work = tmp_path_factory.mktemp("run")
    cfg = config.load(None, {**TINY_CONFIG, "paths.cache_dir": str(work / "cache"),
                             "paths.run_dir": str(work / "run")})
    m = corpus.read_manifest(tiny_corpus)
    ae = pipeline.train_autoencoder(m, cfg, work / "run")
    pipeline.prepare(m, work / "cache", cfg.crq, ae)
    history = pipeline.train_enhancer(m, cfg, work / "cache", work / "run")
    return cfg, m, work, history


class TestPrepare:
    def test_counts_and_idempotence(self, trained):
        cfg, m, work, _ = trained
        cache = pipeline.FeatureCache(work / "cache")
        assert len(list((work / "cache" / "features").glob("*.avt"))) == len(m.utterances)
        assert len(list((work / "cache" / "latents").glob("*.avt"))) == len(m.utterances)
        report = pipeline.prepare(m, work / "cache", cfg.crq, work / "run" / "ae.avb")
        assert report.computed == [] and len(report.skipped) == len(m.utterances)
        assert cache.get("latents", m.utterances[0].id).shape[1] == 64

    def test_corrupted_entry_recomputed(self, trained):
        cfg, m, work, _ = trained
        uid = m.utterances[0].id
        path = work / "cache" / "features" / f"{uid}.avt"
        good = path.read_bytes()
        path.write_bytes(good[:-8] + b"garbage!")
        report = pipeline.prepare(m, work / "cache", cfg.crq, work / "run" / "ae.avb")
        assert report.computed == [uid]
        assert path.read_bytes() == good

    def test_missing_autoencoder(self, trained, tmp_path):
        cfg, m, _, _ = trained
        with pytest.raises(pipeline.DataError, match="autoencoder checkpoint not found"):
            pipeline.prepare(m, tmp_path, cfg.crq, tmp_path / "nope.avb")

    def test_missing_cache_entry(self, tmp_path):
        with pytest.raises(pipeline.DataError, match="run prepare"):
            pipeline.FeatureCache(tmp_path).get("latents", "x")


class TestTraining:
    def test_loss_log_and_checkpoints(self, trained):
        cfg, _, work, history = trained
        rows = (work / "run" / "avse_loss.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + cfg.training.epochs == 1 + len(history)
        assert len(list((work / "run" / "checkpoints").glob("epoch_*.avb"))) == cfg.training.epochs

    def test_resume_reproduces_next_epoch(self, trained, tmp_path):
        cfg, m, work, _ = trained
        three = config.load(None, {**TINY_CONFIG, "training.epochs": 3})
        full = pipeline.train_enhancer(m, three, work / "cache", tmp_path / "full")
        two = config.load(None, {**TINY_CONFIG, "training.epochs": 2})
        pipeline.train_enhancer(m, two, work / "cache", tmp_path / "split")
        resumed = pipeline.train_enhancer(m, three, work / "cache", tmp_path / "split", resume=True)
        assert resumed == pytest.approx(full, rel=1e-6)
        assert len(tensorio.load_bundle(tmp_path / "split" / "avse.avb")[1]["extra"]["history"]) == 3

    def test_incompatible_checkpoint(self, trained):
        _, m, work, _ = trained
        other = config.load(None, {**TINY_CONFIG, "model.lstm_hidden": 4})
        with pytest.raises(pipeline.DataError, match="different model configuration"):
            pipeline.train_enhancer(m, other, work / "cache", work / "run", resume=True)


class TestEvaluation:
    def test_scores(self, trained):
        cfg, m, work, _ = trained
        net, _ = model.load_model(work / "run" / "avse.avb")
        items = pipeline.test_items(m, cfg)
        scores = pipeline.evaluate(net, m, items, pipeline.FeatureCache(work / "cache"))
        assert len(scores) == len(items)
        assert all(0 < s["stoi"] <= 1 and 0 < s["stoi_noisy"] <= 1 for s in scores)

    def test_full_zero_out_equals_no_video(self, trained):
        cfg, m, work, _ = trained
        net, _ = model.load_model(work / "run" / "avse.avb")
        items = pipeline.test_items(m, cfg)[:2]
        cache = pipeline.FeatureCache(work / "cache")
        a = pipeline.evaluate(net, m, items, cache, pipeline.Condition(lp=100))
        b = pipeline.evaluate(net, m, items, cache, pipeline.Condition(no_video=True))
        assert [s["stoi"] for s in a] == [s["stoi"] for s in b]

    def test_offset_truncates(self, trained):
        _, m, work, _ = trained
        net, _ = model.load_model(work / "run" / "avse.avb")
        clean = m.utterances[-1]
        src = pipeline.Sources(m)
        wave = src.clean(clean.id)
        z = pipeline.FeatureCache(work / "cache").get("latents", clean.id)
        rng = np.random.default_rng(0)
        base = pipeline.evaluate_item(net, wave, wave, z, pipeline.Condition(), rng)
        shifted = pipeline.evaluate_item(net, wave, wave, z, pipeline.Condition(offset=-2), rng)
        assert base["stoi_noisy"] == pytest.approx(1.0)
        assert shifted["stoi_noisy"] == pytest.approx(1.0)

    @pytest.mark.parametrize("sweep,count", [("offset", 11), ("zeroout", 11)])
    def test_sweep_rows(self, trained, sweep, count, monkeypatch):
        cfg, m, work, _ = trained
        calls = []
        monkeypatch.setattr(pipeline, "evaluate", lambda *a, **k: calls.append(a[4]) or [
            {"stoi": 0.5, "stoi_noisy": 0.4, "snr_improvement": 1.0}])
        rows = pipeline.simulate(None, m, [], None, sweep)
        assert len(rows) == count == len(calls)
        if sweep == "offset":
            assert [c.offset for c in calls] == list(range(-5, 6))
        else:
            assert [c.lp for c in calls] == [float(v) for v in range(0, 101, 10)]

    def test_single_condition_sweep_equals_evaluate(self, trained):
        cfg, m, work, _ = trained
        net, _ = model.load_model(work / "run" / "avse.avb")
        items = pipeline.test_items(m, cfg)[:2]
        cache = pipeline.FeatureCache(work / "cache")
        row = pipeline.simulate(net, m, items, cache, "offset", [2])[0]
        scores = pipeline.evaluate(net, m, items, cache, pipeline.Condition(offset=2))
        assert row["stoi"] == pytest.approx(np.mean([s["stoi"] for s in scores]))

    def test_unknown_sweep(self):
        with pytest.raises(ValueError, match="unknown sweep"):
            pipeline.simulate(None, None, [], None, "pitch")
