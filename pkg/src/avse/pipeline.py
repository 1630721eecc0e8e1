"""Experiment stages: cache preparation, training runs, evaluation and sweeps."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio, augment, autoencoder, corpus, crq, metrics, model, tensorio
from .audio import Waveform
from .config import ExperimentConfig
from .corpus import Manifest, MixtureItem

logger = logging.getLogger(__name__)

FEATURE_VERSION = "log1p-v2"
OFFSET_SWEEP = tuple(range(-5, 6))
ZEROOUT_SWEEP = tuple(range(0, 101, 10))


class DataError(ValueError):
    """Input data that fails validation (exit code 2 on the command line)."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def lips_fingerprint(directory) -> str:
    h = hashlib.sha256()
    for p in crq.list_frames(directory):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------ caches


@dataclass
class PrepareReport:
    computed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


class FeatureCache:
    """Per-utterance clean log1p features and autoencoder latents.

    ``index.json`` maps ``kind/id`` to the fingerprint of the inputs that
    produced the file and the file's own sha256, so stale and corrupted
    entries are both detected.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.index_path = self.root / "index.json"
        self.index = json.loads(self.index_path.read_text()) if self.index_path.exists() else {}

    def path(self, kind: str, uid: str) -> Path:
        return self.root / kind / f"{uid}.avt"

    def fresh(self, kind: str, uid: str, source: str) -> bool:
        rec = self.index.get(f"{kind}/{uid}")
        p = self.path(kind, uid)
        if rec is None or rec["source"] != source or not p.exists():
            return False
        return sha256_file(p) == rec["sha256"]

    def put(self, kind: str, uid: str, source: str, array: np.ndarray) -> None:
        p = self.path(kind, uid)
        p.parent.mkdir(parents=True, exist_ok=True)
        tensorio.save_tensor(p, array)
        self.index[f"{kind}/{uid}"] = {"source": source, "sha256": sha256_file(p)}

    def get(self, kind: str, uid: str) -> np.ndarray:
        p = self.path(kind, uid)
        if f"{kind}/{uid}" not in self.index or not p.exists():
            raise DataError(f"no cached {kind} for {uid}; run prepare first")
        return tensorio.load_tensor(p)

    def flush(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.index, indent=1, sort_keys=True))
        tmp.replace(self.index_path)


def clean_feature(wave: Waveform) -> np.ndarray:
    return audio.log1p_feature(audio.stft(wave)).astype(np.float32)


def prepare(manifest: Manifest, cache_dir, crq_config: crq.CrqConfig | None = None, ae_path=None,
            jobs: int = 1) -> PrepareReport:
    """Fill the cache with clean features and, given ``ae_path``, latents.

    Up-to-date entries are skipped; missing, stale or corrupted ones are
    (re)computed.
    """
    cache = FeatureCache(cache_dir)
    report = PrepareReport()
    ae = ae_tag = None
    if ae_path is not None:
        if not Path(ae_path).is_file():
            raise DataError(f"autoencoder checkpoint not found: {ae_path}")
        ae, _ = autoencoder.load_ae(ae_path)
        ae_tag = sha256_file(ae_path)
        if crq_config is None:
            raise ValueError("latents need a CRQ configuration")
        if ae.config.resolution != crq_config.resolution or ae.config.channels != crq_config.channels:
            raise DataError("autoencoder checkpoint does not match the CRQ configuration")

    def work(u: corpus.UtteranceEntry):
        out = []
        wav = manifest.path(u.audio)
        source = f"{FEATURE_VERSION}:{sha256_file(wav)}"
        if not cache.fresh("features", u.id, source):
            out.append(("features", source, clean_feature(audio.read_wav(wav))))
        if ae is not None:
            lips = manifest.path(u.lips)
            source = f"{ae_tag}:{crq_config}:{lips_fingerprint(lips)}"
            if not cache.fresh("latents", u.id, source):
                out.append(("latents", source, model.encode_lips(crq.load_lip_sequence(lips), ae, crq_config)))
        return u, out

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for u, results in pool.map(work, manifest.utterances):
            for kind, source, array in results:
                cache.put(kind, u.id, source, array)
            (report.computed if results else report.skipped).append(u.id)
    cache.flush()
    return report


# ----------------------------------------------------------------- datasets


class Sources:
    """Lazily loaded clean and noise waveforms of a manifest."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._clean: dict[str, Waveform] = {}
        self._noise: dict[str, Waveform] = {}

    def clean(self, uid: str) -> Waveform:
        if uid not in self._clean:
            self._clean[uid] = audio.read_wav(self.manifest.path(self.manifest.utterance(uid).audio))
        return self._clean[uid]

    def noise(self, nid: str) -> Waveform:
        if nid not in self._noise:
            self._noise[nid] = audio.read_wav(self.manifest.path(self.manifest.noise(nid).audio))
        return self._noise[nid]

    def mixture(self, item: MixtureItem) -> tuple[Waveform, Waveform]:
        clean = self.clean(item.utterance)
        return clean, corpus.realize(item, clean, self.noise(item.noise))


def split_spec(manifest: Manifest, config: ExperimentConfig) -> corpus.SplitSpec:
    if manifest.split is None:
        raise DataError("manifest has no train/test speaker split")
    aug = config.augmentation
    return corpus.SplitSpec(manifest.split.train_speakers, manifest.split.test_speakers,
                            tuple(aug.train_snrs), tuple(aug.test_snrs))


def training_items(manifest: Manifest, config: ExperimentConfig) -> list[MixtureItem]:
    return corpus.build_training_set(manifest.utterances, manifest.noises, split_spec(manifest, config),
                                     config.training.budget, config.seed)


def test_items(manifest: Manifest, config: ExperimentConfig) -> list[MixtureItem]:
    return corpus.build_test_set(manifest.utterances, manifest.noises, split_spec(manifest, config), config.seed)


def training_utterances(manifest: Manifest, items: list[MixtureItem], cache: FeatureCache) -> list[model.Utterance]:
    sources = Sources(manifest)
    latents: dict[str, np.ndarray] = {}
    out = []
    for item in items:
        _, noisy = sources.mixture(item)
        x, stats, _ = audio.analyse(noisy)
        y = audio.apply_norm(cache.get("features", item.utterance), stats)
        if item.utterance not in latents:
            latents[item.utterance] = cache.get("latents", item.utterance)
        out.append(model.Utterance(item.item_id, x, y, latents[item.utterance]))
    return out


# ----------------------------------------------------------------- training


def _write_loss_log(path, history: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(history, 1):
            writer.writerow([i, f"{loss:.8g}"])


def ae_frames(manifest: Manifest, config: ExperimentConfig, speakers=None) -> tuple[np.ndarray, np.ndarray]:
    """CRQ inputs and grayscale targets from the lip frames of ``speakers``."""
    wanted = set(speakers or ())
    inputs, targets = [], []
    for u in manifest.utterances:
        if wanted and u.speaker not in wanted:
            continue
        frames = crq.load_lip_sequence(manifest.path(u.lips))[::config.ae_training.frame_stride]
        inputs.append(crq.crq_sequence(frames, config.crq))
        targets.append(crq.ae_target_sequence(frames, config.crq.resolution))
    if not inputs:
        raise DataError("no lip frames available for autoencoder training")
    return np.concatenate(inputs), np.concatenate(targets)


def train_autoencoder(manifest: Manifest, config: ExperimentConfig, run_dir, resume: bool = False,
                      log=logger.info) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "ae.avb"
    settings = config.ae_training
    history, start, optimizer = [], 0, None
    if resume and ckpt.exists():
        ae, optimizer, meta = autoencoder.load_ae(ckpt, with_optimizer=True, lr=settings.lr)
        if ae.config != config.autoencoder:
            raise DataError(f"{ckpt} was trained with a different autoencoder configuration")
        history, start = list(meta["extra"]["history"]), int(meta["extra"]["epoch"])
        log(f"resuming autoencoder from epoch {start}")
    else:
        ae = autoencoder.build(config.autoencoder, config.seed)
    train_speakers = manifest.split.train_speakers if manifest.split else None
    inputs, targets = ae_frames(manifest, config, train_speakers)
    optimizer = optimizer or model.core.make_adam(ae.parameters(), lr=settings.lr)

    def checkpoint(epoch, loss):
        history.append(loss)
        autoencoder.save_ae(ckpt, ae, history, optimizer, extra={"epoch": epoch + 1})
        _write_loss_log(run_dir / "ae_loss.csv", history)

    autoencoder.train_ae(ae, inputs, targets, settings.epochs, settings.batch_size, settings.lr, config.seed,
                         log=log, optimizer=optimizer, start_epoch=start, on_epoch=checkpoint)
    return ckpt


def train_enhancer(manifest: Manifest, config: ExperimentConfig, cache_dir, run_dir, resume: bool = False,
                   log=logger.info) -> list[float]:
    """Train (or resume) the enhancement model; checkpoints after every epoch.

    Returns the loss history of all epochs so far, including resumed ones.
    """
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "avse.avb"
    t = config.training
    settings = model.TrainSettings(t.epochs, t.batch_size, t.lr, config.seed, t.segment,
                                   config.augmentation.ofr_k, config.augmentation.lpr)
    history, start, optimizer = [], 0, None
    if resume and ckpt.exists():
        net, optimizer, meta = model.load_model(ckpt, with_optimizer=True, lr=t.lr)
        if net.config != config.model:
            raise DataError(f"{ckpt} was trained with a different model configuration")
        history, start = list(meta["extra"]["history"]), int(meta["extra"]["epoch"])
        log(f"resuming enhancement model from epoch {start}")
    else:
        net = model.build(config.model, config.seed)
    items = training_items(manifest, config)
    corpus.write_items(run_dir / "train_items.json", items)
    dataset = training_utterances(manifest, items, FeatureCache(cache_dir))
    optimizer = optimizer or model.core.make_adam(net.parameters(), lr=t.lr)

    def checkpoint(epoch, loss):
        history.append(loss)
        log(f"avse epoch {epoch + 1}/{t.epochs} loss {loss:.6f}")
        extra = {"epoch": epoch + 1, "history": history}
        model.save_model(run_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.avb", net, optimizer, extra)
        model.save_model(ckpt, net, optimizer, extra)
        _write_loss_log(run_dir / "avse_loss.csv", history)

    model.train(net, dataset, settings, optimizer, start, checkpoint)
    return history


# --------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class Condition:
    offset: int = 0
    lp: float = 0.0
    no_video: bool = False


def evaluate_item(net: model.AvseNet, clean: Waveform, noisy: Waveform, z: np.ndarray | None,
                  condition: Condition, rng: np.random.Generator) -> dict:
    """Score one mixture; the offset truncates both streams to their overlap."""
    shift = abs(condition.offset) * audio.HOP
    if condition.offset and z is not None:
        n = audio.n_frames_for(len(noisy))
        z = model.align_latents(z, n)
        z = z[:n - condition.offset] if condition.offset > 0 else z[-condition.offset:]
    if shift:
        keep = slice(shift, None) if condition.offset > 0 else slice(None, len(noisy) - shift)
        clean = Waveform(clean.samples[keep], clean.sample_rate)
        noisy = Waveform(noisy.samples[keep], noisy.sample_rate)
    n = audio.n_frames_for(len(noisy))
    absent = None
    if condition.lp and z is not None:
        start, stop = augment.zero_out_span(n, condition.lp, rng)
        absent = np.zeros(n, dtype=bool)
        absent[start:stop] = True
    enhanced = model.enhance(noisy, net, None if condition.no_video else z, absent)
    return {"stoi": metrics.stoi(clean, enhanced), "stoi_noisy": metrics.stoi(clean, noisy),
            "snr_improvement": metrics.snr_db(clean.samples, enhanced.samples)
            - metrics.snr_db(clean.samples, noisy.samples)}


def evaluate(net: model.AvseNet, manifest: Manifest, items: list[MixtureItem], cache: FeatureCache,
             condition: Condition = Condition(), jobs: int = 1) -> list[dict]:
    sources = Sources(manifest)
    for item in items:  # load serially; scoring below runs in threads
        sources.mixture(item)

    def work(item: MixtureItem) -> dict:
        clean, noisy = sources.mixture(item)
        z = None if condition.no_video else cache.get("latents", item.utterance)
        rng = np.random.default_rng([item.seed, 1])
        noise = manifest.noise(item.noise)
        return {"item_id": item.item_id, "noise": noise.kind or noise.id, "snr_db": item.snr_db,
                **evaluate_item(net, clean, noisy, z, condition, rng)}

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, items))


def simulate(net: model.AvseNet, manifest: Manifest, items: list[MixtureItem], cache: FeatureCache,
             sweep: str, values=None, jobs: int = 1) -> list[dict]:
    """Mean scores per sweep condition: audio/video offsets or zero-out percentages."""
    if sweep == "offset":
        values = OFFSET_SWEEP if values is None else values
        conditions = [(v, Condition(offset=int(v))) for v in values]
    elif sweep == "zeroout":
        values = ZEROOUT_SWEEP if values is None else values
        conditions = [(v, Condition(lp=float(v))) for v in values]
    else:
        raise ValueError(f"unknown sweep {sweep!r}; expected 'offset' or 'zeroout'")
    rows = []
    for value, cond in conditions:
        scores = evaluate(net, manifest, items, cache, cond, jobs)
        rows.append({"sweep": sweep, "value": value,
                     "stoi": float(np.mean([s["stoi"] for s in scores])),
                     "stoi_noisy": float(np.mean([s["stoi_noisy"] for s in scores])),
                     "snr_improvement": float(np.mean([s["snr_improvement"] for s in scores])),
                     "items": len(scores)})
    return rows


SWEEP_COLUMNS = ("sweep", "value", "stoi", "stoi_noisy", "snr_improvement", "items")


def write_rows(path, rows: list[dict], columns=SWEEP_COLUMNS) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
