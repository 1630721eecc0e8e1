"""Manifests, train/test assembly and a synthetic audio-visual corpus.

Manifest layout (JSON, paths relative to the manifest file)::

    {
      "schema_version": 1,
      "utterances": [{"id", "speaker", "audio", "lips", "duration"}, ...],
      "noises": [{"id", "audio", "split", "kind"}, ...],
      "splits": {"train_speakers": [...], "test_speakers": [...]}
    }

Corpus directories follow ``root/{clean,noise,lips/<id>/%06d.png}``.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import audio, augment, crq
from .audio import SAMPLE_RATE, Waveform

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRAIN_SNRS = (-12.0, -6.0, 0.0, 6.0, 12.0)
TEST_SNRS = (-1.0, -4.0, -7.0, -10.0)


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid manifest entries:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class UtteranceEntry:
    id: str
    speaker: str
    audio: str
    lips: str
    duration: float


@dataclass(frozen=True)
class NoiseEntry:
    id: str
    audio: str
    split: str = "any"
    kind: str = ""


@dataclass(frozen=True)
class SplitSpec:
    train_speakers: tuple[str, ...] = ()
    test_speakers: tuple[str, ...] = ()
    train_snrs: tuple[float, ...] = TRAIN_SNRS
    test_snrs: tuple[float, ...] = TEST_SNRS

    def __post_init__(self):
        overlap = set(self.train_speakers) & set(self.test_speakers)
        if overlap:
            raise ValueError(f"train and test speakers overlap: {sorted(overlap)}")
        if not self.train_snrs or not self.test_snrs:
            raise ValueError("SNR lists must not be empty")


@dataclass(frozen=True)
class MixtureItem:
    item_id: str
    utterance: str
    noise: str
    snr_db: float
    seed: int


@dataclass
class Manifest:
    utterances: list[UtteranceEntry]
    noises: list[NoiseEntry] = field(default_factory=list)
    split: SplitSpec | None = None
    root: Path = Path(".")

    def path(self, relative: str) -> Path:
        return (self.root / relative).resolve()

    def utterance(self, uid: str) -> UtteranceEntry:
        for u in self.utterances:
            if u.id == uid:
                return u
        raise KeyError(uid)

    def noise(self, nid: str) -> NoiseEntry:
        for n in self.noises:
            if n.id == nid:
                return n
        raise KeyError(nid)


# ------------------------------------------------------------------ manifests


def write_manifest(path, manifest: Manifest) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "utterances": [asdict(u) for u in manifest.utterances],
        "noises": [asdict(n) for n in manifest.noises],
    }
    if manifest.split is not None:
        doc["splits"] = {"train_speakers": list(manifest.split.train_speakers),
                         "test_speakers": list(manifest.split.test_speakers),
                         "train_snrs": list(manifest.split.train_snrs),
                         "test_snrs": list(manifest.split.test_snrs)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


def _wav_frames(path: Path) -> int:
    with wave.open(str(path)) as wf:
        n, rate = wf.getnframes(), wf.getframerate()
    if rate != SAMPLE_RATE:
        n = int(round(n * SAMPLE_RATE / rate))
    return audio.n_frames_for(n)


def read_manifest(path, validate: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: not valid JSON ({exc})"]) from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError([f"{path}: unsupported schema_version {doc.get('schema_version')!r}"])
    problems, utterances, noises = [], [], []
    for i, rec in enumerate(doc.get("utterances", [])):
        try:
            utterances.append(UtteranceEntry(str(rec["id"]), str(rec["speaker"]), rec["audio"], rec["lips"],
                                             float(rec["duration"])))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"utterance #{i}: malformed record ({exc!r})")
    for i, rec in enumerate(doc.get("noises", [])):
        try:
            noises.append(NoiseEntry(str(rec["id"]), rec["audio"], rec.get("split", "any"), rec.get("kind", "")))
        except (KeyError, TypeError) as exc:
            problems.append(f"noise #{i}: malformed record ({exc!r})")
    split = None
    if "splits" in doc:
        s = doc["splits"]
        split = SplitSpec(tuple(s.get("train_speakers", ())), tuple(s.get("test_speakers", ())),
                          tuple(s.get("train_snrs", TRAIN_SNRS)), tuple(s.get("test_snrs", TEST_SNRS)))
    manifest = Manifest(utterances, noises, split, path.parent)
    if validate:
        problems += validate_manifest(manifest)
    if problems:
        raise ManifestError(problems)
    if not utterances:
        logger.warning("manifest %s lists no utterances", path)
    return manifest


def validate_manifest(manifest: Manifest) -> list[str]:
    problems = []
    seen = set()
    for u in manifest.utterances:
        if u.id in seen:
            problems.append(f"{u.id}: duplicate id")
        seen.add(u.id)
        wav, lips = manifest.path(u.audio), manifest.path(u.lips)
        if not wav.is_file():
            problems.append(f"{u.id}: audio file missing ({wav})")
            continue
        if not lips.is_dir():
            problems.append(f"{u.id}: lip frame directory missing ({lips})")
            continue
        n_video = len(crq.list_frames(lips))
        n_audio = _wav_frames(wav)
        if abs(n_video - n_audio) > 1:
            problems.append(f"{u.id}: {n_video} lip frames vs {n_audio} audio frames at 50 fps")
    for n in manifest.noises:
        if not manifest.path(n.audio).is_file():
            problems.append(f"noise {n.id}: audio file missing ({manifest.path(n.audio)})")
    return problems


def load_manifest(path) -> list[UtteranceEntry]:
    """Validated utterance entries; raises :class:`ManifestError` listing every bad entry."""
    return read_manifest(path).utterances


# ----------------------------------------------------------- set assembly


def _item_seed(seed: int, *parts) -> int:
    return int(np.random.default_rng([seed, *parts]).integers(2 ** 31))


def _speakers(entries, wanted) -> list[UtteranceEntry]:
    wanted = set(wanted)
    return [e for e in entries if not wanted or e.speaker in wanted]


def _noises(noises, split: str) -> list[NoiseEntry]:
    return [n for n in noises if n.split in (split, "any")]


def build_training_set(entries, noises, spec: SplitSpec, budget: int | None = None,
                       seed: int = 0) -> list[MixtureItem]:
    """Utterances x noises x SNRs, uniformly subsampled to ``budget`` items."""
    entries = _speakers(entries, spec.train_speakers)
    noises = _noises(noises, "train")
    if not entries or not noises:
        raise ValueError("training set needs at least one utterance and one noise")
    grid = list(itertools.product(entries, noises, spec.train_snrs))
    rng = np.random.default_rng([seed, 1])
    if budget is None or budget >= len(grid):
        if budget is not None and budget > len(grid):
            logger.warning("budget %d exceeds the %d available mixtures; using all", budget, len(grid))
        picks = np.arange(len(grid))
    else:
        picks = np.sort(rng.choice(len(grid), size=budget, replace=False))
    items = []
    for i in picks:
        u, n, snr = grid[int(i)]
        items.append(MixtureItem(f"{u.id}__{n.id}__{snr:+g}dB", u.id, n.id, float(snr), _item_seed(seed, int(i))))
    return items


def build_test_set(entries, noises, spec: SplitSpec, seed: int = 0) -> list[MixtureItem]:
    """Exhaustive test speakers x test noises x test SNRs."""
    train = set(spec.train_speakers)
    entries = _speakers(entries, spec.test_speakers)
    leaked = sorted({e.speaker for e in entries} & train)
    if leaked:
        raise ValueError(f"test utterances from training speakers: {leaked}")
    noises = _noises(noises, "test")
    if not entries or not noises:
        raise ValueError("test set needs at least one utterance and one noise")
    return [MixtureItem(f"{u.id}__{n.id}__{snr:+g}dB", u.id, n.id, float(snr), _item_seed(seed, 2, i))
            for i, (u, n, snr) in enumerate(itertools.product(entries, noises, spec.test_snrs))]


def realize(item: MixtureItem, clean: Waveform, noise: Waveform) -> Waveform:
    """Deterministic noisy mixture for one item."""
    return augment.mix_at_snr(clean, noise, item.snr_db, np.random.default_rng(item.seed))


def write_items(path, items: list[MixtureItem]) -> None:
    Path(path).write_text(json.dumps({"schema_version": SCHEMA_VERSION, "items": [asdict(i) for i in items]},
                                     indent=1))


def read_items(path) -> list[MixtureItem]:
    doc = json.loads(Path(path).read_text())
    return [MixtureItem(**rec) for rec in doc["items"]]


# --------------------------------------------------------- synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    # many voices with few utterances each: unseen-speaker generalisation needs voice variety
    train_speakers: int = 40
    test_speakers: int = 5
    utterances_per_speaker: int = 2
    min_duration: float = 2.0
    max_duration: float = 3.0
    frame_size: int = 64
    noise_duration: float = 10.0


@dataclass(frozen=True)
class Voice:
    f0: float
    formant_scale: float
    lip_width: float
    tint: float


def _voice(rng: np.random.Generator) -> Voice:
    return Voice(float(rng.uniform(95, 240)), float(rng.uniform(0.85, 1.2)),
                 float(rng.uniform(0.26, 0.34)), float(rng.uniform(-0.05, 0.05)))


_VOWELS = np.array([[730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240],
                    [530, 1840, 2480], [570, 840, 2410], [660, 1720, 2410]], dtype=float)


def speech_envelope(duration: float, rng: np.random.Generator, rate: int = SAMPLE_RATE):
    """Syllable-like amplitude envelope plus the per-syllable vowel index track."""
    n = int(round(duration * rate))
    env = np.zeros(n)
    vowel = np.zeros(n, dtype=int)
    t = float(rng.uniform(0.12, 0.25))
    while True:
        length = float(rng.uniform(0.10, 0.24))
        if t + length > duration - 0.1:
            break
        a, b = int(t * rate), int((t + length) * rate)
        ramp = np.sin(np.linspace(0, np.pi, b - a)) ** 0.7
        env[a:b] = float(rng.uniform(0.55, 1.0)) * ramp
        vowel[a:b] = int(rng.integers(len(_VOWELS)))
        t += length + float(rng.uniform(0.04, 0.22))
    return env, vowel


_BREATH_FILTER = signal.butter(2, (1200, 6000), "bandpass", fs=SAMPLE_RATE, output="sos")


def synth_speech(voice: Voice, duration: float, rng: np.random.Generator):
    """Harmonic "speech" whose loudness follows a syllable envelope; returns (wave, envelope)."""
    env, vowel = speech_envelope(duration, rng)
    n = env.size
    t = np.arange(n) / SAMPLE_RATE
    f0 = voice.f0 * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 3) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    formants = _VOWELS[vowel] * voice.formant_scale
    bandwidth = np.array([70.0, 100.0, 140.0])
    x = np.zeros(n)
    for k in range(1, int(7000 / voice.f0)):
        fk = k * f0
        # resonance skirts plus a glottal tilt keep energy between the formants
        gain = sum(1.0 / (1.0 + ((fk - formants[:, j]) / bandwidth[j]) ** 2) / (j + 1) for j in range(3))
        x += (gain + 0.05) / np.sqrt(k) * np.sin(k * phase) * (fk < 7800)
    x *= env
    breath = signal.sosfilt(_BREATH_FILTER, rng.standard_normal(n))
    x += 0.15 * breath * np.sqrt(env)
    peak = np.max(np.abs(x))
    return (x * 0.5 / peak if peak > 0 else x), env


def render_lips(aperture: float, voice: Voice, size: int = 64) -> np.ndarray:
    """RGB frame of a mouth whose vertical opening is ``aperture`` in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    skin = np.array([0.86, 0.66, 0.55]) + voice.tint
    lip = np.array([0.72, 0.25, 0.28])
    mouth = np.array([0.16, 0.04, 0.05])
    w = voice.lip_width
    outer = (xx / (w + 0.06)) ** 2 + (yy / (0.09 + 0.22 * aperture)) ** 2
    inner = (xx / w) ** 2 + (yy / (0.005 + 0.2 * aperture)) ** 2
    a_outer = np.clip((1.0 - outer) * 8, 0, 1)[..., None]
    a_inner = np.clip((1.0 - inner) * 8, 0, 1)[..., None]
    img = skin * (1 - a_outer) + lip * a_outer
    img = img * (1 - a_inner) + mouth * a_inner
    return np.clip(img, 0, 1).astype(np.float32)


def frame_envelope(env: np.ndarray, n_frames: int) -> np.ndarray:
    """Envelope value at the centre of every 20 ms frame."""
    idx = np.minimum(np.arange(n_frames) * audio.HOP, env.size - 1)
    return env[idx]


def synth_noise(kind: str, duration: float, rng: np.random.Generator) -> np.ndarray:
    n = int(duration * SAMPLE_RATE)
    white = rng.standard_normal(n)
    if kind == "white":
        x = white
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(white)
        f = np.maximum(np.fft.rfftfreq(n, 1 / SAMPLE_RATE), 20.0)
        x = np.fft.irfft(spec / (f ** (0.5 if kind == "pink" else 1.0)), n)
    elif kind == "engine":
        t = np.arange(n) / SAMPLE_RATE
        f = 45 + 5 * np.sin(2 * np.pi * 0.2 * t)
        ph = 2 * np.pi * np.cumsum(f) / SAMPLE_RATE
        x = sum(np.sin(k * ph) / k for k in range(1, 30)) + 0.3 * synth_noise("brown", duration, rng)
    elif kind == "babble":
        x = np.zeros(n)
        for _ in range(4):
            voice = _voice(rng)
            pos = 0
            while pos < n:
                s, _ = synth_speech(voice, float(rng.uniform(1.5, 3.0)), rng)
                s = s[: n - pos]
                x[pos:pos + s.size] += s
                pos += s.size
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return 0.3 * x / np.max(np.abs(x))


TRAIN_NOISES = ("white", "brown", "engine", "babble")
TEST_NOISES = ("pink", "babble")


def _render_utterance(root: Path, spec: SyntheticSpec, seed: int, s: int, u: int) -> UtteranceEntry:
    speaker = f"spk{s:02d}"
    uid = f"{speaker}_u{u:03d}"
    voice = _voice(np.random.default_rng([seed, 0, s]))
    rng = np.random.default_rng([seed, 1, s, u])
    duration = float(rng.uniform(spec.min_duration, spec.max_duration))
    x, env = synth_speech(voice, duration, rng)
    audio.write_wav(root / "clean" / f"{uid}.wav", Waveform(x))
    lip_dir = root / "lips" / uid
    lip_dir.mkdir(parents=True, exist_ok=True)
    for old in crq.list_frames(lip_dir):
        old.unlink()
    for i, a in enumerate(frame_envelope(env, audio.n_frames_for(x.size))):
        crq.save_frame(lip_dir / f"{i:06d}.png", render_lips(float(a), voice, spec.frame_size))
    return UtteranceEntry(uid, speaker, f"clean/{uid}.wav", f"lips/{uid}", x.size / SAMPLE_RATE)


def generate_synthetic_corpus(root, spec: SyntheticSpec = SyntheticSpec(), seed: int = 0, jobs: int = 1) -> Path:
    """Write a synthetic corpus under ``root``; returns the manifest path.

    Utterances render in parallel; each derives its own seed, so the output
    does not depend on ``jobs``.
    """
    root = Path(root)
    n_speakers = spec.train_speakers + spec.test_speakers
    speakers = [f"spk{s:02d}" for s in range(n_speakers)]
    tasks = [(s, u) for s in range(n_speakers) for u in range(spec.utterances_per_speaker)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        utterances = list(pool.map(lambda t: _render_utterance(root, spec, seed, *t), tasks))
    noises = []
    for split, kinds in (("train", TRAIN_NOISES), ("test", TEST_NOISES)):
        for kind in kinds:
            nid = f"{split}_{kind}"
            x = synth_noise(kind, spec.noise_duration, np.random.default_rng([seed, 2, len(noises)]))
            audio.write_wav(root / "noise" / f"{nid}.wav", Waveform(x))
            noises.append(NoiseEntry(nid, f"noise/{nid}.wav", split, kind))
    split = SplitSpec(tuple(speakers[:spec.train_speakers]), tuple(speakers[spec.train_speakers:]))
    path = root / "manifest.json"
    write_manifest(path, Manifest(utterances, noises, split, root))
    return path


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float) - np.mean(a), np.asarray(b, float) - np.mean(b)
    denom = math.sqrt(float(np.sum(a * a) * np.sum(b * b)))
    return float(np.sum(a * b) / denom) if denom else 0.0
