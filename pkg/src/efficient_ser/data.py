"""Manifests, WAV I/O, label scaling, the synthetic corpus and raw-audio batching."""

from __future__ import annotations

import json
import logging
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import make_rng

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SPLITS = ("train", "dev", "test")
LABEL_MIN, LABEL_MAX = 1.0, 7.0


class DataError(ValueError):
    pass


class AudioFormatError(DataError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    audio: str
    split: str
    activation_raw: float
    valence_raw: float

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"{self.sample_id}: split must be one of {SPLITS}, got {self.split!r}")
        for name in ("activation_raw", "valence_raw"):
            value = getattr(self, name)
            if not LABEL_MIN <= value <= LABEL_MAX:
                raise DataError(f"{self.sample_id}: {name}={value} outside [{LABEL_MIN}, {LABEL_MAX}]")

    @property
    def labels(self) -> tuple[float, float]:
        return scale_labels(self.activation_raw), scale_labels(self.valence_raw)


def scale_labels(raw):
    """Map ratings on [1, 7] affinely onto [0, 1]."""
    arr = np.asarray(raw, dtype=np.float64)
    if np.any(arr < LABEL_MIN) or np.any(arr > LABEL_MAX) or np.any(np.isnan(arr)):
        raise DataError(f"label(s) outside [{LABEL_MIN}, {LABEL_MAX}]: {raw}")
    scaled = (arr - LABEL_MIN) / (LABEL_MAX - LABEL_MIN)
    return float(scaled) if scaled.ndim == 0 else scaled


class Manifest:
    """Records from a JSON-lines manifest; audio paths resolve against ``root``."""

    def __init__(self, records: Sequence[ManifestRecord], root: Path | str = "."):
        self.records = list(records)
        self.root = Path(root)
        self.by_id = {}
        for rec in self.records:
            if rec.sample_id in self.by_id:
                raise DataError(f"duplicate sample_id {rec.sample_id!r}")
            self.by_id[rec.sample_id] = rec

    @classmethod
    def load(cls, path: Path | str) -> "Manifest":
        path = Path(path)
        records = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(ManifestRecord(**json.loads(line)))
                except (TypeError, json.JSONDecodeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        return cls(records, path.parent)

    def save(self, path: Path | str) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def audio_path(self, rec: ManifestRecord) -> Path:
        return self.root / rec.audio

    def labels(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.by_id[i].labels for i in ids], dtype=np.float32)


def load_audio(path: Path | str) -> np.ndarray:
    """Read mono 16 kHz PCM16 WAV into float32 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            if fh.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: encoding {fh.getcomptype()} is not PCM")
            if channels != 1:
                raise AudioFormatError(f"{path}: channels={channels}, expected 1")
            if width != 2:
                raise AudioFormatError(f"{path}: sample width={width * 8} bits, expected 16")
            if rate != SAMPLE_RATE:
                raise AudioFormatError(f"{path}: rate={rate}, expected {SAMPLE_RATE}")
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc or 'truncated'})") from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def save_audio(path: Path | str, samples: np.ndarray) -> None:
    ints = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(ints.tobytes())


@dataclass(frozen=True)
class CorpusSpec:
    """Synthetic corpus shape.

    ``split_counts`` overrides the default 70/15/15 proportions of ``n_samples``.
    Modulation rates are drawn in ``[mod_min, mod_max]`` Hz; carrier bands move with
    the same latents as the labels so both are visible in short windows.
    """

    n_samples: int = 100
    min_seconds: float = 1.0
    max_seconds: float = 2.0
    mod_min: float = 2.0
    mod_max: float = 16.0
    min_gain: float = 0.02
    centre_hz: tuple[float, float] = (300.0, 2800.0)
    width_hz: tuple[float, float] = (200.0, 1700.0)
    split_counts: tuple[int, int, int] | None = None
    uniform_length: bool = False

    def counts(self) -> tuple[int, int, int]:
        if self.split_counts is not None:
            return tuple(int(c) for c in self.split_counts)
        n_train = int(round(0.70 * self.n_samples))
        n_dev = int(round(0.15 * self.n_samples))
        return n_train, n_dev, self.n_samples - n_train - n_dev


def _band_noise(rng: np.random.Generator, n: int, low: float, high: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spectrum[(freqs < low) | (freqs > high)] = 0.0
    noise = np.fft.irfft(spectrum, n)
    return noise / (np.sqrt(np.mean(noise**2)) + 1e-12)


def synthesize(rng: np.random.Generator, seconds: float, energy: float, rate_pos: float, spec: CorpusSpec):
    """One amplitude-modulated band-limited noise clip.

    ``energy`` and ``rate_pos`` are latents in [0, 1]: the first sets the gain, the
    second the modulation rate.
    """
    n = int(round(seconds * SAMPLE_RATE))
    centre = spec.centre_hz[0] + (spec.centre_hz[1] - spec.centre_hz[0]) * rate_pos
    width = spec.width_hz[0] + (spec.width_hz[1] - spec.width_hz[0]) * energy
    carrier = _band_noise(rng, n, max(50.0, centre - width / 2), min(7900.0, centre + width / 2))
    rate = spec.mod_min + (spec.mod_max - spec.mod_min) * rate_pos
    t = np.arange(n) / SAMPLE_RATE
    envelope = 0.5 * (1.0 + np.sin(2.0 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    signal = carrier * envelope
    signal /= np.max(np.abs(signal)) + 1e-12
    gain = spec.min_gain + (1.0 - spec.min_gain) * energy
    return (0.999 * gain * signal).astype(np.float32), rate


def generate_synthetic_corpus(out_dir: Path | str, spec: CorpusSpec = CorpusSpec(), seed: int = 0) -> Manifest:
    """Write WAV files plus ``manifest.jsonl`` and return the manifest.

    Labels: activation = 1 + 6 * RMS / max RMS over the corpus, valence = 1 + 6 *
    (rate - mod_min) / (mod_max - mod_min).
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed, 1)
    counts = spec.counts()
    total = sum(counts)
    if spec.uniform_length:
        durations = np.full(total, spec.min_seconds)
    else:
        durations = rng.uniform(spec.min_seconds, spec.max_seconds, size=total)
    energies = rng.uniform(0.0, 1.0, size=total)
    rate_pos = rng.uniform(0.0, 1.0, size=total)
    splits = np.repeat(np.arange(3), counts)
    rng.shuffle(splits)

    clips, rates = [], []
    for i in range(total):
        clip, rate = synthesize(make_rng(seed, 2, i), durations[i], energies[i], rate_pos[i], spec)
        clips.append(clip)
        rates.append(rate)
    records = []
    quantized = []
    for i, clip in enumerate(clips):
        rel = f"audio/s{i:05d}.wav"
        save_audio(out_dir / rel, clip)
        quantized.append(load_audio(out_dir / rel))
    rms = np.array([np.sqrt(np.mean(q.astype(np.float64) ** 2)) for q in quantized])
    for i in range(total):
        activation = 1.0 + 6.0 * rms[i] / rms.max()
        valence = 1.0 + 6.0 * (rates[i] - spec.mod_min) / (spec.mod_max - spec.mod_min)
        records.append(
            ManifestRecord(
                sample_id=f"s{i:05d}",
                audio=f"audio/s{i:05d}.wav",
                split=SPLITS[splits[i]],
                activation_raw=float(np.clip(activation, LABEL_MIN, LABEL_MAX)),
                valence_raw=float(np.clip(valence, LABEL_MIN, LABEL_MAX)),
            )
        )
    manifest = Manifest(records, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


@dataclass
class RawBatch:
    ids: list[str]
    audio: np.ndarray  # [B, T_max], zero-padded
    true_lengths: np.ndarray
    labels: np.ndarray  # [B, 2] scaled


def pad_stack(arrays: Sequence[np.ndarray], axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stack along a new leading axis, zero-padding ``axis`` of each item to the max."""
    lengths = np.array([a.shape[axis] for a in arrays], dtype=np.int64)
    target = int(lengths.max())
    padded = []
    for a in arrays:
        widths = [(0, 0)] * a.ndim
        widths[axis] = (0, target - a.shape[axis])
        padded.append(np.pad(a, widths))
    return np.stack(padded), lengths


def batch_ids(ids: Sequence[str], batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[list[str]]:
    """Split ids into batches; a trailing batch of one is dropped."""
    if not ids:
        raise DataError("cannot batch an empty split")
    order = list(ids)
    if shuffle:
        perm = make_rng(seed, 3, epoch).permutation(len(order))
        order = [order[i] for i in perm]
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches[-1]) < 2:
        dropped = batches.pop()
        log.warning("dropping remainder batch of %d sample(s): %s", len(dropped), dropped)
    return batches


class AudioCache:
    """Decoded waveforms keyed by sample id, loaded on first use."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._store: dict[str, np.ndarray] = {}

    def __getitem__(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._store:
            self._store[sample_id] = load_audio(self.manifest.audio_path(self.manifest.by_id[sample_id]))
        return self._store[sample_id]


def make_raw_batch(manifest: Manifest, ids: Sequence[str], audio: AudioCache | None = None) -> RawBatch:
    audio = audio or AudioCache(manifest)
    stacked, lengths = pad_stack([audio[i] for i in ids])
    return RawBatch(list(ids), stacked, lengths, manifest.labels(ids))


def make_batches(
    manifest: Manifest,
    split: str,
    batch_size: int = 32,
    seed: int = 0,
    epoch: int = 0,
    audio: AudioCache | None = None,
) -> Iterator[RawBatch]:
    ids = [r.sample_id for r in manifest.split(split)]
    if not ids:
        raise DataError(f"split {split!r} is empty")
    audio = audio or AudioCache(manifest)
    for group in batch_ids(ids, batch_size, seed, epoch):
        yield make_raw_batch(manifest, group, audio)
