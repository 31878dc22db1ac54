"""Audio decoding, Speech Commands indexing, hash splits and augmentation.

Waveforms are float64 numpy arrays with amplitudes in [-1, 1]. Every random
choice takes an explicit ``numpy.random.Generator`` so that a seed fully
determines the augmented clip.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import re
import wave
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetIndexError, WavDecodeError

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000

WORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
SILENCE = "silence"
UNKNOWN = "unknown"
LABELS = WORDS + (SILENCE, UNKNOWN)
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

SPLITS = ("train", "validation", "test")
BACKGROUND_DIR = "_background_noise_"
SILENCE_DIR = "_silence_"

# Largest value the dataset's canonical split hash can take (2^27 - 1).
MAX_NUM_WAVS_PER_CLASS = 2**27 - 1
_NOHASH_RE = re.compile(r"_nohash_.*$")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class DatasetEntry:
    path: str
    label: str
    split: str

    @property
    def label_id(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass
class AugmentConfig:
    shift_range_s: float = 0.1
    noise_coeff_max: float = 0.1
    noise_prob: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if self.shift_range_s < 0:
            raise ValueError("shift_range_s must be >= 0")
        if self.noise_coeff_max < 0:
            raise ValueError("noise_coeff_max must be >= 0")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must lie in [0, 1]")

    @classmethod
    def disabled(cls, rng_seed: int = 0) -> "AugmentConfig":
        return cls(shift_range_s=0.0, noise_coeff_max=0.0, noise_prob=0.0, rng_seed=rng_seed)

    @property
    def is_identity(self) -> bool:
        return self.shift_range_s == 0 and (self.noise_prob == 0 or self.noise_coeff_max == 0)


# ---------------------------------------------------------------------------
# WAV I/O


def decode_wav(data: bytes) -> AudioClip:
    """Decode a 16-bit PCM mono 16 kHz RIFF/WAVE byte string."""
    if len(data) < 12:
        raise WavDecodeError("header: file shorter than a RIFF header")
    if data[:4] != b"RIFF":
        raise WavDecodeError(f"magic: expected b'RIFF', got {data[:4]!r}")
    if data[8:12] != b"WAVE":
        raise WavDecodeError(f"format: expected b'WAVE', got {data[8:12]!r}")
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavDecodeError(f"header: {exc}") from exc
    if width != 2:
        raise WavDecodeError(f"bit depth: expected 16, got {8 * width}")
    if channels != 1:
        raise WavDecodeError(f"channel count: expected 1, got {channels}")
    if rate != SAMPLE_RATE:
        raise WavDecodeError(f"sample rate: expected {SAMPLE_RATE}, got {rate}")
    pcm = np.frombuffer(frames[: len(frames) // 2 * 2], dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def encode_wav(clip: AudioClip) -> bytes:
    """Inverse of :func:`decode_wav`; amplitudes are clipped and rounded to PCM16."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


def read_wav(path) -> AudioClip:
    return decode_wav(Path(path).read_bytes())


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav(clip))


# ---------------------------------------------------------------------------
# Splits and indexing


def assign_split(filename: str, val_pct: float, test_pct: float) -> str:
    """Return ``"train"``, ``"validation"`` or ``"test"`` for a file name.

    The bucket is a SHA-1 hash of the basename with its ``_nohash_`` suffix
    removed, so every recording of one speaker lands in the same split.
    """
    if not filename:
        raise ValueError("filename must be non-empty")
    if val_pct + test_pct > 100:
        raise ValueError("val_pct + test_pct must not exceed 100")
    base = os.path.basename(filename.replace("\\", "/"))
    hash_name = _NOHASH_RE.sub("", base)
    digest = hashlib.sha1(hash_name.encode("utf-8")).hexdigest()
    pct = (int(digest, 16) % (MAX_NUM_WAVS_PER_CLASS + 1)) * (100.0 / MAX_NUM_WAVS_PER_CLASS)
    if pct < val_pct:
        return "validation"
    if pct < val_pct + test_pct:
        return "test"
    return "train"


def word_to_label(word: str) -> str:
    return word if word in WORDS else UNKNOWN


def scan_utterances(root) -> list[str]:
    """All utterance paths (relative, ``/``-separated) under ``root``, sorted.

    Background-noise recordings are not utterances and are skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetIndexError(f"data root not found: {root}")
    paths = []
    for word_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if word_dir.name.startswith("_"):
            continue
        for wav in sorted(word_dir.glob("*.wav")):
            paths.append(f"{word_dir.name}/{wav.name}")
    return paths


def _silence_path(split: str, i: int) -> str:
    return f"{SILENCE_DIR}/{split}/{i:06d}"


def index_from_paths(
    paths,
    val_pct: float = 10.0,
    test_pct: float = 10.0,
    unknown_pct: float = 10.0,
    silence_pct: float = 10.0,
    rng_seed: int = 0,
) -> list[DatasetEntry]:
    """Build the 12-class index from relative ``word/file.wav`` paths."""
    targets = {s: [] for s in SPLITS}
    unknowns = {s: [] for s in SPLITS}
    for path in sorted(paths):
        parts = path.replace("\\", "/").split("/")
        word = parts[-2] if len(parts) >= 2 else ""
        if not word or word.startswith("_"):
            continue
        split = assign_split(path, val_pct, test_pct)
        if word in WORDS:
            targets[split].append(DatasetEntry(path, word, split))
        else:
            unknowns[split].append(path)

    entries = []
    for split_no, split in enumerate(SPLITS):
        n_target = len(targets[split])
        entries.extend(targets[split])
        n_unknown = min(int(math.ceil(n_target * unknown_pct / 100.0)), len(unknowns[split]))
        if n_unknown:
            rng = np.random.default_rng([rng_seed, split_no])
            picks = np.sort(rng.permutation(len(unknowns[split]))[:n_unknown])
            entries.extend(DatasetEntry(unknowns[split][i], UNKNOWN, split) for i in picks)
        n_silence = int(math.ceil(n_target * silence_pct / 100.0))
        entries.extend(DatasetEntry(_silence_path(split, i), SILENCE, split) for i in range(n_silence))
    return entries


def build_dataset_index(
    root,
    val_pct: float = 10.0,
    test_pct: float = 10.0,
    unknown_pct: float = 10.0,
    silence_pct: float = 10.0,
    rng_seed: int = 0,
) -> list[DatasetEntry]:
    """Index a Speech Commands directory into train/validation/test entries.

    Target words keep their label. Non-target words are sampled as
    ``unknown`` and synthetic ``silence`` entries are appended, each sized as
    a percentage of the split's target-word count.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetIndexError(f"data root not found: {root}")
    if not (root / BACKGROUND_DIR).is_dir():
        raise DatasetIndexError(f"missing {BACKGROUND_DIR} directory under {root}")
    return index_from_paths(
        scan_utterances(root), val_pct, test_pct, unknown_pct, silence_pct, rng_seed
    )


def write_index_csv(entries, out) -> None:
    """Write ``path,label,split`` rows to a path or text stream."""
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8", newline="") as fh:
            write_index_csv(entries, fh)
        return
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["path", "label", "split"])
    for e in entries:
        writer.writerow([e.path, e.label, e.split])


def read_index_csv(path) -> list[DatasetEntry]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "split"]:
            raise DatasetIndexError(f"{path}: expected header path,label,split")
        out = []
        for row in reader:
            if row["label"] not in LABEL_INDEX or row["split"] not in SPLITS:
                raise DatasetIndexError(f"{path}: bad row {row}")
            out.append(DatasetEntry(row["path"], row["label"], row["split"]))
    return out


# ---------------------------------------------------------------------------
# Waveform transforms


def pad_or_trim(clip: AudioClip, target_len: int = CLIP_SAMPLES) -> AudioClip:
    if target_len <= 0:
        raise ValueError("target_len must be positive")
    x = clip.samples
    if len(x) >= target_len:
        return AudioClip(x[:target_len].copy(), clip.sample_rate)
    out = np.zeros(target_len)
    out[: len(x)] = x
    return AudioClip(out, clip.sample_rate)


def time_shift(clip: AudioClip, shift_s: float, sample_rate: int | None = None) -> AudioClip:
    """Shift by ``round(shift_s * rate)`` samples; positive shifts delay the signal."""
    rate = sample_rate or clip.sample_rate
    n = len(clip.samples)
    k = int(round(shift_s * rate))
    if abs(k) > n:
        raise ValueError("shift exceeds clip duration")
    out = np.zeros(n)
    if k >= 0:
        out[k:] = clip.samples[: n - k]
    else:
        out[: n + k] = clip.samples[-k:]
    return AudioClip(out, clip.sample_rate)


def mix_background(clip: AudioClip, noise: AudioClip, coeff: float, crop_offset: int = 0) -> AudioClip:
    n = len(clip.samples)
    if crop_offset < 0 or len(noise.samples) < crop_offset + n:
        raise ValueError(
            f"noise too short: need {crop_offset + n} samples, have {len(noise.samples)}"
        )
    seg = noise.samples[crop_offset : crop_offset + n]
    return AudioClip(np.clip(clip.samples + coeff * seg, -1.0, 1.0), clip.sample_rate)


def make_silence(
    noise_files,
    coeff: float,
    rng: np.random.Generator,
    crop_offset: int | None = None,
    length: int = CLIP_SAMPLES,
) -> AudioClip:
    """A ``length``-sample crop of a randomly chosen noise file, scaled by ``coeff``.

    When ``crop_offset`` is None the offset is drawn from ``rng`` as well.
    """
    if not noise_files:
        raise ValueError("make_silence needs at least one noise file")
    noise = noise_files[int(rng.integers(len(noise_files)))]
    if len(noise.samples) < length:
        noise = pad_or_trim(noise, length)
    if crop_offset is None:
        crop_offset = int(rng.integers(len(noise.samples) - length + 1))
    zeros = AudioClip(np.zeros(length), noise.sample_rate)
    return mix_background(zeros, noise, coeff, crop_offset)


def augment_clip(
    clip: AudioClip, config: AugmentConfig, rng: np.random.Generator, noise_files=()
) -> AudioClip:
    """Random time shift followed by (probabilistic) background-noise blending."""
    shift = rng.uniform(-config.shift_range_s, config.shift_range_s) if config.shift_range_s else 0.0
    out = time_shift(clip, shift) if shift else clip
    if noise_files and config.noise_prob > 0 and rng.random() < config.noise_prob:
        noise = noise_files[int(rng.integers(len(noise_files)))]
        n = len(out.samples)
        if len(noise.samples) < n:
            noise = pad_or_trim(noise, n)
        offset = int(rng.integers(len(noise.samples) - n + 1))
        coeff = rng.uniform(0.0, config.noise_coeff_max)
        out = mix_background(out, noise, coeff, offset)
    return out


def stable_seed(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


@dataclass
class ClipStore:
    """Loads waveforms for index entries, caching decoded PCM in memory.

    Silence entries are synthesized from the background-noise recordings.
    Outside training, each silence clip is a deterministic function of its
    path; during training it is drawn from the caller's generator.
    """

    root: Path
    cache: bool = True
    noise_coeff_max: float = 0.1
    _pcm: dict = field(default_factory=dict, repr=False)
    _noise: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def noise_clips(self) -> list[AudioClip]:
        if self._noise is None:
            noise_dir = self.root / BACKGROUND_DIR
            if not noise_dir.is_dir():
                raise DatasetIndexError(f"missing {BACKGROUND_DIR} directory under {self.root}")
            self._noise = [read_wav(p) for p in sorted(noise_dir.glob("*.wav"))]
        return self._noise

    def _read(self, path: str) -> AudioClip:
        pcm = self._pcm.get(path)
        if pcm is None:
            clip = read_wav(self.root / path)
            if self.cache:
                self._pcm[path] = np.round(clip.samples * 32768).astype(np.int16)
            return clip
        return AudioClip(pcm.astype(np.float64) / 32768.0)

    def waveform(
        self,
        entry: DatasetEntry,
        rng: np.random.Generator | None = None,
        augment: AugmentConfig | None = None,
    ) -> np.ndarray:
        """1 s float64 waveform for ``entry``, augmented when ``augment`` is given."""
        if entry.label == SILENCE and entry.path.startswith(SILENCE_DIR):
            gen = rng if rng is not None else np.random.default_rng(stable_seed(entry.path))
            coeff_max = augment.noise_coeff_max if augment is not None else self.noise_coeff_max
            coeff = gen.uniform(0.0, coeff_max)
            return make_silence(self.noise_clips, coeff, gen).samples
        clip = pad_or_trim(self._read(entry.path))
        if augment is not None and rng is not None and not augment.is_identity:
            clip = augment_clip(clip, augment, rng, self.noise_clips)
        return clip.samples
