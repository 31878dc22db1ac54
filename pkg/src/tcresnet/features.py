"""MFCC frontend: 30 ms Hann frames every 10 ms, 40 mel bands, orthonormal DCT-II.

A one second 16 kHz clip becomes a 98 x 40 matrix (time x coefficient).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import FeatureError

MFCC_MAGIC = b"MFC1"


@dataclass(frozen=True)
class FeatureConfig:
    window_len_s: float = 0.030
    hop_len_s: float = 0.010
    n_mfcc: int = 40
    n_mels: int = 40
    fft_size: int = 512
    mel_fmin: float = 20.0
    mel_fmax: float = 4000.0
    log_floor: float = 1e-12
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_mfcc > self.n_mels:
            raise FeatureError("n_mfcc must not exceed n_mels")
        if self.fft_size < self.window:
            raise FeatureError("fft_size must be at least the window length")
        if not 0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2:
            raise FeatureError("need 0 <= mel_fmin < mel_fmax <= sample_rate / 2")

    @property
    def window(self) -> int:
        return int(round(self.window_len_s * self.sample_rate))

    @property
    def hop(self) -> int:
        return int(round(self.hop_len_s * self.sample_rate))

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window) // self.hop


DEFAULT_CONFIG = FeatureConfig()


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def hann_window(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples, config: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Split a waveform into overlapping frames without padding.

    Returns an array of shape ``(n_frames, window)``; frame ``i`` starts at
    ``i * hop``.
    """
    x = np.asarray(samples, dtype=np.float64)
    win, hop = config.window, config.hop
    if len(x) < win:
        raise FeatureError(f"clip has {len(x)} samples, fewer than one {win}-sample window")
    n = config.n_frames(len(x))
    view = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    return view[:n].copy()


def power_spectrum(frames, config: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Hann-windowed ``|DFT|^2`` of each frame, bins ``0 .. fft_size/2``.

    Accepts a single frame or a stack of frames along the leading axes.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] > config.fft_size:
        raise FeatureError("frame longer than fft_size")
    spec = np.fft.rfft(frames * hann_window(frames.shape[-1]), n=config.fft_size, axis=-1)
    return spec.real**2 + spec.imag**2


@lru_cache(maxsize=16)
def _filterbank(config: FeatureConfig) -> np.ndarray:
    n_bins = config.fft_size // 2 + 1
    freqs = np.arange(n_bins) * config.sample_rate / config.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(config.mel_fmin), hz_to_mel(config.mel_fmax), config.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if len(empty):
        raise FeatureError(
            f"{config.n_mels} mel filters do not fit between {config.mel_fmin} and "
            f"{config.mel_fmax} Hz at fft_size {config.fft_size} (filter {empty[0]} is empty)"
        )
    fb.setflags(write=False)
    return fb


def mel_filterbank(config: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, fft_size/2 + 1)``.

    Filter ``m`` rises linearly (in Hz) from edge ``m`` to a peak of 1.0 at
    edge ``m+1`` and falls back to zero at edge ``m+2``; the ``n_mels + 2``
    edges are uniform on the mel scale.
    """
    return _filterbank(config).copy()


def mel_centers_hz(config: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.mel_fmin), hz_to_mel(config.mel_fmax), config.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row ``k`` is basis function ``k``."""
    return _dct_matrix(n).copy()


def compute_mfcc(samples, config: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """MFCC matrix of shape ``(t, n_mfcc)`` for one waveform."""
    frames = frame_signal(samples, config)
    mel = power_spectrum(frames, config) @ _filterbank(config).T
    logmel = np.log(mel + config.log_floor)
    return logmel @ _dct_matrix(config.n_mels)[: config.n_mfcc].T


def compute_mfcc_batch(waveforms, config: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Vectorized :func:`compute_mfcc` over equal-length waveforms ``(N, samples)``."""
    x = np.asarray(waveforms, dtype=np.float64)
    if x.shape[-1] < config.window:
        raise FeatureError("clips shorter than one window")
    n = config.n_frames(x.shape[-1])
    frames = np.lib.stride_tricks.sliding_window_view(x, config.window, axis=-1)[:, :: config.hop][:, :n]
    mel = power_spectrum(frames, config) @ _filterbank(config).T
    logmel = np.log(mel + config.log_floor)
    return logmel @ _dct_matrix(config.n_mels)[: config.n_mfcc].T


def write_mfcc(fh, mfcc: np.ndarray) -> None:
    """Serialize as ``MFC1`` + u32 t + u32 f + u32 reserved + float32 LE rows."""
    mfcc = np.asarray(mfcc)
    t, f = mfcc.shape
    fh.write(MFCC_MAGIC + struct.pack("<III", t, f, 0))
    fh.write(np.ascontiguousarray(mfcc, dtype="<f4").tobytes())


def read_mfcc(fh) -> np.ndarray:
    header = fh.read(16)
    if len(header) < 16 or header[:4] != MFCC_MAGIC:
        raise FeatureError("not an MFC1 file")
    t, f, _ = struct.unpack("<III", header[4:])
    payload = fh.read(4 * t * f)
    if len(payload) != 4 * t * f:
        raise FeatureError("truncated MFC1 payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, f).copy()
