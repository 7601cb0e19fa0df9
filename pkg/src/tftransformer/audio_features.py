"""Log-Mel feature extraction and the on-disk segment cache.

Pipeline per utterance: pre-emphasis, 20 ms Hamming frames with a 10 ms hop,
512-point power spectrum, 80-band Mel filterbank, natural log with an energy
floor, then non-overlapping 80-frame segments.
"""

from __future__ import annotations

import logging
import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 16000
ENERGY_FLOOR = 1e-10

CACHE_MAGIC = b"TFTF"
CACHE_VERSION = 1


class InputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError("waveform must be a non-empty 1-D sample sequence")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise InputError(f"invalid sample rate {self.sample_rate_hz}")

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class StftConfig:
    frame_len_samples: int = 320
    hop_samples: int = 160
    fft_size: int = 512
    preemphasis_coeff: float = 0.97

    def __post_init__(self):
        if not 0 < self.hop_samples <= self.frame_len_samples <= self.fft_size:
            raise ConfigError(f"need 0 < hop <= frame_len <= fft_size, got {self}")
        if not 0.0 <= self.preemphasis_coeff < 1.0:
            raise ConfigError(f"pre-emphasis coefficient must be in [0, 1), got {self.preemphasis_coeff}")


@dataclass(frozen=True)
class FeatureConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    sample_rate_hz: int = SAMPLE_RATE_HZ
    n_mels: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    energy_floor: float = ENERGY_FLOOR
    segment_frames: int = 80
    normalize: bool = False


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, fft_size // 2 + 1)
    sample_rate_hz: int
    fmin_hz: float
    fmax_hz: float
    edges_hz: np.ndarray  # n_mels + 2 triangle corner frequencies

    @property
    def centers_hz(self) -> np.ndarray:
        return self.edges_hz[1:-1]


@dataclass
class LogMelSegment:
    values: np.ndarray  # (bands, frames), float32
    source_utterance_id: str
    segment_index: int
    label: int


def pre_emphasize(w: Waveform | np.ndarray, coeff: float = 0.97) -> np.ndarray:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise InputError("cannot pre-emphasize an empty waveform")
    if not 0.0 <= coeff < 1.0:
        raise ConfigError(f"pre-emphasis coefficient must be in [0, 1), got {coeff}")
    out = x.copy()
    out[1:] = x[1:] - coeff * x[:-1]
    return out


def hamming(n: int) -> np.ndarray:
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))


def frame_count(n_samples: int, frame_len: int, hop: int) -> int:
    return (n_samples - frame_len) // hop + 1


def frame_and_window(w: Waveform | np.ndarray, cfg: StftConfig, window: str = "hamming") -> np.ndarray:
    """Slice into overlapping frames and apply the analysis window.

    ``window="rect"`` skips windowing (test mode).
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    N, hop = cfg.frame_len_samples, cfg.hop_samples
    if x.size < N:
        raise InputError(f"waveform of {x.size} samples is shorter than one {N}-sample frame")
    n_frames = frame_count(x.size, N, hop)
    idx = np.arange(N)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx]
    if window == "hamming":
        frames = frames * hamming(N)
    elif window != "rect":
        raise ConfigError(f"unknown window {window!r}")
    return frames


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    """|DFT|^2 of each zero-padded frame, bins 0..fft_size/2."""
    frames = np.atleast_2d(frames)
    if frames.shape[1] > fft_size:
        raise ConfigError(f"frame length {frames.shape[1]} exceeds FFT size {fft_size}")
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    sample_rate_hz: int = SAMPLE_RATE_HZ,
    fft_size: int = 512,
    n_mels: int = 80,
    fmin_hz: float = 0.0,
    fmax_hz: float | None = None,
) -> MelFilterbank:
    """Triangular filters with centers equally spaced on the Mel scale.

    Filter weights peak at 1 and are evaluated at the exact FFT bin
    frequencies ``k * sample_rate / fft_size``.
    """
    if fmax_hz is None:
        fmax_hz = sample_rate_hz / 2
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    if not 0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2:
        raise ConfigError(f"invalid Mel range [{fmin_hz}, {fmax_hz}] for {sample_rate_hz} Hz audio")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    bins = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"Mel filters {empty.tolist()} cover no FFT bin; use fewer bands or a larger FFT"
        )
    return MelFilterbank(weights, sample_rate_hz, float(fmin_hz), float(fmax_hz), edges)


def log_compress(mel_energies: np.ndarray, floor: float = ENERGY_FLOOR) -> np.ndarray:
    if floor <= 0:
        raise ConfigError("energy floor must be positive")
    return np.log(np.maximum(mel_energies, floor))


def log_mel_spectrogram(
    w: Waveform, cfg: FeatureConfig = FeatureConfig(), fbank: MelFilterbank | None = None
) -> np.ndarray:
    """(n_mels, n_frames) log-Mel matrix of a waveform."""
    if w.sample_rate_hz != cfg.sample_rate_hz:
        raise InputError(f"expected {cfg.sample_rate_hz} Hz audio, got {w.sample_rate_hz} Hz")
    if fbank is None:
        fbank = build_mel_filterbank(
            cfg.sample_rate_hz, cfg.stft.fft_size, cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz
        )
    emphasized = pre_emphasize(w, cfg.stft.preemphasis_coeff)
    frames = frame_and_window(emphasized, cfg.stft)
    power = power_spectrum(frames, cfg.stft.fft_size)
    return log_compress(fbank.weights @ power.T, cfg.energy_floor)


def segment_utterance(
    logmel: np.ndarray,
    seg_len: int = 80,
    utterance_id: str = "",
    label: int = 0,
    normalize: bool = False,
) -> list[LogMelSegment]:
    """Cut (bands, frames) into non-overlapping ``seg_len``-frame segments.

    The incomplete tail is dropped.  Utterances shorter than one segment are
    repeated cyclically to fill exactly one segment.
    """
    logmel = np.asarray(logmel)
    if logmel.ndim != 2 or logmel.shape[1] == 0:
        raise InputError("segment_utterance needs a non-empty (bands, frames) matrix")
    n_frames = logmel.shape[1]
    if n_frames < seg_len:
        chunks = [logmel[:, np.arange(seg_len) % n_frames]]
    else:
        chunks = [logmel[:, i * seg_len : (i + 1) * seg_len] for i in range(n_frames // seg_len)]
    segments = []
    for i, chunk in enumerate(chunks):
        values = chunk.astype(np.float64)
        if normalize:
            values = (values - values.mean()) / (values.std() + 1e-8)
        segments.append(LogMelSegment(values.astype(np.float32), utterance_id, i, label))
    return segments


def extract_segments(
    w: Waveform, utterance_id: str, label: int, cfg: FeatureConfig = FeatureConfig()
) -> list[LogMelSegment]:
    return segment_utterance(
        log_mel_spectrogram(w, cfg), cfg.segment_frames, utterance_id, label, cfg.normalize
    )


# ----------------------------------------------------------------------
# WAV I/O


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read 16-bit PCM audio; multi-channel input is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as f:
            width = f.getsampwidth()
            channels = f.getnchannels()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a readable WAV file ({exc})") from exc
    if width != 2:
        raise InputError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        logger.warning("%s: %d channels averaged to mono", path, channels)
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, rate)


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(pcm.tobytes())


# ----------------------------------------------------------------------
# feature cache


def encode_feature_cache(segments: Sequence[LogMelSegment]) -> bytes:
    parts = [CACHE_MAGIC, struct.pack("<HI", CACHE_VERSION, len(segments))]
    for seg in segments:
        uid = seg.source_utterance_id.encode("utf-8")
        f, d = seg.values.shape
        parts.append(struct.pack("<H", len(uid)) + uid)
        parts.append(struct.pack("<IHHH", seg.segment_index, seg.label, f, d))
        parts.append(np.ascontiguousarray(seg.values, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_feature_cache(buf: bytes) -> list[LogMelSegment]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("feature cache truncated")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != CACHE_MAGIC:
        raise FormatError("not a feature cache (bad magic)")
    version, count = struct.unpack("<HI", take(6))
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported feature cache version {version}")
    segments = []
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            uid = take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("bad utterance id encoding") from exc
        index, label, f, d = struct.unpack("<IHHH", take(10))
        if f == 0 or d == 0:
            raise FormatError(f"invalid segment dims {f}x{d}")
        values = np.frombuffer(take(4 * f * d), dtype="<f4").astype(np.float32).reshape(f, d)
        segments.append(LogMelSegment(values, uid, index, label))
    if pos != len(buf):
        raise FormatError("trailing bytes after last segment")
    return segments


def write_feature_cache(segments: Sequence[LogMelSegment], path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_feature_cache(segments))


def read_feature_cache(path: str | os.PathLike) -> list[LogMelSegment]:
    return decode_feature_cache(Path(path).read_bytes())
