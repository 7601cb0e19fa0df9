"""Synthetic corpora that are separable by construction.

Each class owns a contiguous block of Mel bands that carries extra energy;
speakers add a small constant offset, and every segment gets Gaussian noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_features import LogMelSegment, Waveform, write_wav
from .evaluation import DatasetManifest, ManifestEntry, read_manifest, write_manifest
from .model import LabelSet


def band_pattern_corpus(
    n_classes: int = 4,
    n_speakers: int = 4,
    per_class: int = 32,
    f: int = 80,
    d: int = 80,
    boost: float = 2.0,
    noise: float = 1.0,
    n_sessions: int | None = None,
    seed: int = 0,
) -> tuple[DatasetManifest, dict[str, list[LogMelSegment]]]:
    """One single-segment utterance per sample, spread evenly over speakers.

    Speaker ``s`` belongs to session ``s // 2`` unless ``n_sessions`` is given
    (then speakers are assigned round-robin).
    """
    rng = np.random.default_rng(seed)
    labels = LabelSet([f"class{c}" for c in range(n_classes)])
    speaker_offset = rng.normal(0.0, 0.3, size=n_speakers)
    band_edges = np.linspace(0, f, n_classes + 1).astype(int)
    entries, features = [], {}
    for c in range(n_classes):
        for i in range(per_class):
            spk = i % n_speakers
            session = spk % n_sessions if n_sessions else spk // 2
            values = rng.normal(0.0, noise, size=(f, d)) + speaker_offset[spk]
            values[band_edges[c] : band_edges[c + 1]] += boost
            uid = f"c{c}_s{spk}_{i:03d}"
            entries.append(ManifestEntry(uid, f"{uid}.wav", f"spk{spk}", f"ses{session}", c))
            features[uid] = [LogMelSegment(values.astype(np.float32), uid, 0, c)]
    return DatasetManifest(entries, labels), features


def tone_corpus(
    out_dir: str | Path,
    n_classes: int = 4,
    n_speakers: int = 4,
    per_class: int = 4,
    seconds: float = 1.0,
    sample_rate_hz: int = 16000,
    seed: int = 0,
) -> tuple[Path, DatasetManifest]:
    """Write WAV files whose dominant tone frequency depends on the class.

    Audio paths in the manifest are relative to ``out_dir``.  Returns the
    manifest path and the manifest as read back from disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = LabelSet([f"class{c}" for c in range(n_classes)])
    t = np.arange(int(seconds * sample_rate_hz)) / sample_rate_hz
    entries = []
    for c in range(n_classes):
        tone_hz = 300.0 * (c + 1) * 1.7
        for i in range(per_class):
            spk = i % n_speakers
            jitter = 1.0 + 0.02 * (spk - n_speakers / 2)
            samples = 0.5 * np.sin(2 * np.pi * tone_hz * jitter * t) + 0.01 * rng.standard_normal(t.size)
            uid = f"c{c}_s{spk}_{i:03d}"
            write_wav(out_dir / f"{uid}.wav", Waveform(samples, sample_rate_hz))
            entries.append(ManifestEntry(uid, f"{uid}.wav", f"spk{spk}", f"ses{spk // 2}", c))
    path = out_dir / "manifest.csv"
    write_manifest(path, DatasetManifest(entries, labels))
    return path, read_manifest(path, labels)
