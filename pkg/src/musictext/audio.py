"""Mono PCM audio clips and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, AudioClip):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float64)


def read_wav(path) -> AudioClip:
    """Read a PCM WAV file; multi-channel audio is downmixed by averaging."""
    sample_rate, data = wavfile.read(str(path))
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples, int(sample_rate))


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), clip.sample_rate, pcm)


def wav_duration(path) -> float:
    """Duration in seconds read from the header only."""
    import wave

    with wave.open(str(path), "rb") as fh:
        return fh.getnframes() / fh.getframerate()


def fit_length(clip: AudioClip, n_samples: int) -> AudioClip:
    """Truncate or zero-pad at the end to exactly ``n_samples``."""
    samples = clip.samples[:n_samples]
    if len(samples) < n_samples:
        samples = np.concatenate([samples, np.zeros(n_samples - len(samples))])
    return AudioClip(samples, clip.sample_rate)


def resolve(path, base: Path | None) -> Path:
    path = Path(path)
    if base is not None and not path.is_absolute():
        return base / path
    return path
