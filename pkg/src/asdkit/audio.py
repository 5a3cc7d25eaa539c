"""WAV ingestion: RIFF, PCM 16-bit, mono, 16 kHz only.

Mismatched files are rejected loudly; resampling and downmixing are out
of scope.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AudioFormatError, ClipTooShortError

SAMPLE_RATE = 16000
WINDOW_SAMPLES = 640  # 40 ms at 16 kHz


@dataclass
class Waveform:
    """Mono audio, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono 16 kHz WAV file.

    Raises AudioFormatError for any format mismatch (stereo files are
    rejected, not downmixed) and ClipTooShortError for clips shorter than
    one 40 ms analysis window.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            framerate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {n_channels} channels")
    if sampwidth != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    if framerate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {framerate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size < WINDOW_SAMPLES:
        raise ClipTooShortError(
            f"{path}: {samples.size} samples < one {WINDOW_SAMPLES}-sample window"
        )
    return Waveform(samples=samples, sample_rate=framerate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono (test/tooling aid)."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
