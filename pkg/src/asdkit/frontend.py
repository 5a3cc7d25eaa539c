"""Audio frontends: log-gammatone spectrograms and the stacked log-mel
baseline vectorizer, plus per-bin normalization statistics.

The gammatone bank is realized in spectral-weighting form: the Hann/FFT
power spectrogram is multiplied by sampled 4th-order gammatone magnitude
responses (peak-normalized), with center frequencies spaced uniformly on
the ERB-rate scale. The mel bank uses the usual triangular weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import SAMPLE_RATE, Waveform
from .errors import ClipTooShortError, FitError, ParameterError, ShapeError

GAMMATONE_TAG = "gammatone64"
MEL_TAG = "mel128"
_TAG_BINS = {GAMMATONE_TAG: 64, MEL_TAG: 128}

EPS_LOG = 1e-10
STD_FLOOR = 1e-5
CACHE_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

def frame_signal(samples: np.ndarray, window_samples: int, hop_samples: int) -> np.ndarray:
    """Slice a signal into overlapping frames.

    Returns an (n_frames, window_samples) array with frame k starting at
    sample k*hop; trailing samples that do not fill a window are dropped.
    """
    if hop_samples < 1:
        raise ParameterError(f"hop_samples must be >= 1, got {hop_samples}")
    n = samples.shape[0]
    if n < window_samples:
        raise ClipTooShortError(
            f"clip too short: {n} samples < window of {window_samples}"
        )
    return sliding_window_view(samples, window_samples)[::hop_samples]


def n_frames_for(n_samples: int, window_samples: int, hop_samples: int) -> int:
    if n_samples < window_samples:
        return 0
    return 1 + (n_samples - window_samples) // hop_samples


# ---------------------------------------------------------------------------
# filterbanks
# ---------------------------------------------------------------------------

def hz_to_erb_rate(f):
    """Glasberg & Moore (1990) ERB-rate scale."""
    return 21.4 * np.log10(4.37e-3 * np.asarray(f, dtype=np.float64) + 1.0)


def erb_rate_to_hz(e):
    return (np.power(10.0, np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 4.37e-3


def erb_bandwidth(f):
    """Equivalent rectangular bandwidth at center frequency f (Hz)."""
    return 24.7 * (4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


@dataclass
class FilterbankSpec:
    """Spectral-weighting filterbank: weights map FFT power bins to bands."""

    n_filters: int
    f_min: float
    f_max: float
    center_freqs: np.ndarray  # (n_filters,), strictly increasing
    weights: np.ndarray  # (n_filters, n_fft_bins), nonnegative

    def __post_init__(self):
        if not np.all(np.diff(self.center_freqs) > 0):
            raise ParameterError("center frequencies must be strictly increasing")
        if np.any(self.weights.max(axis=1) <= 0):
            raise ParameterError("every filter row needs a strictly positive entry")


def build_gammatone_bank(
    n_filters: int = 64,
    f_min: float = 50.0,
    f_max: float = 8000.0,
    n_fft: int = 1024,
    sample_rate: int = SAMPLE_RATE,
) -> FilterbankSpec:
    """Sampled 4th-order gammatone magnitude responses, unit peak per row.

    Centers are uniform on the ERB-rate scale between f_min and f_max;
    each filter's bandwidth is 1.019 * ERB(fc). The magnitude response of
    the order-4 filter is (1 + ((f - fc)/b)^2)^(-2).
    """
    if n_filters < 1:
        raise ParameterError(f"n_filters must be >= 1, got {n_filters}")
    if not (0.0 < f_min < f_max):
        raise ParameterError(f"need 0 < f_min < f_max, got {f_min}, {f_max}")
    if f_max > sample_rate / 2:
        raise ParameterError(f"f_max {f_max} above Nyquist {sample_rate / 2}")
    if n_filters == 1:
        centers = np.array([f_min], dtype=np.float64)
    else:
        erb_pts = np.linspace(hz_to_erb_rate(f_min), hz_to_erb_rate(f_max), n_filters)
        centers = erb_rate_to_hz(erb_pts)
        centers[0], centers[-1] = f_min, f_max  # pin the round-tripped endpoints
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    bw = 1.019 * erb_bandwidth(centers)
    x = (freqs[None, :] - centers[:, None]) / bw[:, None]
    weights = (1.0 + x * x) ** -2.0
    weights /= weights.max(axis=1, keepdims=True)
    return FilterbankSpec(n_filters, f_min, f_max, centers, weights)


def build_mel_bank(
    n_filters: int = 128,
    f_min: float = 0.0,
    f_max: float = 8000.0,
    n_fft: int = 1024,
    sample_rate: int = SAMPLE_RATE,
) -> FilterbankSpec:
    """Triangular mel filterbank (2595*log10(1 + f/700) scale), unit peak."""
    if f_max > sample_rate / 2:
        raise ParameterError(f"f_max {f_max} above Nyquist {sample_rate / 2}")

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def from_mel(m):
        return 700.0 * (np.power(10.0, np.asarray(m) / 2595.0) - 1.0)

    pts = from_mel(np.linspace(to_mel(f_min), to_mel(f_max), n_filters + 2))
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / np.maximum(ctr - lo, 1e-12)
    down = (hi - freqs[None, :]) / np.maximum(hi - ctr, 1e-12)
    weights = np.clip(np.minimum(up, down), 0.0, None)
    return FilterbankSpec(n_filters, float(pts[1]), float(pts[-2]), ctr[:, 0], weights)


# ---------------------------------------------------------------------------
# spectrograms
# ---------------------------------------------------------------------------

@dataclass
class Spectrogram:
    """F x T time-frequency matrix of (possibly normalized) log energies."""

    values: np.ndarray
    frontend_tag: str

    def __post_init__(self):
        if self.frontend_tag not in _TAG_BINS:
            raise ParameterError(f"unknown frontend_tag {self.frontend_tag!r}")
        if self.values.shape[0] != _TAG_BINS[self.frontend_tag]:
            raise ShapeError(
                f"{self.frontend_tag} expects {_TAG_BINS[self.frontend_tag]} bins, "
                f"got {self.values.shape[0]}"
            )

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _hann(window: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)


def power_spectra(samples: np.ndarray, window: int, hop: int, n_fft: int) -> np.ndarray:
    """Hann-windowed FFT magnitude-squared per frame: (n_frames, n_fft//2+1)."""
    frames = frame_signal(samples, window, hop)
    spec = np.fft.rfft(frames * _hann(window), n=n_fft, axis=1)
    return np.abs(spec) ** 2


def gammatone_spectrogram(
    wave: Waveform,
    bank: FilterbankSpec | None = None,
    window: int = 640,
    hop: int = 320,
    n_fft: int = 1024,
    eps_log: float = EPS_LOG,
) -> Spectrogram:
    """64 x T log-gammatone spectrogram (40 ms window, 50% overlap)."""
    if bank is None:
        bank = build_gammatone_bank(n_fft=n_fft, sample_rate=wave.sample_rate)
    power = power_spectra(wave.samples, window, hop, n_fft)
    energies = power @ bank.weights.T  # (T, n_filters), nonnegative
    return Spectrogram(np.log(energies + eps_log).T, GAMMATONE_TAG)


def mel_spectrogram(
    wave: Waveform,
    bank: FilterbankSpec | None = None,
    window: int = 1024,
    hop: int = 512,
    n_fft: int = 1024,
    eps_log: float = EPS_LOG,
) -> Spectrogram:
    """128 x T log-mel spectrogram (64 ms window, 50% overlap)."""
    if bank is None:
        bank = build_mel_bank(n_fft=n_fft, sample_rate=wave.sample_rate)
    power = power_spectra(wave.samples, window, hop, n_fft)
    energies = power @ bank.weights.T
    return Spectrogram(np.log(energies + eps_log).T, MEL_TAG)


# ---------------------------------------------------------------------------
# per-bin normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-frequency-bin mean/std fitted on a training corpus."""

    mean: np.ndarray
    std: np.ndarray
    n_frames_fitted: int
    frontend_tag: str


def fit_norm_stats(
    spectrograms, std_floor: float = STD_FLOOR
) -> NormStats:
    """Fit per-bin mean/std across all frames of all inputs.

    Two-pass (sum, sum-of-squares) reduction; std is clamped below at
    ``std_floor`` so silent bins cannot blow up the division.
    """
    total = 0
    s1 = s2 = None
    tag = None
    for spec in spectrograms:
        if tag is None:
            tag = spec.frontend_tag
            s1 = np.zeros(spec.n_bins)
            s2 = np.zeros(spec.n_bins)
        elif spec.frontend_tag != tag:
            raise FitError(
                f"mixed frontends in norm fit: {tag} vs {spec.frontend_tag}"
            )
        v = spec.values
        s1 += v.sum(axis=1)
        s2 += (v * v).sum(axis=1)
        total += v.shape[1]
    if tag is None:
        raise FitError("cannot fit normalization on an empty collection")
    if total < 2:
        raise FitError(f"need at least 2 frames to fit normalization, got {total}")
    mean = s1 / total
    var = np.maximum(s2 / total - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), std_floor)
    return NormStats(mean=mean, std=std, n_frames_fitted=total, frontend_tag=tag)


def apply_norm(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    """(x - mean) / std per frequency bin."""
    if spec.frontend_tag != stats.frontend_tag:
        raise ShapeError(
            f"frontend mismatch: spectrogram {spec.frontend_tag}, "
            f"stats {stats.frontend_tag}"
        )
    if spec.n_bins != stats.mean.shape[0]:
        raise ShapeError(
            f"bin count mismatch: {spec.n_bins} vs stats {stats.mean.shape[0]}"
        )
    values = (spec.values - stats.mean[:, None]) / stats.std[:, None]
    return Spectrogram(values, spec.frontend_tag)


def save_norm_stats(path: str | Path, stats: NormStats, lineage: dict | None = None) -> None:
    meta = {"format_version": CACHE_FORMAT_VERSION, "frontend_tag": stats.frontend_tag,
            "lineage": lineage or {}}
    _atomic_savez(
        path,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        mean=stats.mean.astype(np.float64),
        std=stats.std.astype(np.float64),
        n_frames_fitted=np.array([stats.n_frames_fitted], dtype=np.float64),
    )


def load_norm_stats(path: str | Path) -> NormStats:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        return NormStats(
            mean=z["mean"],
            std=z["std"],
            n_frames_fitted=int(z["n_frames_fitted"][0]),
            frontend_tag=meta["frontend_tag"],
        )


# ---------------------------------------------------------------------------
# baseline stacked-mel vectorizer
# ---------------------------------------------------------------------------

def stack_frames(values: np.ndarray, context: int = 2) -> np.ndarray:
    """Concatenate each frame with its +/-context neighbors.

    For an F x T input, valid centers are t in [context, T-1-context];
    returns (T - 2*context, (2*context+1)*F) with frames ordered
    t-context ... t+context.
    """
    width = 2 * context + 1
    if values.shape[1] < width:
        raise ClipTooShortError(
            f"need at least {width} frames to stack, got {values.shape[1]}"
        )
    sw = sliding_window_view(values, width, axis=1)  # (F, T-width+1, width)
    return sw.transpose(1, 2, 0).reshape(values.shape[1] - width + 1, width * values.shape[0])


def baseline_mel_vectors(wave: Waveform, bank: FilterbankSpec | None = None) -> np.ndarray:
    """640-dim vectors: 5 concatenated 128-bin log-mel frames per center."""
    spec = mel_spectrogram(wave, bank=bank)
    return stack_frames(spec.values, context=2)


# ---------------------------------------------------------------------------
# frontend configuration + feature cache files
# ---------------------------------------------------------------------------

@dataclass
class FrontendConfig:
    """Everything that determines the clip -> spectrogram mapping."""

    kind: str = GAMMATONE_TAG
    window: int = 640
    hop: int = 320
    n_fft: int = 1024
    n_filters: int = 64
    f_min: float = 50.0
    f_max: float = 8000.0
    eps_log: float = EPS_LOG
    std_floor: float = STD_FLOOR

    @classmethod
    def mel_default(cls) -> "FrontendConfig":
        return cls(kind=MEL_TAG, window=1024, hop=512, n_fft=1024,
                   n_filters=128, f_min=0.0, f_max=8000.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "window": self.window, "hop": self.hop,
            "n_fft": self.n_fft, "n_filters": self.n_filters,
            "f_min": self.f_min, "f_max": self.f_max,
            "eps_log": self.eps_log, "std_floor": self.std_floor,
        }

    def build_bank(self, sample_rate: int = SAMPLE_RATE) -> FilterbankSpec:
        if self.kind == GAMMATONE_TAG:
            return build_gammatone_bank(
                self.n_filters, self.f_min, self.f_max, self.n_fft, sample_rate
            )
        if self.kind == MEL_TAG:
            return build_mel_bank(
                self.n_filters, self.f_min, self.f_max, self.n_fft, sample_rate
            )
        raise ParameterError(f"unknown frontend kind {self.kind!r}")


def extract_spectrogram(
    wave: Waveform, cfg: FrontendConfig, bank: FilterbankSpec | None = None
) -> Spectrogram:
    """Run the configured frontend on one clip (pre-normalization)."""
    if bank is None:
        bank = cfg.build_bank(wave.sample_rate)
    power = power_spectra(wave.samples, cfg.window, cfg.hop, cfg.n_fft)
    energies = power @ bank.weights.T
    tag = GAMMATONE_TAG if cfg.kind == GAMMATONE_TAG else MEL_TAG
    return Spectrogram(np.log(energies + cfg.eps_log).T, tag)


def _atomic_savez(path: str | Path, **arrays) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def save_spectrogram(path: str | Path, spec: Spectrogram) -> None:
    """Cache one clip's features: tag, dims and row-major float32 values."""
    _atomic_savez(
        path,
        format_version=np.array([CACHE_FORMAT_VERSION], dtype=np.uint8),
        frontend_tag=np.frombuffer(spec.frontend_tag.encode(), dtype=np.uint8),
        shape=np.array(spec.values.shape, dtype=np.int64),
        values=np.ascontiguousarray(spec.values, dtype=np.float32),
    )


def load_spectrogram(path: str | Path) -> Spectrogram:
    with np.load(path) as z:
        version = int(z["format_version"][0])
        if version != CACHE_FORMAT_VERSION:
            raise ShapeError(f"{path}: unsupported feature cache version {version}")
        tag = bytes(z["frontend_tag"]).decode()
        values = z["values"].astype(np.float64)
    return Spectrogram(values, tag)
