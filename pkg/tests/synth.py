"""Synthetic test corpora: stable harmonic tones for normal clips, the same
tones with injected broadband bursts for anomalies."""

from pathlib import Path

import numpy as np

from asdkit.audio import write_wav
from asdkit.manifest import MANIFEST_HEADER

SR = 16000


def tone_clip(rng, duration_s=2.0, f0=220.0, n_harmonics=4, noise_amp=0.01):
    """Stable harmonic tone plus low noise."""
    n = int(duration_s * SR)
    t = np.arange(n) / SR
    sig = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        amp = (0.4 / k) * (1.0 + 0.1 * rng.normal())
        sig += amp * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    sig += noise_amp * rng.normal(size=n)
    return 0.8 * sig / np.max(np.abs(sig))


def burst_clip(rng, duration_s=2.0, f0=220.0, n_bursts=(3, 6)):
    """Same tone family with broadband noise bursts injected."""
    sig = tone_clip(rng, duration_s, f0)
    n = sig.shape[0]
    for _ in range(int(rng.integers(n_bursts[0], n_bursts[1] + 1))):
        width = int(rng.uniform(0.05, 0.15) * SR)
        start = int(rng.integers(0, n - width))
        burst = rng.normal(size=width) * rng.uniform(0.3, 0.5)
        window = np.hanning(width)
        sig[start: start + width] += burst * window
    return np.clip(sig, -1.0, 1.0)


def make_corpus(root: Path, n_train=8, n_test_normal=4, n_test_anomaly=4,
                duration_s=1.0, machine_types=("toy", "widget"), seed=0,
                corrupt_one=False):
    """Write WAVs + manifest under `root`; returns the manifest path."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for t_i, mtype in enumerate(machine_types):
        f0 = 220.0 * (t_i + 1)
        for i in range(n_train):
            name = f"{mtype}_train_{i:03d}.wav"
            write_wav(root / name, tone_clip(rng, duration_s, f0))
            rows.append([name, mtype, "id_00", "train", "normal"])
        for i in range(n_test_normal):
            name = f"{mtype}_test_normal_{i:03d}.wav"
            write_wav(root / name, tone_clip(rng, duration_s, f0))
            rows.append([name, mtype, "id_00", "test", "normal"])
        for i in range(n_test_anomaly):
            name = f"{mtype}_test_anomaly_{i:03d}.wav"
            write_wav(root / name, burst_clip(rng, duration_s, f0))
            rows.append([name, mtype, "id_00", "test", "anomaly"])
    if corrupt_one:
        bad = root / f"{machine_types[0]}_corrupt.wav"
        bad.write_bytes(b"RIFFgarbage-not-actually-a-wav")
        rows.append([bad.name, machine_types[0], "id_00", "train", "normal"])
    manifest_path = root / "manifest.csv"
    lines = [",".join(MANIFEST_HEADER)] + [",".join(r) for r in rows]
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path
