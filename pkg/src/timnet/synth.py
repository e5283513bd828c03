"""Seeded three-class toy corpus: rising sweeps, falling sweeps, amplitude-modulated tones."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .diffcore import RngStream
from .dsp import write_wav

CLASS_NAMES = ("c0_rising", "c1_falling", "c2_modulated")
N_SPEAKERS = 4


def _sweep(t, f_start, f_end):
    duration = t[-1] + (t[1] - t[0])
    rate = (f_end - f_start) / duration
    return np.sin(2 * np.pi * (f_start * t + 0.5 * rate * t * t))


def synth_clip(label: int, gen: np.random.Generator, sample_rate: int = 22050, seconds: float = 1.0) -> np.ndarray:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    low, high = gen.uniform(300, 600), gen.uniform(2000, 3500)
    if label == 0:
        x = _sweep(t, low, high)
    elif label == 1:
        x = _sweep(t, high, low)
    elif label == 2:
        carrier = gen.uniform(800, 1500)
        mod = gen.uniform(3, 6)
        x = np.sin(2 * np.pi * carrier * t) * (1 + 0.8 * np.sin(2 * np.pi * mod * t)) / 1.8
    else:
        raise ValueError(f"no synthetic class {label}")
    return 0.5 * x + 0.01 * gen.standard_normal(t.size)


def write_corpus(out_dir, n_per_class: int, seed: int = 0, sample_rate: int = 22050) -> Path:
    """Write WAV files plus ``manifest.csv``; returns the manifest path."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = RngStream(seed).split("synth")
    rows = []
    for label, name in enumerate(CLASS_NAMES):
        stream = root.split(label)
        for i in range(n_per_class):
            clip = synth_clip(label, stream.generator(), sample_rate)
            fname = f"{name}_{i:03d}.wav"
            write_wav(out / fname, clip, sample_rate)
            rows.append((fname, name, f"spk{i % N_SPEAKERS}"))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "speaker"])
        w.writerows(rows)
    return manifest
