"""Manifests (``path,label,speaker`` CSV) and turning them into padded datasets."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import FeatureConfig, FeatureMatrix, load_features, mfcc, pad_or_truncate, read_audio
from .train import Dataset


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    path: Path
    label: str
    speaker: str = ""
    line: int = 0


@dataclass
class Manifest:
    rows: list = field(default_factory=list)
    source: Path | None = None

    @property
    def vocab(self) -> list:
        return sorted({r.label for r in self.rows})

    def __len__(self):
        return len(self.rows)


def read_manifest(path, check_paths: bool = True) -> Manifest:
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Manifest([], path)
        header = [h.strip() for h in header]
        if header[:2] != ["path", "label"] or len(header) > 3 or (len(header) == 3 and header[2] != "speaker"):
            raise ManifestError(f"{path}:1: header must be 'path,label[,speaker]', got {','.join(header)!r}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < 2 or len(rec) > len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            item, label = rec[0].strip(), rec[1].strip()
            if not label:
                raise ManifestError(f"{path}:{lineno}: empty label")
            full = Path(item) if Path(item).is_absolute() else base / item
            if check_paths and not full.exists():
                raise ManifestError(f"{path}:{lineno}: file not found: {item}")
            speaker = rec[2].strip() if len(rec) > 2 else ""
            rows.append(ManifestRow(full, label, speaker, lineno))
    return Manifest(rows, path)


def write_manifest(path, rows) -> None:
    """Write rows with paths made relative to the manifest's directory where possible."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "speaker"])
        for r in rows:
            p = Path(r.path).resolve()
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([str(p), r.label, r.speaker])


def load_item(row: ManifestRow, cfg: FeatureConfig) -> FeatureMatrix:
    if row.path.suffix.lower() == ".timf":
        return load_features(row.path)
    return mfcc(read_audio(row.path), cfg, source_id=row.path.stem)


def default_input_T(lengths) -> int:
    """95th percentile of frame counts, rounded up."""
    return int(math.ceil(np.percentile(np.asarray(lengths, dtype=float), 95)))


def load_dataset(manifest: Manifest, cfg: FeatureConfig, input_T: int | None = None,
                 vocab: list | None = None) -> tuple[Dataset, int]:
    """Features padded or truncated to ``input_T``; returns the dataset and the T used."""
    vocab = list(vocab) if vocab is not None else manifest.vocab
    index = {lab: i for i, lab in enumerate(vocab)}
    feats = [load_item(r, cfg) for r in manifest.rows]
    if not feats:
        return Dataset(np.zeros((0, input_T or 1, cfg.n_mfcc)), np.zeros(0), vocab), input_T or 1
    T = input_T or default_input_T([f.n_frames for f in feats])
    unknown = sorted({r.label for r in manifest.rows} - set(index))
    if unknown:
        raise ManifestError(f"labels {unknown} are not in the model vocabulary {vocab}")
    X = np.stack([pad_or_truncate(f, T).values for f in feats])
    y = np.array([index[r.label] for r in manifest.rows])
    ids = [r.path.stem for r in manifest.rows]
    return Dataset(X, y, vocab, ids, [r.speaker for r in manifest.rows]), T
