"""Dataset manifests: CSV ingestion with itemized validation, and a
generator for the DCASE-style directory convention.

Manifest columns: path,machine_type,machine_id,split,label. Train-split
entries must be normal (normal-only training); duplicates and missing
files are rejected with line numbers.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import IngestError

MANIFEST_HEADER = ["path", "machine_type", "machine_id", "split", "label"]
SPLITS = ("train", "test")
LABELS = ("normal", "anomaly", "unknown")


@dataclass
class ManifestEntry:
    path: Path
    machine_type: str
    machine_id: str
    split: str
    label: str


def ingest_manifest(csv_path: str | Path, check_files: bool = True) -> list[ManifestEntry]:
    """Read and validate a manifest; raises IngestError listing every
    offending line."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise IngestError(f"manifest not found: {csv_path}")
    entries: list[ManifestEntry] = []
    errors: list[str] = []
    seen_paths: dict[str, int] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise IngestError(
                f"{csv_path}: expected header {','.join(MANIFEST_HEADER)}, "
                f"got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                errors.append(f"line {lineno}: expected 5 fields, got {len(row)}")
                continue
            raw_path, mtype, mid, split, label = (c.strip() for c in row)
            if split not in SPLITS:
                errors.append(f"line {lineno}: bad split {split!r}")
                continue
            if label not in LABELS:
                errors.append(f"line {lineno}: bad label {label!r}")
                continue
            if split == "train" and label != "normal":
                errors.append(
                    f"line {lineno}: train-split entries must be normal, "
                    f"got {label!r}"
                )
                continue
            if raw_path in seen_paths:
                errors.append(
                    f"line {lineno}: duplicate path {raw_path!r} "
                    f"(first at line {seen_paths[raw_path]})"
                )
                continue
            seen_paths[raw_path] = lineno
            path = Path(raw_path)
            if not path.is_absolute():
                path = csv_path.parent / path
            if check_files and not path.is_file():
                errors.append(f"line {lineno}: file not found: {raw_path}")
                continue
            entries.append(ManifestEntry(path, mtype, mid, split, label))
    if errors:
        raise IngestError(
            f"{csv_path}: {len(errors)} invalid entr{'y' if len(errors) == 1 else 'ies'}:\n"
            + "\n".join("  " + e for e in errors)
        )
    if not entries:
        raise IngestError(f"{csv_path}: no entries")
    return entries


def manifest_hash(csv_path: str | Path) -> str:
    """Content hash of the manifest file, used for artifact lineage."""
    return hashlib.sha256(Path(csv_path).read_bytes()).hexdigest()[:16]


def write_manifest(csv_path: str | Path, entries: list[ManifestEntry]) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow([str(e.path), e.machine_type, e.machine_id,
                             e.split, e.label])


def gen_manifest_dcase(root: str | Path) -> tuple[list[ManifestEntry], list[str]]:
    """Build manifest entries from the DCASE directory convention:
    <root>/<machine_type>/<train|test>/<label>_id_XX_*.wav.

    Returns (entries, warnings); files that do not fit the convention are
    skipped with a warning rather than guessed at.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"not a directory: {root}")
    entries: list[ManifestEntry] = []
    warnings: list[str] = []
    for type_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        mtype = type_dir.name
        for split in SPLITS:
            split_dir = type_dir / split
            if not split_dir.is_dir():
                continue
            for wav in sorted(split_dir.glob("*.wav")):
                parts = wav.stem.split("_")
                label = parts[0] if parts[0] in ("normal", "anomaly") else "unknown"
                if len(parts) >= 3 and parts[1] == "id":
                    mid = f"id_{parts[2]}"
                elif len(parts) >= 2 and parts[0] == "id":
                    mid = f"id_{parts[1]}"
                    label = "unknown"
                else:
                    mid = "id_unknown"
                if split == "train" and label != "normal":
                    warnings.append(
                        f"skipping non-normal file in train split: {wav}"
                    )
                    continue
                entries.append(ManifestEntry(wav, mtype, mid, split, label))
    if not entries:
        raise IngestError(f"{root}: no WAV files matching the DCASE layout")
    return entries, warnings
