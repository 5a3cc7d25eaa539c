"""Anomaly scoring and exact AUC / partial-AUC evaluation.

AUC is the pairwise fraction of (normal, anomaly) score pairs where the
anomaly scores strictly higher (ties count 0); pAUC restricts the normal
side to the top floor(p*N-) scorers, i.e. the low-false-positive-rate
region. The rank-based implementations here are exact, not trapezoidal
approximations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EvaluationError
from .frontend import NormStats, Spectrogram, apply_norm, stack_frames
from .models import ModelGraph, segment_spectrogram

LABELS = ("normal", "anomaly", "unknown")

# Baseline rows of the reference result tables (reported values, never
# recomputed here).
PAPER_BASELINE_AUC = {
    "ToyCar": 78.77, "ToyConveyor": 72.53, "fan": 65.83,
    "pump": 72.89, "slider": 84.76, "valve": 66.28,
}
PAPER_BASELINE_PAUC = {
    "ToyCar": 67.58, "ToyConveyor": 60.43, "fan": 52.45,
    "pump": 59.99, "slider": 66.53, "valve": 50.98,
}
_CANONICAL_TYPE_ORDER = ("ToyCar", "ToyConveyor", "fan", "pump", "slider", "valve")


# ---------------------------------------------------------------------------
# score records
# ---------------------------------------------------------------------------

@dataclass
class ScoreRecord:
    clip_id: str
    machine_type: str
    machine_id: str
    label: str
    anomaly_score: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise EvaluationError(
                f"{self.clip_id}: label must be one of {LABELS}, got {self.label!r}"
            )
        if not np.isfinite(self.anomaly_score):
            raise EvaluationError(
                f"{self.clip_id}: anomaly score must be finite, got {self.anomaly_score}"
            )


@dataclass
class EvaluationSet:
    """Normal and anomalous score lists entering the pairwise metrics."""

    normal_scores: np.ndarray
    anomaly_scores: np.ndarray
    p: float = 0.1

    def __post_init__(self):
        self.normal_scores = np.asarray(self.normal_scores, dtype=np.float64)
        self.anomaly_scores = np.asarray(self.anomaly_scores, dtype=np.float64)
        if self.normal_scores.size < 1 or self.anomaly_scores.size < 1:
            raise EvaluationError(
                f"need at least one normal and one anomaly score, got "
                f"{self.normal_scores.size} / {self.anomaly_scores.size}"
            )
        if not 0.0 < self.p <= 1.0:
            raise EvaluationError(f"p must be in (0,1], got {self.p}")
        if int(np.floor(self.p * self.normal_scores.size)) < 1:
            raise EvaluationError(
                f"floor(p*N-) = 0 for p={self.p}, N-={self.normal_scores.size}; "
                f"need more normal samples or a larger p"
            )


def auc(eval_set: EvaluationSet) -> float:
    """Exact pairwise AUC: mean over all pairs of 1[anomaly > normal]."""
    sorted_norm = np.sort(eval_set.normal_scores)
    wins = np.searchsorted(sorted_norm, eval_set.anomaly_scores, side="left").sum()
    return float(wins) / (sorted_norm.size * eval_set.anomaly_scores.size)


def pauc(eval_set: EvaluationSet) -> float:
    """Partial AUC over the top floor(p*N-) normal scorers.

    Normals are sorted by score descending; only the hardest (highest
    scoring) floor(p*N-) of them enter the pairwise sum.
    """
    k = int(np.floor(eval_set.p * eval_set.normal_scores.size))
    top_normals = np.sort(np.sort(eval_set.normal_scores)[::-1][:k])
    wins = np.searchsorted(top_normals, eval_set.anomaly_scores, side="left").sum()
    return float(wins) / (k * eval_set.anomaly_scores.size)


def roc_points(eval_set: EvaluationSet) -> list[tuple[float, float]]:
    """(fpr, tpr) at every distinct threshold, strict-> decision rule."""
    thresholds = np.unique(
        np.concatenate([eval_set.normal_scores, eval_set.anomaly_scores])
    )[::-1]
    n_neg = eval_set.normal_scores.size
    n_pos = eval_set.anomaly_scores.size
    points = []
    for thr in thresholds:
        fpr = float((eval_set.normal_scores > thr).sum()) / n_neg
        tpr = float((eval_set.anomaly_scores > thr).sum()) / n_pos
        points.append((fpr, tpr))
    return points


# ---------------------------------------------------------------------------
# clip scoring
# ---------------------------------------------------------------------------

def anomaly_score(model: ModelGraph, clip_spec: Spectrogram,
                  stats: NormStats) -> float:
    """Reconstruction-error anomaly score for one clip.

    Normalizes, cuts the clip into the model's fixed-size inputs, runs the
    reconstruction in inference mode and returns the mean over inputs of
    the per-input MSE. A classification head, if present, is ignored.
    """
    model_tag = model.metadata.get("frontend_tag")
    if model_tag is not None and model_tag != clip_spec.frontend_tag:
        raise ConfigError(
            f"model expects {model_tag} features, clip is {clip_spec.frontend_tag}"
        )
    if stats.frontend_tag != clip_spec.frontend_tag:
        raise ConfigError(
            f"norm stats are {stats.frontend_tag}, clip is {clip_spec.frontend_tag}"
        )
    normalized = apply_norm(clip_spec, stats)
    dtype = model.parameters()[0].value.dtype
    if model.family == "baseline-dense":
        x = stack_frames(normalized.values).astype(dtype)
    else:
        cfg = model.metadata["config"]
        segs = segment_spectrogram(
            normalized, cfg["frames_per_segment"],
            int(model.metadata.get("hop_frames", 32)),
        )
        x = np.stack(segs)[:, None, :, :].astype(dtype)
    recon, _ = model.forward(x, train=False)
    per_input = ((recon - x) ** 2).mean(axis=tuple(range(1, x.ndim)))
    return float(per_input.mean())


# ---------------------------------------------------------------------------
# corpus evaluation and tables
# ---------------------------------------------------------------------------

@dataclass
class TypeMetrics:
    auc: float
    pauc: float
    n_normal: int
    n_anomaly: int


@dataclass
class CorpusEvaluation:
    per_type: dict[str, TypeMetrics | None]
    warnings: list[str] = field(default_factory=list)
    p: float = 0.1


def evaluate_corpus(records, p: float = 0.1) -> CorpusEvaluation:
    """AUC and pAUC per machine type.

    Records labeled ``unknown`` are excluded. A machine type missing one
    of the classes gets an absent cell (None) plus a warning, never a
    fabricated zero; floor(p*N-) == 0 for a present type is an error
    naming that type.
    """
    by_type: dict[str, tuple[list[float], list[float]]] = {}
    for r in records:
        if r.label == "unknown":
            continue
        normals, anomalies = by_type.setdefault(r.machine_type, ([], []))
        (normals if r.label == "normal" else anomalies).append(r.anomaly_score)
    if not by_type:
        raise EvaluationError("no labeled records to evaluate")
    result = CorpusEvaluation(per_type={}, p=p)
    for mtype in sorted(by_type):
        normals, anomalies = by_type[mtype]
        if not normals or not anomalies:
            missing = "normal" if not normals else "anomaly"
            result.warnings.append(
                f"{mtype}: no {missing} records; cell reported as absent"
            )
            result.per_type[mtype] = None
            continue
        if int(np.floor(p * len(normals))) < 1:
            raise EvaluationError(
                f"machine type {mtype!r}: floor(p*N-) = 0 with p={p}, "
                f"N-={len(normals)}; need more normal samples or a larger p"
            )
        es = EvaluationSet(np.array(normals), np.array(anomalies), p=p)
        result.per_type[mtype] = TypeMetrics(
            auc=auc(es), pauc=pauc(es),
            n_normal=len(normals), n_anomaly=len(anomalies),
        )
    return result


def _type_columns(types) -> list[str]:
    types = set(types)
    if types <= set(_CANONICAL_TYPE_ORDER):
        return [t for t in _CANONICAL_TYPE_ORDER if t in types]
    return sorted(types)


def format_result_table(rows: dict[str, dict[str, float | None]]) -> str:
    """CSV table: one row per framework, one column per machine type,
    percent values with 2 decimals; absent cells stay empty."""
    columns = _type_columns({t for row in rows.values() for t in row})
    lines = ["framework," + ",".join(columns)]
    for name, row in rows.items():
        cells = []
        for t in columns:
            v = row.get(t)
            cells.append("" if v is None else f"{v:.2f}")
        lines.append(name + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def result_rows(name: str, evaluation: CorpusEvaluation
                ) -> tuple[dict[str, dict], dict[str, dict]]:
    """(auc_rows, pauc_rows) for one evaluated run, in percent."""
    auc_row = {}
    pauc_row = {}
    for mtype, m in evaluation.per_type.items():
        auc_row[mtype] = None if m is None else 100.0 * m.auc
        pauc_row[mtype] = None if m is None else 100.0 * m.pauc
    return {name: auc_row}, {name: pauc_row}


# ---------------------------------------------------------------------------
# scores CSV
# ---------------------------------------------------------------------------

SCORES_HEADER = ["clip_id", "machine_type", "machine_id", "label", "anomaly_score"]


def write_scores_csv(path: str | Path, records, lineage: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        for key in sorted(lineage or {}):
            fh.write(f"# {key}: {lineage[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        for r in records:
            writer.writerow([r.clip_id, r.machine_type, r.machine_id, r.label,
                             repr(r.anomaly_score)])
    tmp.replace(path)


def read_scores_csv(path: str | Path) -> tuple[list[ScoreRecord], dict]:
    lineage: dict[str, str] = {}
    records = []
    with open(path, newline="") as fh:
        rows = []
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                lineage[key.strip()] = value.strip()
            else:
                rows.append(line)
        reader = csv.reader(rows)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise EvaluationError(
                f"{path}: expected header {','.join(SCORES_HEADER)}"
            )
        for row in reader:
            if not row:
                continue
            records.append(ScoreRecord(
                clip_id=row[0], machine_type=row[1], machine_id=row[2],
                label=row[3], anomaly_score=float(row[4]),
            ))
    return records, lineage
