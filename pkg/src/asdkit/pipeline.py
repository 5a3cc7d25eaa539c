"""Pipeline orchestration: run configuration, the content-addressed
feature cache, and the train / score / evaluate / report stages.

Every artifact is stamped with the resolved config hash and the manifest
hash so stages can refuse mixed-lineage inputs. All cache and output
writes are atomic (write-temp-then-rename).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import evaluation
from .audio import read_wav
from .errors import AsdError, CacheError, ConfigError, IntegrityError
from .frontend import (
    FrontendConfig,
    NormStats,
    Spectrogram,
    apply_norm,
    extract_spectrogram,
    fit_norm_stats,
    load_norm_stats,
    load_spectrogram,
    save_norm_stats,
    save_spectrogram,
    stack_frames,
)
from .manifest import ManifestEntry, ingest_manifest, manifest_hash
from .models import (
    AEConfig,
    BaselineConfig,
    ModelGraph,
    build_baseline_dense,
    build_semisupervised,
    build_unsupervised,
    load_checkpoint,
    segment_spectrogram,
)
from .training import SegmentDataset, TrainConfig, substream_rng, train

ENV_ROOT = "ASDKIT_ROOT"

MODEL_FAMILIES = ("unsupervised", "semisupervised", "baseline-dense")

DEFAULT_CONFIG: dict = {
    "frontend": {
        "kind": "gammatone64",
        "window": 640,
        "hop": 320,
        "n_fft": 1024,
        "n_filters": 64,
        "f_min": 50.0,
        "f_max": 8000.0,
        "eps_log": 1e-10,
        "std_floor": 1e-5,
    },
    "segment": {"frames_per_segment": 64, "hop_frames": 32},
    "model": {
        "family": "unsupervised",
        "encoder_filters": [32, 64, 128],
        "bottleneck_dim": 128,
        "alpha": 1.0,
        "beta": 0.0,
        "dtype": "float32",
    },
    "train": {
        "batch_size": 32,
        "max_epochs": 500,
        "lr_initial": 1e-3,
        "lr_factor": 0.75,
        "lr_patience": 20,
        "stop_patience": 50,
        "val_fraction": 0.10,
        "min_delta": 0.0,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
    },
    "eval": {"p": 0.1},
    "run": {
        "seed": 0,
        "workers": 4,
        "cache_dir": "asdkit_cache",
        "out_dir": "asdkit_out",
    },
}

_MEL_FRONTEND_OVERRIDES = {
    "kind": "mel128", "window": 1024, "hop": 512,
    "n_filters": 128, "f_min": 0.0,
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config section {key!r} in {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> dict:
    """Resolve defaults + optional YAML file + dotted key=value overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        for section in user:
            if section not in cfg:
                raise ConfigError(f"{path}: unknown config section {section!r}")
        cfg = _deep_merge(cfg, user)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value: {item!r}")
        dotted, _, raw = item.partition("=")
        _set_dotted(cfg, dotted.strip(), yaml.safe_load(raw))
    return cfg


class RunConfig:
    """Typed view over the resolved config dict."""

    def __init__(self, cfg: dict):
        self.raw = cfg
        if cfg["model"]["family"] not in MODEL_FAMILIES:
            raise ConfigError(
                f"model.family must be one of {MODEL_FAMILIES}, "
                f"got {cfg['model']['family']!r}"
            )
        alpha, beta = float(cfg["model"]["alpha"]), float(cfg["model"]["beta"])
        if alpha < 0 or beta < 0 or abs(alpha + beta - 1.0) > 1e-9:
            raise ConfigError(
                f"model.alpha + model.beta must equal 1 with both nonnegative, "
                f"got ({alpha}, {beta})"
            )
        self.frontend = FrontendConfig(**cfg["frontend"])
        if cfg["model"]["family"] == "baseline-dense" and self.frontend.kind != "mel128":
            raise ConfigError(
                "baseline-dense needs the mel128 frontend; set frontend.kind=mel128 "
                "(e.g. --set frontend.kind=mel128) or use --frontend mel"
            )

    @property
    def family(self) -> str:
        return self.raw["model"]["family"]

    @property
    def seed(self) -> int:
        return int(self.raw["run"]["seed"])

    @property
    def workers(self) -> int:
        return max(1, int(self.raw["run"]["workers"]))

    @property
    def eval_p(self) -> float:
        return float(self.raw["eval"]["p"])

    def _root(self) -> Path:
        return Path(os.environ.get(ENV_ROOT, "."))

    @property
    def cache_dir(self) -> Path:
        p = Path(self.raw["run"]["cache_dir"])
        return p if p.is_absolute() else self._root() / p

    @property
    def out_dir(self) -> Path:
        p = Path(self.raw["run"]["out_dir"])
        return p if p.is_absolute() else self._root() / p

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def frontend_hash(self) -> str:
        blob = json.dumps(self.frontend.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def loss_weights(self) -> tuple[float, float]:
        return (float(self.raw["model"]["alpha"]), float(self.raw["model"]["beta"]))

    def ae_config(self, n_classes: int | None = None) -> AEConfig:
        m = self.raw["model"]
        return AEConfig(
            n_bins=self.frontend.n_filters,
            frames_per_segment=int(self.raw["segment"]["frames_per_segment"]),
            encoder_filters=tuple(m["encoder_filters"]),
            bottleneck_dim=int(m["bottleneck_dim"]),
            n_classes=n_classes,
            loss_weights=self.loss_weights(),
            dtype=m["dtype"],
        )

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(dtype=self.raw["model"]["dtype"])

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            batch_size=int(t["batch_size"]), max_epochs=int(t["max_epochs"]),
            lr_initial=float(t["lr_initial"]), lr_factor=float(t["lr_factor"]),
            lr_patience=int(t["lr_patience"]), stop_patience=int(t["stop_patience"]),
            val_fraction=float(t["val_fraction"]),
            loss_weights=self.loss_weights(),
            seed=self.seed, adam_beta1=float(t["adam_beta1"]),
            adam_beta2=float(t["adam_beta2"]), adam_eps=float(t["adam_eps"]),
            min_delta=float(t["min_delta"]),
        )

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def apply_mel_frontend(cfg: dict) -> dict:
    """Switch the frontend section to the 128-filter mel defaults."""
    out = copy.deepcopy(cfg)
    out["frontend"].update(_MEL_FRONTEND_OVERRIDES)
    return out


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------

@dataclass
class ExtractReport:
    n_hits: int = 0
    n_computed: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _clip_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:32]


def feature_cache_dir(run: RunConfig) -> Path:
    return run.cache_dir / "features" / run.frontend_hash


def feature_path(run: RunConfig, entry: ManifestEntry) -> Path:
    return feature_cache_dir(run) / f"{_clip_hash(entry.path)}.npz"


def extract_features(entries: list[ManifestEntry], run: RunConfig,
                     verbose: bool = True) -> ExtractReport:
    """Extract one cached spectrogram per clip, keyed by clip content and
    frontend config; cache hits touch nothing. Per-file failures are
    collected, not fatal."""
    cache = feature_cache_dir(run)
    cache.mkdir(parents=True, exist_ok=True)
    bank = run.frontend.build_bank()
    report = ExtractReport()

    def work(entry: ManifestEntry):
        try:
            target = feature_path(run, entry)
            if target.exists():
                return ("hit", None)
            wave = read_wav(entry.path)
            spec = extract_spectrogram(wave, run.frontend, bank)
            save_spectrogram(target, spec)
            return ("computed", None)
        except AsdError as exc:
            return ("failed", f"{entry.path}: {exc}")

    with ThreadPoolExecutor(max_workers=run.workers) as pool:
        for status, detail in pool.map(work, entries):
            if status == "hit":
                report.n_hits += 1
            elif status == "computed":
                report.n_computed += 1
            else:
                report.failures.append((detail.split(":")[0], detail))
    if verbose:
        print(f"features: {report.n_hits} cached, {report.n_computed} computed, "
              f"{len(report.failures)} failed")
        for _, detail in report.failures:
            print(f"  FAILED {detail}")
    return report


def _load_cached(run: RunConfig, entry: ManifestEntry) -> Spectrogram:
    path = feature_path(run, entry)
    if not path.exists():
        raise CacheError(
            f"no cached features for {entry.path}; run `asdkit extract-features` first"
        )
    return load_spectrogram(path)


def norm_stats_path(run: RunConfig, mhash: str) -> Path:
    return run.cache_dir / "norm" / f"{run.frontend_hash}_{mhash}.npz"


def fit_norm(entries: list[ManifestEntry], run: RunConfig, mhash: str) -> Path:
    """Fit per-bin normalization on train-split features only and persist."""
    train_entries = [e for e in entries if e.split == "train"]
    if not train_entries:
        raise CacheError("manifest has no train-split entries to fit normalization on")
    stats = fit_norm_stats(
        (_load_cached(run, e) for e in train_entries),
        std_floor=run.frontend.std_floor,
    )
    path = norm_stats_path(run, mhash)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_norm_stats(path, stats, lineage={
        "frontend_hash": run.frontend_hash, "manifest_hash": mhash,
        "run_config_hash": run.config_hash,
    })
    return path


def _require_norm_stats(run: RunConfig, mhash: str) -> tuple[NormStats, Path]:
    path = norm_stats_path(run, mhash)
    if not path.exists():
        raise CacheError(
            f"normalization stats missing ({path}); run `asdkit fit-norm` first"
        )
    return load_norm_stats(path), path


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _model_inputs(run: RunConfig, spec: Spectrogram, stats: NormStats,
                  dtype) -> np.ndarray:
    normalized = apply_norm(spec, stats)
    if run.family == "baseline-dense":
        return stack_frames(normalized.values).astype(dtype)
    segs = segment_spectrogram(
        normalized,
        int(run.raw["segment"]["frames_per_segment"]),
        int(run.raw["segment"]["hop_frames"]),
    )
    return np.stack(segs)[:, None, :, :].astype(dtype)


def build_dataset(entries: list[ManifestEntry], run: RunConfig,
                  stats: NormStats, class_names: list[str] | None) -> SegmentDataset:
    dtype = np.float64 if run.raw["model"]["dtype"] == "float64" else np.float32
    chunks, clip_ids, types, labels = [], [], [], []
    for entry in entries:
        spec = _load_cached(run, entry)
        x = _model_inputs(run, spec, stats, dtype)
        chunks.append(x)
        clip_ids.extend([str(entry.path)] * len(x))
        types.extend([entry.machine_type] * len(x))
        if class_names is not None:
            labels.extend([class_names.index(entry.machine_type)] * len(x))
    return SegmentDataset(
        inputs=np.concatenate(chunks, axis=0),
        clip_ids=clip_ids,
        machine_types=types,
        label_indices=np.array(labels) if class_names is not None else None,
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_train(run: RunConfig, manifest_path: str | Path,
              run_name: str | None = None, verbose: bool = True) -> Path:
    """Build the configured model family, train it on the manifest's train
    split and write the checkpoint directory."""
    entries = ingest_manifest(manifest_path)
    mhash = manifest_hash(manifest_path)
    stats, stats_path = _require_norm_stats(run, mhash)
    train_entries = [e for e in entries if e.split == "train"]

    class_names = None
    if run.family == "semisupervised":
        class_names = sorted({e.machine_type for e in train_entries})
        if len(class_names) < 2:
            raise ConfigError(
                f"semi-supervised training needs >= 2 machine types, "
                f"got {class_names}"
            )
    dataset = build_dataset(train_entries, run, stats, class_names)

    metadata = {
        "frontend_tag": run.frontend.kind,
        "frontend_hash": run.frontend_hash,
        "run_config_hash": run.config_hash,
        "manifest_hash": mhash,
        "norm_stats_ref": str(stats_path),
        "hop_frames": int(run.raw["segment"]["hop_frames"]),
    }
    if class_names is not None:
        metadata["class_names"] = class_names

    init_rng = substream_rng(run.seed, "init")
    if run.family == "unsupervised":
        model = build_unsupervised(run.ae_config(), init_rng, metadata=metadata)
    elif run.family == "semisupervised":
        model = build_semisupervised(
            run.ae_config(n_classes=len(class_names)), init_rng, metadata=metadata)
    else:
        model = build_baseline_dense(run.baseline_config(), init_rng,
                                     metadata=metadata)

    ckpt_dir = run.out_dir / (run_name or run.family)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (ckpt_dir / "config.yaml").write_text(run.dump_yaml())
    train(model, dataset, run.train_config(), checkpoint_dir=ckpt_dir,
          verbose=verbose)
    return ckpt_dir


def score_entries(model: ModelGraph, entries: list[ManifestEntry],
                  run: RunConfig, stats: NormStats, workers: int = 1
                  ) -> list[evaluation.ScoreRecord]:
    def work(entry: ManifestEntry) -> evaluation.ScoreRecord:
        spec = _load_cached(run, entry)
        score = evaluation.anomaly_score(model, spec, stats)
        return evaluation.ScoreRecord(
            clip_id=str(entry.path), machine_type=entry.machine_type,
            machine_id=entry.machine_id, label=entry.label, anomaly_score=score,
        )

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, entries))


def cmd_score(run: RunConfig, manifest_path: str | Path,
              checkpoint: str | Path, out_csv: str | Path | None = None) -> Path:
    """Score every test-split clip with a trained checkpoint."""
    entries = ingest_manifest(manifest_path)
    mhash = manifest_hash(manifest_path)
    checkpoint = Path(checkpoint)
    if checkpoint.is_dir():
        checkpoint = checkpoint / "best.npz"
    model = load_checkpoint(checkpoint)
    ckpt_fh = model.metadata.get("frontend_hash")
    if ckpt_fh is not None and ckpt_fh != run.frontend_hash:
        raise IntegrityError(
            f"checkpoint was trained with frontend {ckpt_fh}, current config is "
            f"{run.frontend_hash}; refusing to score with mismatched normalization"
        )
    stats_ref = model.metadata.get("norm_stats_ref")
    if stats_ref and Path(stats_ref).exists():
        stats = load_norm_stats(stats_ref)
    else:
        stats, _ = _require_norm_stats(run, mhash)
    test_entries = [e for e in entries if e.split == "test"]
    if not test_entries:
        raise CacheError("manifest has no test-split entries to score")
    records = score_entries(model, test_entries, run, stats, workers=run.workers)
    if out_csv is None:
        out_csv = run.out_dir / "scores.csv"
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_scores_csv(out_csv, records, lineage={
        "run_config_hash": run.config_hash,
        "manifest_hash": mhash,
        "frontend_hash": run.frontend_hash,
        "checkpoint": checkpoint.name,
        "model_family": model.family,
    })
    return out_csv


def _print_tables(auc_rows: dict, pauc_rows: dict) -> None:
    for title, rows in (("AUC (%)", auc_rows), ("pAUC (%)", pauc_rows)):
        print(title)
        for line in evaluation.format_result_table(rows).strip().splitlines():
            cells = line.split(",")
            print("  " + "  ".join(f"{c:>12}" for c in cells))


def cmd_evaluate(scores_csv: str | Path, p: float = 0.1,
                 out_dir: str | Path | None = None, name: str | None = None,
                 verbose: bool = True) -> evaluation.CorpusEvaluation:
    """Per-machine-type AUC/pAUC tables for one scores file."""
    records, lineage = evaluation.read_scores_csv(scores_csv)
    result = evaluation.evaluate_corpus(records, p=p)
    for warning in result.warnings:
        print(f"warning: {warning}")
    row_name = name or lineage.get("model_family", "run")
    auc_rows, pauc_rows = evaluation.result_rows(row_name, result)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "auc.csv").write_text(evaluation.format_result_table(auc_rows))
        (out_dir / "pauc.csv").write_text(evaluation.format_result_table(pauc_rows))
    if verbose:
        _print_tables(auc_rows, pauc_rows)
    return result


def cmd_report(named_scores: list[tuple[str, Path]], p: float = 0.1,
               out_dir: str | Path | None = None,
               include_paper_baseline: bool = False,
               force: bool = False, verbose: bool = True
               ) -> tuple[dict, dict]:
    """Merge several runs into Table-style AUC and pAUC matrices.

    Runs must share the same manifest lineage (same test corpus) unless
    forced; the optional paper baseline row carries reported values, not
    recomputed ones.
    """
    auc_rows: dict[str, dict] = {}
    pauc_rows: dict[str, dict] = {}
    manifest_hashes = set()
    for name, path in named_scores:
        records, lineage = evaluation.read_scores_csv(path)
        if "manifest_hash" in lineage:
            manifest_hashes.add(lineage["manifest_hash"])
        result = evaluation.evaluate_corpus(records, p=p)
        for warning in result.warnings:
            print(f"warning: {name}: {warning}")
        a, q = evaluation.result_rows(name, result)
        auc_rows.update(a)
        pauc_rows.update(q)
    if len(manifest_hashes) > 1 and not force:
        raise IntegrityError(
            f"scores files come from different manifests {sorted(manifest_hashes)}; "
            f"pass --force to compare anyway"
        )
    if include_paper_baseline:
        auc_rows["B (reported)"] = dict(evaluation.PAPER_BASELINE_AUC)
        pauc_rows["B (reported)"] = dict(evaluation.PAPER_BASELINE_PAUC)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "auc.csv").write_text(evaluation.format_result_table(auc_rows))
        (out_dir / "pauc.csv").write_text(evaluation.format_result_table(pauc_rows))
    if verbose:
        _print_tables(auc_rows, pauc_rows)
    return auc_rows, pauc_rows
