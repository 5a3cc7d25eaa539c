"""Command-line interface.

Subcommands: ingest, extract-features, fit-norm, train, score, evaluate,
report, gen-manifest-dcase, selftest. Exit codes: 0 success, 1 config or
generic failure, 2 ingestion/extraction, 3 training, 4 scoring,
5 evaluation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluation, manifest, ops, pipeline
from .errors import AsdError, ConfigError
from .pipeline import RunConfig, load_config

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INGEST = 2
EXIT_TRAIN = 3
EXIT_SCORE = 4
EXIT_EVAL = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asdkit",
        description="Anomalous sound detection: gammatone features + "
                    "convolutional autoencoders",
    )
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("--print-config", action="store_true",
                        help="echo the resolved configuration")
    sub = parser.add_subparsers(dest="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        return p

    p = add("ingest", "validate a dataset manifest")
    p.add_argument("--manifest", required=True)

    p = add("extract-features", "extract and cache spectrograms for every clip")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frontend", choices=["gammatone", "mel"],
                   help="frontend preset (default: config)")

    p = add("fit-norm", "fit per-bin normalization on the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frontend", choices=["gammatone", "mel"])

    p = add("train", "train a model on the manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", choices=pipeline.MODEL_FAMILIES)
    p.add_argument("--alpha", type=float, help="reconstruction loss weight")
    p.add_argument("--beta", type=float, help="classification loss weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--name", help="checkpoint directory name (default: family)")
    p.add_argument("--frontend", choices=["gammatone", "mel"])

    p = add("score", "score test-split clips with a trained checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="scores CSV path")
    p.add_argument("--frontend", choices=["gammatone", "mel"])

    p = add("evaluate", "per-machine-type AUC/pAUC for one scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--p", type=float)
    p.add_argument("--name", help="row label in the result table")
    p.add_argument("--out-dir")
    p.add_argument("--roc-dump", help="write (fpr,tpr) per type into this directory")

    p = add("report", "merge several runs into Table-style matrices")
    p.add_argument("--scores", required=True, action="append",
                   metavar="NAME=PATH")
    p.add_argument("--p", type=float)
    p.add_argument("--include-paper-baseline", action="store_true",
                   help="add the reported baseline row to the tables")
    p.add_argument("--force", action="store_true",
                   help="allow mixing scores from different manifests")
    p.add_argument("--out-dir")

    p = add("gen-manifest-dcase", "build a manifest from a DCASE-style tree")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)

    add("selftest", "run gradient checks and metric oracles")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if getattr(args, "frontend", None) == "mel":
        cfg = pipeline.apply_mel_frontend(cfg)
    if getattr(args, "model", None):
        cfg["model"]["family"] = args.model
    if getattr(args, "alpha", None) is not None:
        cfg["model"]["alpha"] = args.alpha
    if getattr(args, "beta", None) is not None:
        cfg["model"]["beta"] = args.beta
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    if getattr(args, "p", None) is not None:
        cfg["eval"]["p"] = args.p
    return RunConfig(cfg)


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _op_checks() -> list[tuple[str, bool, str]]:
    results = []

    def check(name, fn):
        try:
            detail = fn()
            results.append((name, True, detail))
        except Exception as exc:  # report, keep going
            results.append((name, False, str(exc)))

    def fd(name, loss_fn, grad_fn, wrt, tol=1e-4):
        err = ops.gradient_check(loss_fn, grad_fn, wrt,
                                 rng=np.random.default_rng(0))
        if err >= tol:
            raise AssertionError(f"max rel err {err:.2e} >= {tol}")
        return f"max rel err {err:.2e}"

    rng = np.random.default_rng(42)

    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    t = rng.normal(size=(2, 3, 4, 4))
    check("conv2d gradient", lambda: fd(
        "conv2d",
        lambda: ops.mse_loss(ops.conv2d_forward(x, w, b), t)[0],
        lambda: list(ops.conv2d_backward(
            ops.mse_loss(ops.conv2d_forward(x, w, b), t)[1], x, w)),
        [x, w, b],
    ))

    xb = rng.normal(size=(6, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    tb = rng.normal(size=xb.shape)

    def bn_loss():
        y, _ = ops.batchnorm_forward(xb, gamma, beta, np.zeros(3), np.ones(3), True)
        return ops.mse_loss(y, tb)[0]

    def bn_grads():
        y, cache = ops.batchnorm_forward(xb, gamma, beta, np.zeros(3), np.ones(3), True)
        _, d = ops.mse_loss(y, tb)
        return list(ops.batchnorm_backward(d, cache))

    check("batchnorm gradient", lambda: fd("bn", bn_loss, bn_grads, [xb, gamma, beta]))

    xd = rng.normal(size=(4, 5))
    wd = rng.normal(size=(5, 3))
    bd = rng.normal(size=3)
    td = rng.normal(size=(4, 3))
    check("dense gradient", lambda: fd(
        "dense",
        lambda: ops.mse_loss(ops.dense_forward(xd, wd, bd), td)[0],
        lambda: list(ops.dense_backward(
            ops.mse_loss(ops.dense_forward(xd, wd, bd), td)[1], xd, wd)),
        [xd, wd, bd],
    ))

    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    check("softmax-cce gradient", lambda: fd(
        "cce",
        lambda: ops.softmax_cce_loss(logits, labels)[0],
        lambda: [ops.softmax_cce_loss(logits, labels)[1]],
        [logits], tol=1e-5,
    ))

    def metric_oracle():
        r = np.random.default_rng(1)
        for _ in range(100):
            n_neg, n_pos = int(r.integers(2, 40)), int(r.integers(1, 40))
            normals = r.integers(0, 10, n_neg) / 10.0
            anomalies = r.integers(0, 10, n_pos) / 10.0
            p = float(r.uniform(1.0 / n_neg, 1.0))
            es = evaluation.EvaluationSet(normals, anomalies, p=p)
            direct = sum(1.0 for n in normals for a in anomalies if a > n) / (
                n_neg * n_pos)
            if evaluation.auc(es) != direct:
                raise AssertionError("fast AUC != pairwise oracle")
            k = int(np.floor(p * n_neg))
            top = sorted(normals, reverse=True)[:k]
            direct_p = sum(1.0 for n in top for a in anomalies if a > n) / (
                k * n_pos)
            if evaluation.pauc(es) != direct_p:
                raise AssertionError("fast pAUC != pairwise oracle")
        return "100 random sets match the double-sum exactly"

    check("metric oracle equivalence", metric_oracle)
    return results


def run_selftest() -> int:
    results = _op_checks()
    failed = 0
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        print(f"[{status}] {name}: {detail}")
        failed += not passed
    return EXIT_OK if failed == 0 else EXIT_CONFIG


# ---------------------------------------------------------------------------
# main
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command is None and not args.print_config:
        parser.print_help()
        return EXIT_CONFIG

    try:
        run = _resolve(args)
    except (AsdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.print_config:
        print(run.dump_yaml(), end="")
        if args.command is None:
            return EXIT_OK

    stage_codes = {
        "ingest": EXIT_INGEST, "extract-features": EXIT_INGEST,
        "fit-norm": EXIT_INGEST, "gen-manifest-dcase": EXIT_INGEST,
        "train": EXIT_TRAIN, "score": EXIT_SCORE,
        "evaluate": EXIT_EVAL, "report": EXIT_EVAL,
    }
    try:
        if args.command == "ingest":
            entries = manifest.ingest_manifest(args.manifest)
            types = sorted({e.machine_type for e in entries})
            n_train = sum(1 for e in entries if e.split == "train")
            print(f"{len(entries)} entries ({n_train} train, "
                  f"{len(entries) - n_train} test), machine types: "
                  f"{', '.join(types)}")
            return EXIT_OK

        if args.command == "extract-features":
            entries = manifest.ingest_manifest(args.manifest)
            report = pipeline.extract_features(entries, run)
            return EXIT_OK if report.ok else EXIT_INGEST

        if args.command == "fit-norm":
            entries = manifest.ingest_manifest(args.manifest)
            mhash = manifest.manifest_hash(args.manifest)
            path = pipeline.fit_norm(entries, run, mhash)
            print(f"normalization stats written to {path}")
            return EXIT_OK

        if args.command == "train":
            ckpt_dir = pipeline.cmd_train(run, args.manifest, run_name=args.name)
            print(f"checkpoint directory: {ckpt_dir}")
            return EXIT_OK

        if args.command == "score":
            out = pipeline.cmd_score(run, args.manifest, args.checkpoint,
                                     out_csv=args.out)
            print(f"scores written to {out}")
            return EXIT_OK

        if args.command == "evaluate":
            result = pipeline.cmd_evaluate(
                args.scores, p=run.eval_p, out_dir=args.out_dir, name=args.name)
            if args.roc_dump:
                _dump_roc(args.scores, args.roc_dump)
            return EXIT_OK

        if args.command == "report":
            named = []
            for item in args.scores:
                if "=" not in item:
                    raise ConfigError(f"--scores expects NAME=PATH, got {item!r}")
                name, _, path = item.partition("=")
                named.append((name, Path(path)))
            pipeline.cmd_report(
                named, p=run.eval_p, out_dir=args.out_dir,
                include_paper_baseline=args.include_paper_baseline,
                force=args.force)
            return EXIT_OK

        if args.command == "gen-manifest-dcase":
            entries, warnings = manifest.gen_manifest_dcase(args.root)
            for w in warnings:
                print(f"warning: {w}")
            manifest.write_manifest(args.out, entries)
            print(f"{len(entries)} entries written to {args.out}")
            return EXIT_OK

        if args.command == "selftest":
            return run_selftest()

    except AsdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return stage_codes.get(args.command, EXIT_CONFIG)
    return EXIT_CONFIG


def _dump_roc(scores_csv: str, out_dir: str) -> None:
    records, _ = evaluation.read_scores_csv(scores_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_type: dict[str, tuple[list, list]] = {}
    for r in records:
        if r.label == "unknown":
            continue
        normals, anomalies = by_type.setdefault(r.machine_type, ([], []))
        (normals if r.label == "normal" else anomalies).append(r.anomaly_score)
    for mtype, (normals, anomalies) in sorted(by_type.items()):
        if not normals or not anomalies:
            continue
        es = evaluation.EvaluationSet(np.array(normals), np.array(anomalies), p=1.0)
        lines = ["fpr,tpr"]
        lines += [f"{fpr},{tpr}" for fpr, tpr in evaluation.roc_points(es)]
        (out / f"roc_{mtype}.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
