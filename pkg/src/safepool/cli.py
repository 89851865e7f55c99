"""Command-line experiment harness.

Subcommands: gen-synth, train, grid, eval, cache, correspond, report.
Every command writes machine-readable JSON into its output directory (the
schemas live in ``schemas/`` at the repository root). Multi-fold commands
report per-fold numbers plus their mean. All randomness flows from
explicit seeds; exit code 2 flags configuration errors, 3 data errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from .attnpool import DenseFeatureMap
from .correspondence import PixelPoint, export_heatmap, match_point, upsample
from .errors import ConfigError, DataError, SafepoolError
from .inference import Classifier, evaluate, write_prediction_csv
from .store import (DatasetManifest, gen_synthetic, load_attnpool,
                    read_tensor, sample_k_shot, save_attnpool)
from .trainer import FewShotData, TrainConfig, grid_search, train_safe


def _write_result(out_dir: Path, doc: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "result.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def _parse_folds(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad fold list {text!r}") from exc


def _train_config(args) -> TrainConfig:
    kwargs = {}
    for name in ("iterations", "batch_size", "eval_every", "beta", "patience"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            kwargs[name] = value
    if getattr(args, "lr", None) is not None:
        kwargs["lr_grid"] = (args.lr,)
    if getattr(args, "wd", None) is not None:
        kwargs["wd_grid"] = (args.wd,)
    return TrainConfig(**kwargs)


def _add_train_flags(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True, help="shots per class")
    p.add_argument("--folds", default="1,2,3",
                   help="comma-separated fold seeds (default 1,2,3)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--beta", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float, help="fix the learning rate (skips grid)")
    p.add_argument("--wd", type=float, help="fix the weight decay (skips grid)")
    p.add_argument("--out", required=True)


def _load_task(manifest_path):
    manifest = DatasetManifest.load(manifest_path)
    manifest.validate(check_files=False)
    clf = Classifier(manifest.load_classifier_weights())
    frozen = manifest.load_attnpool()
    return manifest, clf, frozen


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    manifest = gen_synthetic(
        out, args.classes, args.pool_per_class, args.height, args.width,
        args.channels, args.embed_dim, args.parts, args.noise, args.seed,
        test_per_class=args.test_per_class,
        classifier_noise=args.classifier_noise,
    )
    _write_result(out, {
        "kind": "gen-synth",
        "manifest": str(out / "manifest.json"),
        "classes": manifest.n_classes,
        "zero_shot_accuracy": manifest.metadata["zero_shot_accuracy"],
    })
    print(f"wrote {out / 'manifest.json'} "
          f"(zero-shot {manifest.metadata['zero_shot_accuracy']:.3f})")
    return 0


def _run_folds(args, use_grid: bool) -> int:
    manifest, clf, frozen = _load_task(args.manifest)
    cfg = _train_config(args)
    folds = _parse_folds(args.folds)
    out = Path(args.out)
    test_maps, test_labels, _ = manifest.load_split("test")
    fold_docs = []
    for fold in folds:
        fewshot = sample_k_shot(manifest, args.k, fold)
        data = FewShotData.from_manifest(manifest, fewshot)
        fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": fold})
        if use_grid:
            report = grid_search(data, frozen, clf, fold_cfg)
        else:
            report = train_safe(data, frozen, clf, fold_cfg)
        ckpt = out / f"fold{fold}" / "attnpool_f"
        save_attnpool(ckpt, report.best_params)
        result = evaluate(test_maps, test_labels, frozen, report.best_params,
                          clf, fold_cfg.beta)
        (out / f"fold{fold}" / "report.json").write_text(
            json.dumps(report.to_json(), indent=2, sort_keys=True))
        fold_docs.append({
            "fold": fold,
            "lr": report.lr,
            "wd": report.wd,
            "best_step": report.best_step,
            "val_accuracy": report.best_val_accuracy,
            "test_accuracy": result.accuracy,
            "checkpoint": str(ckpt),
        })
    doc = {
        "kind": "grid" if use_grid else "train",
        "manifest": str(args.manifest),
        "k": args.k,
        "beta": cfg.beta,
        "folds": fold_docs,
        "mean_test_accuracy": float(np.mean([f["test_accuracy"]
                                             for f in fold_docs])),
        "zero_shot_accuracy": manifest.metadata.get("zero_shot_accuracy"),
    }
    _write_result(out, doc)
    print(f"mean test accuracy over folds {folds}: "
          f"{doc['mean_test_accuracy']:.3f}")
    return 0


def cmd_train(args) -> int:
    return _run_folds(args, use_grid=False)


def cmd_grid(args) -> int:
    return _run_folds(args, use_grid=True)


def cmd_eval(args) -> int:
    manifest, clf, frozen = _load_task(args.manifest)
    if not args.zero_shot and args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint or --zero-shot")
    tuned = frozen if args.zero_shot else load_attnpool(args.checkpoint)
    maps, labels, idx = manifest.load_split(args.split)
    result = evaluate(maps, labels, frozen, tuned, clf, args.beta,
                      sample_ids=[manifest.samples[i].path for i in idx])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "predictions.csv"
    write_prediction_csv(csv_path, result)
    _write_result(out, {
        "kind": "eval",
        "manifest": str(args.manifest),
        "split": args.split,
        "zero_shot": bool(args.zero_shot),
        "beta": args.beta,
        "accuracy": result.accuracy,
        "per_class_accuracy": result.per_class_accuracy,
        "n_samples": result.n_samples,
        "predictions_csv": str(csv_path),
    })
    print(f"accuracy on {args.split}: {result.accuracy:.3f}")
    return 0


def cmd_cache(args) -> int:
    manifest, clf, frozen = _load_task(args.manifest)
    folds = _parse_folds(args.folds)
    out = Path(args.out)
    test_maps, test_labels, _ = manifest.load_split("test")
    alpha_grid = tuple(float(x) for x in args.alpha_grid.split(","))
    gamma_grid = tuple(float(x) for x in args.gamma_grid.split(","))
    fold_docs = []
    for fold in folds:
        tuned = load_attnpool(Path(args.train_dir) / f"fold{fold}" / "attnpool_f")
        fewshot = sample_k_shot(manifest, args.k, fold)
        data = FewShotData.from_manifest(manifest, fewshot)
        cache = cache_mod.build_cache(
            data.train_maps, data.train_labels, args.mode, frozen, tuned,
            beta=args.beta)
        alpha, gamma, val_acc = cache_mod.tune_cache_hparams(
            data.val_maps, data.val_labels, frozen, tuned, args.beta, cache,
            clf, alpha_grid, gamma_grid)
        cache.alpha, cache.gamma = alpha, gamma
        cache_mod.save_cache(out / f"fold{fold}" / "cache", cache)
        logits = cache_mod.safe_a_logits_batch(
            test_maps, frozen, tuned, args.beta, cache, clf)
        acc = float(np.mean(np.argmax(logits, axis=1) == test_labels))
        fold_docs.append({
            "fold": fold, "alpha": alpha, "gamma": gamma,
            "val_accuracy": val_acc, "test_accuracy": acc,
            "cache": str(out / f"fold{fold}" / "cache"),
        })
    doc = {
        "kind": "cache",
        "manifest": str(args.manifest),
        "k": args.k,
        "mode": args.mode,
        "beta": args.beta,
        "folds": fold_docs,
        "mean_test_accuracy": float(np.mean([f["test_accuracy"]
                                             for f in fold_docs])),
    }
    _write_result(out, doc)
    print(f"mean cache-adapter test accuracy: {doc['mean_test_accuracy']:.3f}")
    return 0


def cmd_correspond(args) -> int:
    source = DenseFeatureMap.from_grid(_read_grid(args.source))
    target = DenseFeatureMap.from_grid(_read_grid(args.target))
    if args.upsample:
        h, w = args.upsample
        source = upsample(source, h, w)
        target = upsample(target, h, w)
    x, y = (int(v) for v in args.point.split(","))
    point, heat = match_point(source, target, PixelPoint(x=x, y=y))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_heatmap(heat, out / "heatmap")
    _write_result(out, {
        "kind": "correspond",
        "source": str(args.source),
        "target": str(args.target),
        "point": {"x": x, "y": y},
        "match": {"x": point.x, "y": point.y},
        "heatmap_pgm": str(out / "heatmap.pgm"),
        "heatmap_csv": str(out / "heatmap.csv"),
    })
    print(f"matched ({x},{y}) -> ({point.x},{point.y})")
    return 0


def _read_grid(path):
    arr = read_tensor(path)
    if arr.ndim == 3:
        return arr
    raise DataError(f"{path}: correspondence expects an (H, W, C) tensor, "
                    f"got shape {arr.shape}")


def cmd_report(args) -> int:
    out = Path(args.out)
    entries = []
    for path in sorted(Path(args.results_dir).rglob("result.json")):
        doc = json.loads(path.read_text())
        entry = {"path": str(path), "kind": doc.get("kind")}
        for key in ("accuracy", "mean_test_accuracy", "zero_shot_accuracy"):
            if key in doc and doc[key] is not None:
                entry[key] = doc[key]
        entries.append(entry)
    if not entries:
        raise DataError(f"no result.json files under {args.results_dir}")
    _write_result(out, {"kind": "report", "results": entries})
    print(f"aggregated {len(entries)} results into {out / 'result.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safepool",
        description="Few-shot adaptation over frozen dense feature maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a planted-parts dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--pool-per-class", type=int, default=20, dest="pool_per_class")
    p.add_argument("--test-per-class", type=int, default=20, dest="test_per_class")
    p.add_argument("--height", type=int, default=7)
    p.add_argument("--width", type=int, default=7)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=32, dest="embed_dim")
    p.add_argument("--parts", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--classifier-noise", type=float, default=0.5,
                   dest="classifier_noise")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="fine-tune with a fixed lr/wd")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="fine-tune with lr/wd grid search")
    _add_train_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="evaluate a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", help="tuned pooling-layer checkpoint dir")
    p.add_argument("--zero-shot", action="store_true", dest="zero_shot",
                   help="use the frozen layer for both blend branches")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cache", help="build and evaluate the cache adapter")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-dir", required=True, dest="train_dir",
                   help="output dir of a previous train/grid run")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--folds", default="1,2,3")
    p.add_argument("--mode", choices=("original", "blended"), default="blended")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--alpha-grid", default="0.5,1.0,2.0,5.0", dest="alpha_grid")
    p.add_argument("--gamma-grid", default="1.0,3.0,5.5,10.0", dest="gamma_grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("correspond", help="semantic point matching")
    p.add_argument("--source", required=True, help="(H, W, C) tensor file")
    p.add_argument("--target", required=True)
    p.add_argument("--point", required=True, help="x,y in the source grid")
    p.add_argument("--upsample", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correspond)

    p = sub.add_parser("report", help="aggregate result.json files")
    p.add_argument("--results-dir", required=True, dest="results_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except SafepoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
