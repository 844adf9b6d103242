"""Command-line entry point: ``cellpr <subcommand> [flags]``.

Every subcommand that takes ``--out`` writes ``resolved_config.json`` (loadable
again with ``--config``) and ``run.json`` (subcommand and inputs) beside its
outputs. Failures print one JSON line ``{"error": ..., "message": ...}`` to
stderr and exit nonzero.
"""
from __future__ import annotations

import os

# BLAS thread pools can reorder floating-point reductions; the CLI contract is
# bitwise reproducibility, so pin them before numpy loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import density
from .config import ConfigError, RunConfig
from .data import DatasetManifest, save_record
from .detector import GridDetectorParams, train_detector
from .encoder import FeatureExtractor, pretrain_extractor
from .evaluation import classification_metrics, classify_celiac, q_ratio
from .pipeline import ABLATION_ROWS, ablation_table, evaluate_model, paired_comparison, run_seed
from .regularizer import LossReport, MC_MODES
from .synth import generate_scenes

log = logging.getLogger("cellpr")

KL_SHARDS = 8   # fixed so that --threads never changes a KL estimate


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(2)


# --------------------------------------------------------------------------- helpers

def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    reg = cfg.regularizer
    overrides = {}
    if getattr(args, "lambda_reg", None) is not None:
        overrides["lambda_reg"] = args.lambda_reg
    if getattr(args, "mc_mode", None) is not None:
        overrides["mc_mode"] = args.mc_mode
    if getattr(args, "mc_samples", None) is not None:
        overrides["mc_samples"] = args.mc_samples
    if overrides:
        cfg.regularizer = replace(reg, **overrides)
    if getattr(args, "iou_threshold", None) is not None:
        cfg.evaluation = replace(cfg.evaluation, iou_threshold=args.iou_threshold)
    cfg.__post_init__()
    return cfg


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError("--out is required for this subcommand")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, cfg: RunConfig, command: str, inputs: dict) -> None:
    cfg.save(out / "resolved_config.json")
    (out / "run.json").write_text(json.dumps({"command": command, "seed": cfg.seed, "inputs": inputs},
                                             indent=2, sort_keys=True) + "\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_vectors(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as f:
        for n, row in enumerate(csv.reader(f)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if n == 0:
                    continue            # header
                raise CliError(f"{path}:{n + 1}: non-numeric vector entry") from None
    if not rows:
        raise CliError(f"{path}: no vectors")
    if len({len(r) for r in rows}) != 1:
        raise CliError(f"{path}: rows have differing lengths")
    return np.array(rows)


def _load_manifest(path) -> tuple[DatasetManifest, list]:
    manifest = DatasetManifest.load(path)
    return manifest, manifest.load_records()


# --------------------------------------------------------------------------- subcommands

def cmd_synth(args) -> None:
    cfg = _resolve(args)
    if args.n_train is not None:
        cfg.n_train = args.n_train
    if args.n_test is not None:
        cfg.n_test = args.n_test
    out = _out_dir(args)
    scenes = generate_scenes(cfg.scene, cfg.n_train + cfg.n_test, seed=cfg.seed)
    for split, recs in (("train", scenes[:cfg.n_train]), ("test", scenes[cfg.n_train:])):
        entries = []
        for rec in recs:
            save_record(rec, out / "scenes", rec.name)
            entries.append((f"scenes/{rec.name}.pgm", f"scenes/{rec.name}.txt"))
        DatasetManifest(cfg.scene.class_names, entries, cfg.evaluation.iou_threshold).save(out / f"{split}.json")
    _dump(out / "scene_spec.json", cfg.scene.to_json())
    _write_run(out, cfg, "synth", {})
    print(f"wrote {cfg.n_train} train and {cfg.n_test} test scenes")


def cmd_encoder_train(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args)
    manifest, records = _load_manifest(args.manifest)
    extractor, result = pretrain_extractor(records, manifest.n_classes, cfg.encoder)
    extractor.save(out / "extractor.json")
    with open(out / "encoder_loss.csv", "w") as f:
        f.write("epoch,loss\n")
        for e, v in enumerate(result.loss_trace):
            f.write(f"{e},{v!r}\n")
    for e, v in enumerate(result.loss_trace):
        print(f"epoch {e + 1} supcon {v:.6f}")
    print(f"pca dimension {extractor.pca.r} explained {extractor.pca.explained_ratio:.4f}")
    _write_run(out, cfg, "encoder-train", {"manifest": args.manifest})


def cmd_gmm_fit(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args)
    x = _read_vectors(args.vectors)
    if args.k_max is not None:
        fit = density.select_k_bic(x, tuple(range(1, args.k_max + 1)), seed=cfg.seed)
    else:
        if x.shape[0] < args.k:
            raise CliError(f"need at least K={args.k} vectors, got {x.shape[0]}")
        fit = density.em_fit(x, args.k, seed=cfg.seed)
    fit.gmm.save(out / "gmm.json")
    report = {"k": fit.gmm.k, "dimension": fit.gmm.dim, "n": int(x.shape[0]),
              "log_likelihood": fit.log_likelihood[-1] if fit.log_likelihood else None,
              "n_iter": fit.n_iter, "bic": density.bic(fit.gmm, x)}
    _dump(out / "fit.json", report)
    _write_run(out, cfg, "gmm-fit", {"vectors": args.vectors, "k": args.k, "k_max": args.k_max})
    print(f"k={fit.gmm.k} log_likelihood={report['log_likelihood']:.6f} n_iter={fit.n_iter}")


def cmd_kl(args) -> None:
    cfg = _resolve(args)
    p = density.Gmm.load(args.p)
    q = density.Gmm.load(args.q)
    # without an explicit mode, vector files select the paired estimator
    mode = args.mc_mode or ("paired" if args.gold_vectors and args.pred_vectors else "standard")
    if mode == "standard":
        est = density.kl_mc_standard(p, q, cfg.regularizer.mc_samples, seed=cfg.seed, shards=KL_SHARDS,
                                     threads=cfg.threads)
        value, se, n = est.value, est.stderr, est.n
    else:
        if not (args.gold_vectors and args.pred_vectors):
            raise CliError("paired mode needs --gold-vectors and --pred-vectors")
        g, r = _read_vectors(args.gold_vectors), _read_vectors(args.pred_vectors)
        value, se, n = density.kl_mc_paired(p, q, g, r), math.nan, len(g)
    print(f"kl={value:.6f} se={se:.6f} n={n} mode={mode}")
    if args.out:
        out = _out_dir(args)
        _dump(out / "kl.json", {"kl": value, "stderr": None if math.isnan(se) else se, "n": n, "mode": mode})
        _write_run(out, cfg, "kl", {"p": args.p, "q": args.q, "gold_vectors": args.gold_vectors,
                                    "pred_vectors": args.pred_vectors})


def cmd_train(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args)
    manifest, records = _load_manifest(args.manifest)
    reg = cfg.regularizer
    extractor = None
    if reg.active and reg.use_implicit:
        if args.extractor:
            extractor = FeatureExtractor.load(args.extractor)
        else:
            extractor = pretrain_extractor(records, manifest.n_classes, cfg.encoder)[0]
            extractor.save(out / "extractor.json")
    res = train_detector(records, cfg.detector, manifest.n_classes, reg if reg.active else None, extractor,
                         log=log.info)
    res.params.save(out / "detector.json")
    for name, reports in (("loss.csv", res.step_reports), ("epoch_loss.csv", res.epoch_reports)):
        with open(out / name, "w") as f:
            f.write(LossReport.CSV_HEADER + "\n")
            f.writelines(r.csv_row() + "\n" for r in reports)
    last = res.epoch_reports[-1]
    print(f"trained {cfg.detector.epochs} epochs L_det {last.l_det:.6f} L_exp {last.l_exp:.6f} "
          f"L_imp {last.l_imp:.6f} L_total {last.l_total:.6f}")
    _write_run(out, cfg, "train", {"manifest": args.manifest, "extractor": args.extractor})


def cmd_eval(args) -> None:
    cfg = _resolve(args)
    out = _out_dir(args)
    manifest, records = _load_manifest(args.manifest)
    if args.iou_threshold is None and not _config_sets(args.config, "evaluation", "iou_threshold"):
        cfg.evaluation = replace(cfg.evaluation, iou_threshold=manifest.iou_threshold)
    params = GridDetectorParams.load(args.detector)
    summary = evaluate_model(params, records, manifest.class_names, cfg.evaluation)
    (out / "metrics.csv").write_text(summary.to_csv())
    (out / "metrics.json").write_text(summary.dumps())
    counts = summary.counts
    with open(out / "counts.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image"] + [f"pred_{c}" for c in manifest.class_names] + [f"gold_{c}" for c in manifest.class_names])
        for name, p, g in zip(counts.images, counts.predicted, counts.gold):
            w.writerow([name, *map(int, p), *map(int, g)])
    print(f"mAP {summary.detection.map:.4f} precision {summary.detection.precision:.4f} "
          f"recall {summary.detection.recall:.4f} mean MAE {counts.mean_mae:.4f}")
    _write_run(out, cfg, "eval", {"manifest": args.manifest, "detector": args.detector})


def _config_sets(path, section: str, key: str) -> bool:
    if not path:
        return False
    raw = json.loads(Path(path).read_text())
    return isinstance(raw.get(section), dict) and key in raw[section]


def cmd_q_ratio(args) -> None:
    cfg = _resolve(args)
    with open(args.counts, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise CliError(f"{args.counts}: no rows")
    for col in (args.image_column, args.iel_column, args.en_column):
        if col not in rows[0]:
            raise CliError(f"{args.counts}: missing column {col!r}")
    has_label = args.label_column in rows[0]
    table, predicted, gold = [], [], []
    for n, row in enumerate(rows):
        try:
            iel, en = float(row[args.iel_column]), float(row[args.en_column])
        except ValueError:
            raise CliError(f"{args.counts}:{n + 2}: non-numeric count") from None
        ratio = q_ratio(iel, en)
        label = classify_celiac(ratio, args.threshold)
        entry = {"image": row[args.image_column], "iel": iel, "en": en, "q_ratio": ratio, "predicted": label}
        if has_label:
            entry["label"] = row[args.label_column]
            gold.append(entry["label"])
            predicted.append(label)
        table.append(entry)
    report = {"threshold": args.threshold, "n_images": len(table)}
    if has_label:
        m = classification_metrics(predicted, gold)
        report.update({"precision": m.precision, "recall": m.recall, "f1": m.f1, "accuracy": m.accuracy,
                       "tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn})
        print("precision,recall,f1,accuracy")
        print(f"{m.precision:.4f},{m.recall:.4f},{m.f1:.4f},{m.accuracy:.4f}")
    else:
        for e in table:
            print(f"{e['image']},{e['q_ratio']:.4f},{e['predicted']}")
    if args.out:
        out = _out_dir(args)
        with open(out / "q_ratio.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)
        _dump(out / "q_ratio.json", report)
        _write_run(out, cfg, "q-ratio", {"counts": args.counts})


def cmd_ablation(args) -> None:
    cfg = _resolve(args)
    if args.n_seeds is not None:
        cfg.n_seeds = args.n_seeds
    out = _out_dir(args)
    rows = ABLATION_ROWS if args.rows == "all" else (ABLATION_ROWS[0], ABLATION_ROWS[-1])
    outcomes = {}
    for s in range(cfg.seed, cfg.seed + cfg.n_seeds):
        outcomes[s] = run_seed(cfg.with_seed(s), s, rows, log=log.info)
        log.info("seed %d done", s)
    table = ablation_table(outcomes, rows)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    with open(out / "per_seed.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "variant", "mAP", "precision", "recall", "mean_MAE"])
        for s, outs in outcomes.items():
            for o in outs:
                d = o.summary.detection
                w.writerow([s, o.label, repr(d.map), repr(d.precision), repr(d.recall), repr(o.summary.counts.mean_mae)])
    comparison = paired_comparison(outcomes, rows[0][0], rows[-1][0])
    _dump(out / "comparison.json", comparison)
    _write_run(out, cfg, "ablation", {"rows": args.rows})
    keys = list(table[0])
    print(",".join(keys))
    for r in table:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r.values()))
    print(f"MAE not worse in {comparison['mae_not_worse']}/{comparison['n']} seeds, "
          f"mAP not worse in {comparison['map_not_worse']}/{comparison['n']} seeds")


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cellpr", description="Posterior-regularized cell detection on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads where results do not depend on them (default 1)")
        p.add_argument("--out", required=out, help="output directory")
        p.set_defaults(func=func)
        return p

    def add_reg(p):
        p.add_argument("--lambda-reg", type=float, help="regularizer weight; 0 disables it")
        p.add_argument("--mc-mode", choices=MC_MODES)
        p.add_argument("--mc-samples", type=int, help="samples for standard Monte-Carlo KL (default 100000)")

    p = add("synth", cmd_synth, "generate a synthetic scene dataset")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = add("encoder-train", cmd_encoder_train, "pretrain the patch encoder and fit PCA")
    p.add_argument("--manifest", required=True)

    p = add("gmm-fit", cmd_gmm_fit, "fit a mixture to a CSV of vectors")
    p.add_argument("--vectors", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--k-max", type=int, help="choose K in 1..k-max by BIC instead of using --k")

    p = add("kl", cmd_kl, "estimate KL(P || Q) between two serialized mixtures", out=False)
    p.add_argument("--p", required=True)
    p.add_argument("--q", required=True)
    p.add_argument("--gold-vectors", help="paired mode: CSV of gold vectors")
    p.add_argument("--pred-vectors", help="paired mode: CSV of predicted vectors")
    add_reg(p)

    p = add("train", cmd_train, "train the grid detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--extractor", help="pretrained extractor JSON; trained on the fly if omitted")
    add_reg(p)

    p = add("eval", cmd_eval, "detect and compute metrics on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--iou-threshold", type=float)

    p = add("q-ratio", cmd_q_ratio, "celiac classification from per-image counts", out=False)
    p.add_argument("--counts", required=True)
    p.add_argument("--image-column", default="image")
    p.add_argument("--iel-column", default="iel")
    p.add_argument("--en-column", default="en")
    p.add_argument("--label-column", default="label")
    p.add_argument("--threshold", type=float, default=25.0)

    p = add("ablation", cmd_ablation, "paired-seed sweep over regularizer variants")
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--rows", choices=("all", "pair"), default="all",
                   help="all ablation rows, or only baseline and the full regularizer")
    add_reg(p)
    p.add_argument("--iou-threshold", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CliError, ConfigError, ValueError, LookupError, OSError, ArithmeticError) as e:
        msg = " ".join(str(e).split())
        print(json.dumps({"error": type(e).__name__, "message": msg}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
