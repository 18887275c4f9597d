"""Command-line pipeline: generate, score, align, and evaluate.

Subcommands communicate exclusively through files (tensors, manifests,
CSVs, checkpoints); every run writes a resolved-config JSON next to its
outputs for provenance. Exit codes: 0 success, 1 usage error, 2
data/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import heads, metrics, net, synth
from .align import ScoreMap
from .tensorio import (
    DatasetManifest,
    ManifestError,
    TensorFormatError,
    read_manifest,
    read_tensor,
    write_tensor,
)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_run_config(out: Path, args: argparse.Namespace) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(args).items() if k != "func"}
    with open(out, "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_features(manifest: DatasetManifest, split: str) -> dict[str, np.ndarray]:
    out = {}
    for e in manifest.split(split):
        if e.feature_path is None:
            raise ManifestError(f"{e.image_id}: no feature_path")
        out[e.image_id] = read_tensor(manifest.resolve(e.feature_path))
    return out


def _load_maps(manifest: DatasetManifest, maps_dir: Path, split: str) -> dict[str, np.ndarray]:
    out = {}
    for e in manifest.split(split):
        path = maps_dir / f"{e.image_id}.adt"
        if not path.is_file():
            raise ManifestError(f"{e.image_id}: missing score map {path}")
        out[e.image_id] = read_tensor(path)
    return out


def _load_masks(manifest: DatasetManifest) -> dict[str, np.ndarray]:
    out = {}
    for e in manifest.split("test"):
        if e.mask_path is not None:
            out[e.image_id] = read_tensor(manifest.resolve(e.mask_path))
    return out


def _top_fraction(text: str):
    if text == "max":
        return "max"
    return float(text)


def _synth_config_from_args(args) -> synth.SynthConfig:
    return synth.SynthConfig(
        k_classes=args.k_classes,
        grid=(args.grid_h, args.grid_w),
        feat_dim=args.feat_dim,
        center_radius=args.center_radius,
        spread_range=(args.spread_min, args.spread_max),
        anomaly_rel_magnitude=args.anomaly_rel_magnitude,
        anomaly_area_range=(args.area_min, args.area_max),
        train_normal=args.train_normal,
        test_normal=args.test_normal,
        test_anomalous=args.test_anomalous,
        train_noise=args.train_noise,
        seed=args.seed,
    )


def cmd_gen(args) -> int:
    if args.config:
        with open(args.config) as f:
            cfg = synth.SynthConfig(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in json.load(f).items()
            })
    else:
        cfg = _synth_config_from_args(args)
    out_dir = Path(args.out)
    manifest = synth.generate(cfg, out_dir)
    _write_run_config(out_dir / "run_config.json", args)
    print(f"generated {len(manifest)} images -> {out_dir}")
    return 0


def cmd_fit_base(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    features = _load_features(manifest, "train")
    coreset = synth.fit_coreset(features, args.m_per_image, seed=args.seed)
    out_dir = Path(args.out)
    synth.save_coreset(coreset, out_dir)
    _write_run_config(out_dir / "run_config.json", args)
    print(f"coreset with {coreset.points.shape[0]} points -> {out_dir}")
    return 0


def cmd_score(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    coreset = synth.load_coreset(args.coreset)
    splits = ("train", "test") if args.split == "all" else (args.split,)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for split in splits:
        for e in manifest.split(split):
            feats = read_tensor(manifest.resolve(e.feature_path))
            smap = synth.score_knn(feats, coreset)
            write_tensor(out_dir / f"{e.image_id}.adt", smap)
            n += 1
    _write_run_config(out_dir / "run_config.json", args)
    print(f"scored {n} images -> {out_dir}")
    return 0


def cmd_stats(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    train = manifest.split("train")
    if any(e.class_id is None for e in train):
        raise ManifestError("stats needs class_ids on every train image")
    maps = _load_maps(manifest, Path(args.maps), "train")
    by_class: dict[int, list[ScoreMap]] = {}
    for e in train:
        by_class.setdefault(e.class_id, []).append(ScoreMap(e.image_id, maps[e.image_id]))
    stats = align_mod.fit_class_stats(by_class)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    align_mod.write_stats_csv(out, stats)
    _write_run_config(out.with_suffix(".config.json"), args)
    print(f"fitted stats for {len(stats)} classes -> {out}")
    return 0


def _head_config_from_args(args, mode: str, out_dim: int) -> heads.HeadConfig:
    n_conv, n_linear = heads.STRUCTURES[args.structure]
    return heads.HeadConfig(
        mode=mode,
        n_conv=n_conv,
        n_linear=n_linear,
        hidden_dim=args.hidden_dim,
        dropout_rate=args.dropout,
        activation=args.activation,
        target=args.target,
        alpha=args.alpha,
        out_dim=out_dim,
    )


def _train_config_from_args(args) -> heads.TrainConfig:
    return heads.TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        iterations=args.iterations,
        seed=args.seed,
    )


def cmd_train_head(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    features = _load_features(manifest, "train")
    train_cfg = _train_config_from_args(args)
    if args.mode == "regressor":
        maps = _load_maps(manifest, Path(args.maps), "train")
        head_cfg = _head_config_from_args(args, "regressor", 2)
        model = heads.train_regressor(features, maps, head_cfg, train_cfg)
    else:
        class_ids = {e.image_id: e.class_id for e in manifest.split("train")}
        if any(c is None for c in class_ids.values()):
            raise ManifestError("train-head --mode classifier needs class_ids")
        k = len(set(class_ids.values()))
        head_cfg = _head_config_from_args(args, "classifier", k)
        model = heads.train_classifier(features, class_ids, head_cfg, train_cfg)
    out_dir = Path(args.out)
    heads.save_checkpoint(model, out_dir)
    _write_run_config(out_dir / "run_config.json", args)
    final = model.loss_trace[-1] if model.loss_trace else float("nan")
    extra = (f", holdout acc {model.holdout_accuracy:.3f}"
             if model.holdout_accuracy is not None else "")
    print(f"trained {args.mode} ({args.iterations} iters, final loss {final:.4f}{extra}) "
          f"-> {out_dir}")
    return 0


def cmd_align(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    maps = _load_maps(manifest, Path(args.maps), args.split)
    entries = manifest.split(args.split)
    score_maps = [ScoreMap(e.image_id, maps[e.image_id]) for e in entries]

    if args.mode == "oracle":
        if args.stats is None:
            raise UsageError("align --mode oracle needs --stats")
        if any(e.class_id is None for e in entries):
            raise ManifestError("align --mode oracle needs class_ids in the manifest")
        stats = align_mod.read_stats_csv(args.stats)
        class_ids = {e.image_id: e.class_id for e in entries}
        aligned = align_mod.apply_oracle_alignment(
            score_maps, class_ids, stats, variant=args.variant, eps=args.eps
        )
    elif args.mode == "classifier":
        if args.model is None or args.stats is None:
            raise UsageError("align --mode classifier needs --model and --stats")
        model = _load_model(args.model)
        stats = align_mod.read_stats_csv(args.stats)
        features = _load_features(manifest, args.split)
        aligned = [
            heads.calibrate_with_classifier(
                model, stats, smap, features[smap.image_id],
                variant=args.variant, eps=args.eps,
            )
            for smap in score_maps
        ]
    elif args.mode == "regressor":
        if args.model is None:
            raise UsageError("align --mode regressor needs --model")
        model = _load_model(args.model)
        features = _load_features(manifest, args.split)
        aligned = [
            heads.calibrate_with_regressor(model, smap, features[smap.image_id], eps=args.eps)
            for smap in score_maps
        ]
    else:
        raise UsageError(f"unknown align mode {args.mode!r}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for smap in aligned:
        write_tensor(out_dir / f"{smap.image_id}.adt", smap.values)
    _write_run_config(out_dir / "run_config.json", args)
    print(f"aligned {len(aligned)} maps ({args.mode}) -> {out_dir}")
    return 0


def _load_model(path) -> heads.HeadModel:
    path = Path(path)
    if not (path / "head.json").is_file():
        raise ManifestError(f"missing checkpoint: {path / 'head.json'}")
    return heads.load_checkpoint(path)


def cmd_eval(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    maps = _load_maps(manifest, Path(args.maps), "test")
    masks = _load_masks(manifest)
    reports = metrics.evaluate(manifest, maps, masks, top_fraction=args.top_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_reports_csv(out, reports)
    _write_run_config(out.with_suffix(".config.json"), args)
    for r in reports:
        print(r.to_csv_row())
    return 0


def cmd_report(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    maps = _load_maps(manifest, Path(args.maps), "test")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for e in manifest.split("test"):
        s = metrics.image_score(maps[e.image_id], args.top_fraction)
        rows.append((e.image_id, e.class_id, e.label, s))
    with open(out_dir / "image_scores.csv", "w") as f:
        f.write("image_id,class_id,label,image_score\n")
        for image_id, cid, label, s in rows:
            f.write(f"{image_id},{'' if cid is None else cid},{label},{s!r}\n")

    # shared bin edges across classes so per-class histograms are comparable
    scores = np.array([r[3] for r in rows])
    edges = np.histogram_bin_edges(scores, bins=args.bins)
    with open(out_dir / "histograms.csv", "w") as f:
        f.write("class_id,label,bin_left,bin_right,count\n")
        class_ids = sorted({r[1] for r in rows if r[1] is not None}) or [None]
        for cid in class_ids:
            for label in ("normal", "anomalous"):
                sel = np.array([r[3] for r in rows
                                if (cid is None or r[1] == cid) and r[2] == label])
                counts, _ = np.histogram(sel, bins=edges)
                for left, right, count in zip(edges[:-1], edges[1:], counts):
                    f.write(f"{'' if cid is None else cid},{label},{left!r},{right!r},{count}\n")

    if args.metrics:
        with open(out_dir / "metrics_combined.csv", "w") as f:
            f.write("source," + metrics.MetricsReport.CSV_HEADER + "\n")
            for path in args.metrics:
                with open(path) as src:
                    header = src.readline()
                    for line in src:
                        if line.strip():
                            f.write(f"{Path(path).stem},{line}")
    _write_run_config(out_dir / "run_config.json", args)
    print(f"report -> {out_dir}")
    return 0


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    in_channels, h, w = args.channels, args.grid, args.grid
    worst = 0.0
    for name, (n_conv, n_linear) in heads.STRUCTURES.items():
        cfg = heads.HeadConfig(
            mode="regressor", n_conv=n_conv, n_linear=n_linear,
            hidden_dim=args.hidden_dim, dropout_rate=args.dropout,
            activation=args.activation,
        )
        network = heads.build_head(cfg, in_channels, rng)
        x = rng.normal(size=(1, in_channels, h, w))
        target = rng.normal(size=(1, 2))

        def loss_fn(out, target=target):
            loss, grad = net.smooth_l1(out, target, cfg.alpha)
            return float(loss.sum()), grad

        err = net.grad_check(network, x, loss_fn, seed=args.seed)
        worst = max(worst, err)
        print(f"{name}: max relative error {err:.3e}")
    if worst > args.tolerance:
        print(f"FAIL: worst error {worst:.3e} > {args.tolerance:.1e}", file=sys.stderr)
        return 3
    print(f"all structures within {args.tolerance:.1e}")
    return 0


ABLATION_DROPOUTS = (0.0, 0.25, 0.5, 0.75)
ABLATION_TOP_FRACTIONS = ("max", 0.001, 0.01, 0.02)


def cmd_ablate(args) -> int:
    manifest = read_manifest(Path(args.data) / "manifest.json")
    features = _load_features(manifest, "train")
    train_maps = _load_maps(manifest, Path(args.maps), "train")
    test_maps = _load_maps(manifest, Path(args.maps), "test")
    test_features = _load_features(manifest, "test")
    test_entries = manifest.split("test")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for structure in heads.STRUCTURES:
        for dropout in ABLATION_DROPOUTS:
            head_cfg = heads.HeadConfig(
                mode="regressor",
                n_conv=heads.STRUCTURES[structure][0],
                n_linear=heads.STRUCTURES[structure][1],
                hidden_dim=args.hidden_dim,
                dropout_rate=dropout,
            )
            train_cfg = heads.TrainConfig(iterations=args.iterations, seed=args.seed)
            model = heads.train_regressor(features, train_maps, head_cfg, train_cfg)
            aligned = {
                e.image_id: heads.calibrate_with_regressor(
                    model,
                    ScoreMap(e.image_id, test_maps[e.image_id]),
                    test_features[e.image_id],
                ).values
                for e in test_entries
            }
            for tf in ABLATION_TOP_FRACTIONS:
                raw = metrics.evaluate(manifest, test_maps, top_fraction=tf)[0]
                cal = metrics.evaluate(manifest, aligned, top_fraction=tf)[0]
                rows.append((structure, dropout, tf, raw.i_auroc, cal.i_auroc,
                             raw.i_ap, cal.i_ap))
            print(f"ablate {structure} dropout={dropout}: "
                  f"cada i_auroc {rows[-1][4]:.4f} (raw {rows[-1][3]:.4f})")
    with open(out, "w") as f:
        f.write("structure,dropout,top_fraction,raw_i_auroc,cada_i_auroc,raw_i_ap,cada_i_ap\n")
        for r in rows:
            f.write(",".join(str(v) for v in r) + "\n")
    _write_run_config(out.with_suffix(".config.json"), args)
    print(f"ablation grid ({len(rows)} rows) -> {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="scorealign",
                     description="Multi-class anomaly score distribution alignment")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with SynthConfig fields (overrides flags)")
    p.add_argument("--k-classes", type=int, default=8)
    p.add_argument("--grid-h", type=int, default=16)
    p.add_argument("--grid-w", type=int, default=16)
    p.add_argument("--feat-dim", type=int, default=8)
    p.add_argument("--center-radius", type=float, default=10.0)
    p.add_argument("--spread-min", type=float, default=0.25)
    p.add_argument("--spread-max", type=float, default=4.0)
    p.add_argument("--anomaly-rel-magnitude", type=float, default=3.0)
    p.add_argument("--area-min", type=float, default=0.05)
    p.add_argument("--area-max", type=float, default=0.2)
    p.add_argument("--train-normal", type=int, default=100)
    p.add_argument("--test-normal", type=int, default=20)
    p.add_argument("--test-anomalous", type=int, default=20)
    p.add_argument("--train-noise", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit-base", help="fit the coreset memory bank")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m-per-image", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_base)

    p = sub.add_parser("score", help="nearest-neighbor score maps for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--coreset", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("stats", help="fit per-class score statistics on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train-head", help="train the regressor or classifier head")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", help="score maps dir (required for regressor)")
    p.add_argument("--mode", choices=("regressor", "classifier"), default="regressor")
    p.add_argument("--out", required=True)
    p.add_argument("--structure", choices=sorted(heads.STRUCTURES), default="1conv+2lin")
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--activation", choices=("gelu", "relu"), default="gelu")
    p.add_argument("--target", choices=("meanmax", "meanstd"), default="meanmax")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=5e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("align", help="calibrate score maps")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("oracle", "classifier", "regressor"), required=True)
    p.add_argument("--stats", help="class-stats CSV (oracle / classifier modes)")
    p.add_argument("--model", help="head checkpoint dir (classifier / regressor modes)")
    p.add_argument("--variant", choices=("meanmax", "meanstd"), default="meanmax")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="image- and pixel-level metrics on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-fraction", type=_top_fraction, default=0.01,
                   help="fraction of highest pixels for the image score, or 'max'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate CSVs and per-class score histograms")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", nargs="*", help="metrics CSVs to combine")
    p.add_argument("--top-fraction", type=_top_fraction, default=0.01)
    p.add_argument("--bins", type=int, default=32)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grad-check", help="finite-difference check of every head structure")
    p.add_argument("--channels", type=int, default=6)
    p.add_argument("--grid", type=int, default=6)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.25)
    p.add_argument("--activation", choices=("gelu", "relu"), default="gelu")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="sweep structure x dropout x aggregation")
    p.add_argument("--data", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ManifestError, TensorFormatError, metrics.UndefinedMetricError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except net.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
