"""Command-line interface.

Subcommands: train, explore, importance, decode, eval-attribution,
inspect-metric. Every run writes a run.json manifest capturing the resolved
configuration, the model checksum where applicable, and the output paths.
Reporting commands write a matplotlib figure next to their delimited output.
Exit codes: 0 success, 2 usage or missing file, 1 runtime failure.
"""
import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import (cosine_similarity_eval, feature_importance,
                          importance_heatmap, ImportanceMap, load_ground_truth)
from .data import Dataset, IdxFormatError, load_idx, synthetic_digits, variance_filter
from .explore import (ExplorationConfig, load_trajectory, run_exploration,
                      save_trajectory, simec_delta, simexp_delta)
from .fileio import format_csv, write_pgm, write_text_atomic
from .geometry import eigen_split, pullback_metric
from .interpret import (decode_trajectory, embedding_bounds,
                        prediction_trend_csv, split_predictions)
from .manifest import new_manifest
from .modelio import load_model, model_checksum, save_model
from .network import NetworkError, build_preset, build_tiny_vit, forward, VIT_PRESETS
from .train import TrainingDiverged, train_tiny_vit
from . import reports


class CliError(RuntimeError):
    def __init__(self, tag: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.tag = tag
        self.exit_code = exit_code


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("FIBERWALK_OUTDIR", "fiberwalk-out")
    return Path(root) / command


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("file-not-found", str(p), exit_code=2)
    return p


def _add_dataset_args(parser, prefix="", required=True):
    flag = lambda name: f"--{prefix}{name}"
    parser.add_argument(flag("images"), help="IDX image file")
    parser.add_argument(flag("labels"), help="IDX label file")
    parser.add_argument(flag("synthetic"), type=int, metavar="N",
                        help="use N synthetic digits instead of IDX files")
    parser.add_argument(flag("synthetic-seed"), type=int, default=0)


def _load_dataset(args, prefix="", side=28) -> Dataset | None:
    get = lambda name: getattr(args, (prefix + name).replace("-", "_"))
    if get("synthetic") is not None:
        return synthetic_digits(get("synthetic"), seed=get("synthetic-seed"),
                                side=side, split=prefix.rstrip("-") or "train")
    if get("images") is None:
        return None
    if get("labels") is None:
        raise CliError("usage", f"--{prefix}labels is required with --{prefix}images",
                       exit_code=2)
    return load_idx(_require_file(get("images")), _require_file(get("labels")))


def _pick_image(ds: Dataset, index: int):
    if not 0 <= index < len(ds):
        raise CliError("index-out-of-range",
                       f"--index {index} outside dataset of {len(ds)} items")
    return ds.images[index], int(ds.labels[index])


def _parse_selection(text):
    if text is None:
        return None
    try:
        return tuple(int(t) for t in text.split(",") if t.strip() != "")
    except ValueError as exc:
        raise CliError("usage", f"bad --select list: {text!r}", exit_code=2) from exc


def cmd_train(args) -> int:
    out = _out_dir(args, "train")
    data = _load_dataset(args)
    if data is None:
        raise CliError("usage", "train needs --images/--labels or --synthetic",
                       exit_code=2)
    if args.limit:
        data = data.take(args.limit)
    eval_data = _load_dataset(args, prefix="eval-")
    if args.preset:
        net = build_preset(args.preset, seed=args.init_seed)
    else:
        net = build_tiny_vit(patch_size=args.patch, hidden=args.hidden,
                             layers=args.blocks, heads=args.heads,
                             classes=args.classes, image_side=data.side,
                             seed=args.init_seed)
    config = {
        "preset": args.preset, "epochs": args.epochs, "lr": args.lr,
        "batch": args.batch, "seed": args.seed, "init_seed": args.init_seed,
        "optimizer": args.optimizer, "momentum": args.momentum,
        "limit": args.limit, "train_count": len(data),
        "eval_count": len(eval_data) if eval_data else 0,
        "hyper": net.hyper,
    }
    manifest = new_manifest("train", config, seed=args.seed)
    try:
        report = train_tiny_vit(net, data, epochs=args.epochs, lr=args.lr,
                                batch=args.batch, seed=args.seed,
                                momentum=args.momentum,
                                optimizer=args.optimizer, eval_data=eval_data)
    except TrainingDiverged as exc:
        rep = exc.report
        write_text_atomic(out / "training_log.csv",
                          format_csv(["epoch", "loss"],
                                     [[i + 1, l] for i, l in enumerate(rep.losses)]))
        raise CliError("training-diverged",
                       f"loss became non-finite after epoch {rep.epochs}")
    model_path = save_model(report.network, out / "model.json")
    rows = []
    for i, loss in enumerate(report.losses):
        acc = report.eval_accuracies[i] if i < len(report.eval_accuracies) else ""
        rows.append([i + 1, loss, acc])
    log_path = out / "training_log.csv"
    write_text_atomic(log_path, format_csv(["epoch", "loss", "eval_accuracy"], rows))
    fig_path = reports.loss_figure(report.losses, report.eval_accuracies,
                                   out / "loss.png")
    manifest.model_checksum = model_checksum(model_path)
    manifest.outputs = [str(model_path), str(out / "model.bin"), str(log_path),
                        str(fig_path)]
    manifest.write(out / "run.json")
    acc_txt = f" eval_accuracy={report.eval_accuracy:.4f}" if eval_data else ""
    print(f"trained {args.epochs} epochs in {report.elapsed_seconds:.1f}s; "
          f"train_accuracy={report.train_accuracy:.4f}{acc_txt}")
    print(f"model: {model_path}")
    return 0


def cmd_explore(args) -> int:
    out = _out_dir(args, "explore")
    net = load_model(_require_file(args.model))
    data = _load_dataset(args, side=int(np.sqrt(net.d_in)))
    if data is None:
        raise CliError("usage", "explore needs --images/--labels or --synthetic",
                       exit_code=2)
    image, label = _pick_image(data, args.index)
    delta = None if args.delta in (None, "auto") else float(args.delta)
    selection = _parse_selection(args.select)
    bounds = None
    if args.cap:
        bounds = embedding_bounds(data.images[: args.cap], net)
    cfg = ExplorationConfig(mode=args.mode, max_iters=args.iters,
                            null_tol=args.null_tol, delta=delta,
                            seed=args.seed, selection=selection,
                            record_every=args.record_every, bounds=bounds,
                            project=args.project)
    if args.mode == "baseline":
        start = image
    else:
        start = forward(net, image).at(net.embed_boundary)
    traj = run_exploration(net, start, cfg)
    traj_dir = out / "trajectory"
    save_trajectory(traj, traj_dir, points_format=args.points_format)
    fig_path = reports.drift_figure(traj.iters, traj.outputs,
                                    out / "drift.png", mode=args.mode)
    config = {
        "model": str(args.model), "mode": args.mode, "iters": args.iters,
        "seed": args.seed, "index": args.index, "label": label,
        "select": selection, "delta": args.delta, "null_tol": args.null_tol,
        "record_every": args.record_every, "cap": args.cap,
        "project": args.project, "points_format": args.points_format,
        "dataset": {"synthetic": args.synthetic,
                    "synthetic_seed": args.synthetic_seed,
                    "images": args.images, "labels": args.labels},
    }
    manifest = new_manifest("explore", config, seed=args.seed,
                            model_checksum=model_checksum(args.model))
    manifest.outputs = [str(traj_dir / "trajectory.json"), str(fig_path)]
    manifest.write(out / "run.json")
    status = f"error={traj.error}" if traj.error else "ok"
    print(f"{args.mode}: {traj.n_steps} steps, {len(traj.points)} recorded "
          f"points ({status})")
    print(f"trajectory: {traj_dir}")
    return 0 if traj.error is None else 1


def cmd_importance(args) -> int:
    out = _out_dir(args, "importance")
    net = load_model(_require_file(args.model))
    data = _load_dataset(args, side=int(np.sqrt(net.d_in)))
    if data is None:
        raise CliError("usage", "importance needs --images/--labels or --synthetic",
                       exit_code=2)
    image, label = _pick_image(data, args.index)
    imap = feature_importance(net, image)
    heat = importance_heatmap(imap, normalization=args.normalization)
    write_text_atomic(out / "scores.csv", imap.to_csv())
    write_pgm(out / "heatmap.pgm", heat)
    write_pgm(out / "input.pgm", image)
    fig_path = reports.heatmap_figure(heat, out / "heatmap.png",
                                      title=f"importance (label {label})")
    config = {"model": str(args.model), "index": args.index,
              "normalization": args.normalization,
              "grid": list(imap.grid) if imap.grid else None}
    manifest = new_manifest("importance", config,
                            model_checksum=model_checksum(args.model))
    manifest.outputs = [str(out / "scores.csv"), str(out / "heatmap.pgm"),
                        str(fig_path)]
    manifest.write(out / "run.json")
    top = np.argsort(imap.scores)[::-1][:5]
    print(f"importance over {imap.scores.size} segments "
          f"(grid {imap.grid}); top segments: {list(map(int, top))}")
    return 0


def cmd_decode(args) -> int:
    out = _out_dir(args, "decode")
    net = load_model(_require_file(args.model))
    traj = load_trajectory(_require_file(Path(args.trajectory) / "trajectory.json").parent)
    data = _load_dataset(args, side=int(np.sqrt(net.d_in)))
    if data is None:
        raise CliError("usage", "decode needs --images/--labels or --synthetic",
                       exit_code=2)
    image, label = _pick_image(data, args.index)
    cap = args.cap if args.cap else len(data)
    bounds = embedding_bounds(data.images[:cap], net)
    batch = decode_trajectory(net, traj, image, bounds)
    i_star = int(np.argmax(batch.predictions[0])) if args.i_star is None else args.i_star
    split = split_predictions(batch, i_star)
    write_text_atomic(out / "predictions.csv", prediction_trend_csv(batch, split))
    fig_path = reports.trend_figure(batch.iters, split.istar_values,
                                    split.changed, out / "trend.png", i_star)
    written = []
    if args.image_stride:
        for r in range(0, len(batch), args.image_stride):
            p = out / f"decoded_{batch.iters[r]:05d}.pgm"
            write_pgm(p, batch.images[r])
            written.append(str(p))
    write_pgm(out / "decoded_first.pgm", batch.images[0])
    write_pgm(out / "decoded_last.pgm", batch.images[-1])
    report = variance_filter(batch.images, threshold=args.variance_threshold)
    config = {"model": str(args.model), "trajectory": str(args.trajectory),
              "index": args.index, "cap": cap, "i_star": i_star,
              "image_stride": args.image_stride,
              "variance_threshold": args.variance_threshold}
    manifest = new_manifest("decode", config,
                            model_checksum=model_checksum(args.model))
    manifest.outputs = [str(out / "predictions.csv"), str(fig_path),
                        str(out / "decoded_first.pgm"),
                        str(out / "decoded_last.pgm"), *written]
    manifest.write(out / "run.json")
    print(f"decoded {len(batch)} images (original label {label}, i*={i_star}); "
          f"changed={len(split.changed)} stable={len(split.stable)}; "
          f"variance retention {report.retention:.3f}")
    return 0


def cmd_eval_attribution(args) -> int:
    out = _out_dir(args, "eval-attribution")
    pred = ImportanceMap.from_csv(_require_file(args.pred).read_text())
    sentences = load_ground_truth(_require_file(args.truth))
    if not 0 <= args.sentence < len(sentences):
        raise CliError("index-out-of-range",
                       f"--sentence {args.sentence} outside {len(sentences)} sentences")
    truth = sentences[args.sentence]
    score = cosine_similarity_eval(pred, truth)
    write_text_atomic(out / "score.txt", f"{score!r}\n")
    config = {"pred": str(args.pred), "truth": str(args.truth),
              "sentence": args.sentence}
    manifest = new_manifest("eval-attribution", config)
    manifest.outputs = [str(out / "score.txt")]
    manifest.write(out / "run.json")
    print(f"{score}")
    return 0


def cmd_inspect_metric(args) -> int:
    out = _out_dir(args, "inspect-metric")
    net = load_model(_require_file(args.model))
    data = _load_dataset(args, side=int(np.sqrt(net.d_in)))
    if data is None:
        raise CliError("usage", "inspect-metric needs --images/--labels or --synthetic",
                       exit_code=2)
    image, _ = _pick_image(data, args.index)
    if args.space == "embedding":
        point = forward(net, image).at(net.embed_boundary)
        from_layer = net.embed_boundary
    else:
        point = image
        from_layer = 0
    g = pullback_metric(net, point, from_layer=from_layer)
    dec = eigen_split(g, null_tol=args.null_tol)
    write_text_atomic(out / "eigenvalues.csv", dec.to_csv())
    fig_path = reports.spectrum_figure(dec.eigenvalues, len(dec.null_indices),
                                       out / "spectrum.png")
    config = {"model": str(args.model), "index": args.index,
              "space": args.space, "null_tol": args.null_tol}
    manifest = new_manifest("inspect-metric", config,
                            model_checksum=model_checksum(args.model))
    manifest.outputs = [str(out / "eigenvalues.csv"), str(fig_path)]
    manifest.write(out / "run.json")
    print(f"dim={dec.dim} rank={dec.rank} null={len(dec.null_indices)} "
          f"lambda_max={dec.lambda_max:.6g} "
          f"delta_simec={simec_delta(dec.lambda_max):.6g} "
          f"delta_simexp={simexp_delta(dec.lambda_max):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fiberwalk",
        description="Explore equivalence classes of small transformer networks "
                    "through the pullback metric of their output space.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a tiny ViT and save the model")
    _add_dataset_args(p)
    _add_dataset_args(p, prefix="eval-")
    p.add_argument("--limit", type=int, help="cap the training set size")
    p.add_argument("--preset", choices=sorted(VIT_PRESETS),
                   help="named architecture preset (overrides shape flags)")
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--optimizer", choices=("momentum", "adam"), default="momentum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explore", help="run SiMEC/SiMExp/baseline from an input")
    p.add_argument("--model", required=True)
    _add_dataset_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=("simec", "simexp", "baseline"),
                   default="simec")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--select", help="comma-separated segment indices to update")
    p.add_argument("--delta", default="auto",
                   help="step length; 'auto' uses the spectrum rule "
                        "(baseline: the walk step eta)")
    p.add_argument("--null-tol", type=float, default=1e-6)
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--cap", type=int, default=0,
                   help="cap with embedding bounds of the first N dataset items")
    p.add_argument("--project", choices=("end", "step", "none"), default="end")
    p.add_argument("--points-format", choices=("csv", "f32"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("importance", help="pullback-eigenvalue importance heatmap")
    p.add_argument("--model", required=True)
    _add_dataset_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--normalization", choices=("linear", "log"), default="linear")
    p.add_argument("--out")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("decode", help="decode a trajectory back to images")
    p.add_argument("--model", required=True)
    p.add_argument("--trajectory", required=True,
                   help="directory written by the explore command")
    _add_dataset_args(p)
    p.add_argument("--index", type=int, default=0,
                   help="original image the trajectory started from")
    p.add_argument("--cap", type=int, default=0,
                   help="bound embeddings with the first N dataset items "
                        "(default: all)")
    p.add_argument("--i-star", type=int, default=None,
                   help="class to track (default: argmax of the first decode)")
    p.add_argument("--image-stride", type=int, default=0,
                   help="also write every k-th decoded image as PGM")
    p.add_argument("--variance-threshold", type=float, default=0.01)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-attribution",
                       help="cosine similarity of importance scores vs labels")
    p.add_argument("--pred", required=True, help="scores.csv from importance")
    p.add_argument("--truth", required=True, help="token/score text file")
    p.add_argument("--sentence", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_attribution)

    p = sub.add_parser("inspect-metric", help="eigen-spectrum of the pullback")
    p.add_argument("--model", required=True)
    _add_dataset_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--space", choices=("embedding", "input"), default="embedding")
    p.add_argument("--null-tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_metric)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.tag}: {exc}", file=sys.stderr)
        if exc.exit_code == 2:
            print(f"run 'fiberwalk {args.command} --help' for usage", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file-not-found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (IdxFormatError, NetworkError, ValueError, RuntimeError) as exc:
        tag = type(exc).__name__.lower().replace("error", "-error")
        print(f"error: {tag}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
