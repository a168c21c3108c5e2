"""Command-line surface: dataset synthesis, training, evaluation,
inference with overlays, and PR-curve plotting.

Exit codes: 0 success, 2 usage/configuration/data error, 3 training
divergence. The MITODET_OUT and MITODET_SEED environment variables supply
defaults for --out and --seed where those flags are optional.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .boxgeom import CLASS_NAMES
from .config import RunConfig, load_run_config, parse_run_config
from .data import (LABELED_SOURCE, LABELED_TARGET, SynthSpec, load_dataset,
                   load_image, records_for_split, save_image, split_dataset,
                   synth_dataset)
from .engine import (EvalReport, TrainConfig, build_model_from_checkpoint,
                     evaluate, evaluate_detections, infer, train)
from .errors import CheckpointError, ConfigError, DatasetError, DivergenceError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

# overlay colors per class id (hard_negative, mitotic_figure)
_BOX_COLORS = ((60, 120, 255), (255, 40, 40))


def _env_default(var: str, fallback=None):
    return os.environ.get(var, fallback)


def _dataset_checksum(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def cmd_synth(args) -> int:
    if args.out is None:
        raise ConfigError("--out is required (or set MITODET_OUT)")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory not writable: {out} ({e})") from e
    if args.domains < 1:
        raise ConfigError("--domains must be >= 1")
    if args.domains == 1:
        print("warning: single-domain dataset; the domain loss is degenerate",
              file=sys.stderr)
        roles = (LABELED_SOURCE,)
    else:
        # the last domain acts as the held-out scanner
        roles = (LABELED_SOURCE,) * (args.domains - 1) + (LABELED_TARGET,)
    spec = SynthSpec(num_domains=args.domains, images_per_domain=args.images,
                     patch_size=args.size, seed=args.seed, roles=roles)
    table, records = synth_dataset(spec, out)
    print(f"wrote {len(records)} images across {len(table)} domains to {out}")
    print(f"dataset checksum: {_dataset_checksum(out)}")
    return EXIT_OK


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_run_config(path)


def _prepare_records(cfg: RunConfig, manifest: str):
    table, records = load_dataset(manifest, point_box_size=cfg.point_box_size)
    records = split_dataset(records, table, cfg.split_fractions, seed=cfg.split_seed)
    return table, records


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    table, records = _prepare_records(cfg, args.data)
    training_ids = table.training_ids(cfg.include_unlabeled)
    if len(training_ids) < 2:
        raise ConfigError(f"need at least 2 training domains, found {len(training_ids)} "
                          "(labeled_target domains never train)")
    model_cfg = cfg.to_model_config(num_domains=len(training_ids))
    train_cfg = TrainConfig(
        batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        max_steps=cfg.max_steps, seed=cfg.seed, lambda1=cfg.lambda1,
        lambda2=cfg.lambda2, eval_interval=cfg.eval_interval,
        checkpoint_interval=cfg.checkpoint_interval,
        include_unlabeled=cfg.include_unlabeled, grl_strength=cfg.grl_strength,
        focal_alpha=cfg.focal_alpha, focal_gamma=cfg.focal_gamma,
        smooth_l1_beta=cfg.smooth_l1_beta, pos_threshold=cfg.pos_threshold,
        neg_threshold=cfg.neg_threshold, lr_schedule=cfg.lr_schedule)
    echo = {"run": cfg.to_dict(), "training_domain_ids": training_ids}
    result = train(model_cfg, train_cfg, table, records, out_dir=args.out,
                   resume_from=args.resume, config_echo=echo,
                   extractor_weights=cfg.extractor_weights or None)
    final = result.log.rows[-1].total if result.log.rows else float("nan")
    print(f"trained {len(result.log.rows)} steps; final total loss {final:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _report_from_checkpoint(args, oracle: bool) -> tuple[EvalReport, RunConfig]:
    model, data = build_model_from_checkpoint(args.ckpt)
    cfg = parse_run_config(data.config_echo.get("run", {}))
    table, records = _prepare_records(cfg, args.data)
    split_records = records_for_split(records, args.split)
    if not split_records:
        raise ConfigError(f"split '{args.split}' is empty")
    if oracle:
        # replay ground truth as perfect detections (self-check fixture)
        from .boxgeom import Detection
        dets = [[Detection(a.box, a.class_id, 1.0) for a in r.annotations]
                for r in split_records]
        report = evaluate_detections(dets, split_records, iou_threshold=cfg.eval_iou)
    else:
        report = evaluate(model, split_records, iou_threshold=cfg.eval_iou,
                          nms_iou=cfg.nms_iou, score_floor=cfg.score_floor,
                          max_detections=cfg.max_detections)
    return report, cfg


def cmd_evaluate(args) -> int:
    report, _ = _report_from_checkpoint(args, oracle=args.oracle)
    report.write_metrics_csv(args.out)
    if args.pr:
        report.write_pr_csv(args.pr)
    for cls in sorted(report.ap):
        c = report.counts[cls]
        print(f"{CLASS_NAMES[cls]}: AP={report.ap[cls]:.4f} "
              f"tp={c['tp']} fp={c['fp']} fn={c['fn']}")
    print(f"mAP={report.m_ap:.4f} over {report.num_images} images")
    if report.per_domain_ap:
        for dom, aps in sorted(report.per_domain_ap.items()):
            pretty = " ".join(f"{CLASS_NAMES[c]}={v:.3f}" for c, v in sorted(aps.items()))
            print(f"  domain {dom}: {pretty}")
    return EXIT_OK


def _draw_overlay(image: np.ndarray, dets) -> "PIL.Image.Image":
    from PIL import Image, ImageDraw
    img = Image.fromarray(np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for d in dets:
        color = _BOX_COLORS[d.class_id]
        draw.rectangle([d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max],
                       outline=color, width=1)
        draw.text((d.box.x_min + 1, max(0.0, d.box.y_min - 9)),
                  f"{d.score:.2f}", fill=color)
    return img


def cmd_infer(args) -> int:
    model, data = build_model_from_checkpoint(args.ckpt)
    cfg = parse_run_config(data.config_echo.get("run", {}))
    img_path = Path(args.image)
    if not img_path.exists():
        raise ConfigError(f"image not found: {img_path}")
    try:
        image = load_image(img_path)
    except Exception as e:
        raise ConfigError(f"cannot read image {img_path}: {e}") from e
    dets, homogenized = infer(model, image, nms_iou=cfg.nms_iou,
                              score_floor=cfg.score_floor,
                              max_detections=cfg.max_detections)
    _draw_overlay(image, dets).save(args.out, format="PNG")
    if args.json:
        doc = {"image": str(img_path), "detections": [
            {"x_min": d.box.x_min, "y_min": d.box.y_min,
             "x_max": d.box.x_max, "y_max": d.box.y_max,
             "class": CLASS_NAMES[d.class_id], "score": d.score} for d in dets]}
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")
    if args.homogenized:
        save_image(args.homogenized, homogenized)
    print(f"{len(dets)} detections -> {args.out}")
    return EXIT_OK


def _read_pr_csv(path: Path) -> dict[str, list[tuple[float, float, float]]]:
    lines = path.read_text().splitlines()
    if not lines or lines[0].split(",") != ["class", "score_threshold",
                                            "precision", "recall"]:
        raise ConfigError(f"{path}: not a PR CSV (bad header)")
    curves: dict[str, list] = {name: [] for name in CLASS_NAMES}
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4 or parts[0] not in CLASS_NAMES:
            raise ConfigError(f"{path}:{ln}: malformed PR row {line!r}")
        try:
            thr, prec, rec = (float(v) for v in parts[1:])
        except ValueError as e:
            raise ConfigError(f"{path}:{ln}: malformed PR row {line!r}") from e
        curves[parts[0]].append((thr, prec, rec))
    return curves


def cmd_plot_pr(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "mitodet"

    curves = _read_pr_csv(Path(args.pr_csv))
    fig, ax = plt.subplots(figsize=(5, 5))
    colors = {"hard_negative": "tab:blue", "mitotic_figure": "tab:red"}
    for name, pts in curves.items():
        if not pts:
            print(f"warning: no detections for class {name}; degenerate curve",
                  file=sys.stderr)
            ax.plot([0.0], [0.0], marker="x", color=colors[name],
                    label=f"{name} (empty)")
            continue
        pts = sorted(pts, key=lambda p: p[2])
        ax.plot([p[2] for p in pts], [p[1] for p in pts], marker=".",
                color=colors[name], label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Date": None} if str(args.out).endswith(".svg")
                else None)
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mitodet",
        description="Domain-homogenized mitosis detection pipeline",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", default=_env_default("MITODET_OUT"),
                   help="output directory (env MITODET_OUT)")
    p.add_argument("--seed", type=int,
                   default=int(_env_default("MITODET_SEED", "42")),
                   help="generator seed (env MITODET_SEED)")
    p.add_argument("--domains", type=int, default=4,
                   help="number of domains; the last one is held out as the "
                        "unseen scanner when more than one")
    p.add_argument("--images", type=int, default=50, help="images per domain")
    p.add_argument("--size", type=int, default=64, help="square patch size in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the end-to-end pipeline",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", default=None,
                   help="flat JSON run config (defaults apply when omitted)")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", default=_env_default("MITODET_OUT"),
                   help="output directory for checkpoints and logs (env MITODET_OUT)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="which split to evaluate")
    p.add_argument("--out", default="metrics.csv", help="metrics CSV path")
    p.add_argument("--pr", default=None, help="optional PR-curve CSV path")
    p.add_argument("--oracle", action="store_true",
                   help="replay ground-truth boxes as perfect detections "
                        "(metric self-check fixture)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="run detection on one image",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="input raster image")
    p.add_argument("--out", default="overlay.png", help="overlay PNG path")
    p.add_argument("--json", default=None, help="optional detections JSON path")
    p.add_argument("--homogenized", default=None,
                   help="optional path for the homogenized image")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot-pr", help="plot PR curves from an evaluation CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("pr_csv", help="PR CSV written by evaluate")
    p.add_argument("--out", default="pr.svg", help="output SVG (or PNG) path")
    p.set_defaults(func=cmd_plot_pr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (ConfigError, DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
