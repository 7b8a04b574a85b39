"""Command-line entry point: ``specdet <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from . import tensor_core as tc
from .config import ConfigError, TrainConfig, load_config
from .data import DataError, PairedSample, SynthConfig, load_dataset, load_sample, read_pnm, split_train_val, \
    synthesize, write_pnm
from .detect_head import NumericalError
from .metrics import write_detections_csv, write_pr_curves, write_report
from .model import Detector
from .train import evaluate_model, train

logger = logging.getLogger("specdet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=out_default, help="output directory")


def _ablation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-msfpm", action="store_true", help="fixed 0.5/0.5 modality average instead of the gate")
    p.add_argument("--no-irfdm", action="store_true", help="skip decoupling (removes both auxiliary losses)")
    p.add_argument("--no-cl", action="store_true", help="drop the triplet losses")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specdet", description="Multispectral pedestrian detection on paired RGB/IR images.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    _common(p, "data/synth")

    p = sub.add_parser("train", help="train on a dataset root")
    p.add_argument("dataset", type=Path)
    _common(p, "runs/train")
    _ablation_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    _common(p, None)

    p = sub.add_parser("detect", help="run detection on one visible/infrared pair")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("visible", type=Path)
    p.add_argument("infrared", type=Path)
    p.add_argument("--annotate", action="store_true", help="also write the visible image with boxes burned in")
    _common(p, "runs/detect")

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-features", help="write decoupled embeddings as CSV")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path)
    _common(p, "runs/features")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "no_msfpm", False):
        overrides["use_msfpm"] = False
    if getattr(args, "no_irfdm", False):
        overrides["use_irfdm"] = False
    if getattr(args, "no_cl", False):
        overrides["use_cl"] = False
    return load_config(args.config, TrainConfig, **overrides)


def _load_checkpoint(path: Path) -> Detector:
    if not (path / "manifest.json").exists():
        raise DataError(f"no checkpoint at {path}")
    try:
        model, _ = Detector.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"unreadable checkpoint at {path}: {exc}") from exc
    return model


def _require_dataset(root: Path) -> list[PairedSample]:
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    return load_dataset(root)


def cmd_synth(args) -> int:
    cfg = load_config(args.config, SynthConfig, seed=args.seed)
    ids = synthesize(cfg, args.out)
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    samples = _require_dataset(args.dataset)
    if not samples:
        raise DataError(f"no samples under {args.dataset}")
    _, rows = train(cfg, samples, out_dir=args.out)
    last = rows[-1]
    print(f"trained {cfg.epochs} epochs; final loss {last['l_total']:.4f}, val mAP@50 {last['val_map50']:.4f}")
    print(f"checkpoint: {args.out / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    samples = _require_dataset(args.dataset)
    if args.split != "all":
        train_set, val_set = split_train_val(samples, model.cfg.val_fraction)
        samples = train_set if args.split == "train" else val_set
    if not samples:
        raise DataError(f"no samples to evaluate in {args.dataset} ({args.split} split)")
    report = evaluate_model(model, samples)
    print(f"images {report.num_images}  mAP@50 {report.map50:.4f}  mAP@[.5:.95] {report.map:.4f}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_report(report, args.out / "report.txt")
        write_pr_curves(report, args.out / "pr_curves.csv")
    return EXIT_OK


def draw_boxes(image: np.ndarray, boxes, color=(255, 0, 0)) -> np.ndarray:
    """Burn one-pixel outlines of normalized ``(cx, cy, w, h)`` boxes into an ``H x W x 3`` uint8 image."""
    out = image.copy()
    h, w = out.shape[:2]
    for cx, cy, bw, bh in boxes:
        x0 = int(np.clip(round((cx - bw / 2) * w), 0, w - 1))
        x1 = int(np.clip(round((cx + bw / 2) * w) - 1, 0, w - 1))
        y0 = int(np.clip(round((cy - bh / 2) * h), 0, h - 1))
        y1 = int(np.clip(round((cy + bh / 2) * h) - 1, 0, h - 1))
        out[y0, x0 : x1 + 1] = color
        out[y1, x0 : x1 + 1] = color
        out[y0 : y1 + 1, x0] = color
        out[y0 : y1 + 1, x1] = color
    return out


def cmd_detect(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    for path in (args.visible, args.infrared):
        if not path.exists():
            raise DataError(f"image {path} does not exist")
    sample = load_sample(args.visible, args.infrared, sample_id=args.visible.stem)
    dets = model.detect([sample])[0]
    args.out.mkdir(parents=True, exist_ok=True)
    write_detections_csv(args.out / "detections.csv", {sample.id: [d.as_tuple() for d in dets]})
    if args.annotate:
        vis = read_pnm(args.visible)
        write_pnm(args.out / f"{sample.id}_annotated.ppm", draw_boxes(vis, [d.box for d in dets]))
    print(f"{len(dets)} detections written to {args.out / 'detections.csv'}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck.run_suite(trials=args.trials, seed=args.seed)
    print(gradcheck.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


EMBED_ROLES = (("visible", "human"), ("visible", "background"), ("infrared", "human"), ("infrared", "background"))


def export_rows(model: Detector, samples) -> list[list]:
    rows = []
    offset = 0
    for vis, ir in model.embeddings(samples):
        by = {"visible": vis, "infrared": ir}
        n = vis.emb_h.shape[0]
        for i in range(n):
            sid = samples[offset + i].id
            for modality, role in EMBED_ROLES:
                d = by[modality]
                emb = (d.emb_h if role == "human" else d.emb_b).data[i]
                rows.append([sid, modality, role, *(f"{float(v):.8f}" for v in emb)])
        offset += n
    return rows


def cmd_export_features(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    samples = _require_dataset(args.dataset)
    if not samples:
        raise DataError(f"no samples under {args.dataset}")
    rows = export_rows(model, samples)
    args.out.mkdir(parents=True, exist_ok=True)
    dim = len(rows[0]) - 3
    with open(args.out / "embeddings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "modality", "role", *(f"e{j}" for j in range(dim))])
        writer.writerows(rows)
    # same rows, same order, as one (4N, dim) float32 tensor
    matrix = np.array([[float(v) for v in r[3:]] for r in rows], dtype=np.float32)
    tc.save_tnsr(args.out / "embeddings.tnsr", [matrix])
    print(f"{len(rows)} embeddings written to {args.out / 'embeddings.csv'} and embeddings.tnsr")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "grad-check": cmd_grad_check,
    "export-features": cmd_export_features,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"specdet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"specdet: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, gradcheck.EmptyRegistryError) as exc:
        print(f"specdet: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
