"""Command line entry point: gen, train, eval, render, export-oc.

Exit codes: 0 success, 1 usage error, 2 unreadable or malformed input,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import anchors as anc
from .scene import SceneConfig, SchemaError, generate_dataset, load_dataset, read_document, save_dataset, write_document
from .trainer import ABLATIONS, NumericalError, TrainConfig, Trainer

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

METRIC_FIELDS = ("iter", "psnr", "ssim", "mask_iou", "mask_f1", "n_gaussians")
ANCHOR_FIELDS = ("t_star", "sigma2_max", "T_o", "T_b", "T_b2o", "T_o2b", "mode")
OC_FIELDS = ("index", "m", "oc")
MAP_NAMES = ("residual", "beta", "hybrid", "texture", "ocr", "corrected", "oc_pixels")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(v) -> str:
    # repr keeps the shortest round-trip form so reruns compare byte for byte
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, fields, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])
    tmp.replace(path)


def write_column(path: Path, values) -> None:
    path.write_text("".join(f"{_fmt(float(v))}\n" for v in values), encoding="utf-8")


def write_image(path: Path, image) -> None:
    image = np.asarray(image)
    lines = [f"SPLAT1D {len(image)}"] + [" ".join(_fmt(float(c)) for c in px) for px in image]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_image(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != "SPLAT1D":
        raise SchemaError(f"{path}: missing SPLAT1D header")
    width = int(head[1])
    img = np.array([[float(x) for x in ln.split()] for ln in lines[1: 1 + width]])
    if img.shape != (width, 3):
        raise SchemaError(f"{path}: expected {width} rgb rows")
    return img


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_disable(values) -> tuple:
    items = []
    for v in values or ():
        items.extend(x for x in v.split(",") if x)
    unknown = sorted(set(items) - set(ABLATIONS))
    if unknown:
        raise UsageError(f"unknown --disable value(s) {unknown}; choose from {', '.join(ABLATIONS)}")
    return tuple(items)


def _load_trainer(args) -> Trainer:
    dataset = load_dataset(args.dataset)
    return Trainer.from_checkpoint(read_document(args.checkpoint), dataset, threads=args.threads)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = SceneConfig(
        n_background_gaussians=args.gaussians,
        n_views=args.views,
        image_width=args.width,
        distractor_view_fraction=args.fraction,
        distractors_per_view=args.per_view,
        rng_seed=args.seed,
        n_test_views=args.test_views,
        distractor_size=args.distractor_size,
        camera_arc=args.camera_arc,
        camera_cluster=args.camera_cluster,
    )
    out = _out_dir(args.out)
    save_dataset(out / "dataset.json", generate_dataset(cfg))
    return EXIT_OK


def cmd_train(args) -> int:
    disable = _split_disable(args.disable)
    dataset = load_dataset(args.dataset)
    cfg = TrainConfig(
        iterations=args.iters,
        seed=args.seed,
        lambda_s=args.lambda_s,
        lambda4=args.lambda4,
        lambda5=args.lambda5,
        disable=disable,
        eval_every=args.eval_every,
    )
    out = _out_dir(args.out)
    metrics = Path(args.metrics_csv) if args.metrics_csv else out / "metrics.csv"
    trainer = Trainer(dataset, cfg, threads=args.threads)

    def on_eval(t: Trainer, row: dict) -> None:
        write_document(out / "checkpoint.json", t.to_checkpoint())
        write_csv(metrics, METRIC_FIELDS, t.history)

    trainer.train(callback=on_eval)
    renders = _out_dir(out / "renders")
    for j, v in enumerate(dataset.test_views):
        write_image(renders / f"test_{j:03d}.txt", trainer.render_view(v))
    return EXIT_OK


def cmd_eval(args) -> int:
    trainer = _load_trainer(args)
    out = _out_dir(args.out)
    write_csv(out / "metrics.csv", METRIC_FIELDS, [trainer.evaluate_row()])
    if trainer.anchors is not None:
        write_csv(out / "anchors.csv", ANCHOR_FIELDS, [trainer.anchors.to_dict()])
    if args.maps:
        maps_dir = _out_dir(out / "maps")
        for i in range(len(trainer.views)):
            maps = trainer.current_maps(i)
            for name in MAP_NAMES:
                write_column(maps_dir / f"view_{i:03d}_{name}.txt", getattr(maps, name))
    return EXIT_OK


def cmd_render(args) -> int:
    trainer = _load_trainer(args)
    views = trainer.dataset.test_views if args.split == "test" else trainer.views
    if not 0 <= args.view < len(views):
        raise UsageError(f"--view must lie in [0, {len(views) - 1}] for the {args.split} split")
    out = _out_dir(args.out)
    color, oc = trainer.render_view(views[args.view], with_oc=True)
    stem = f"{args.split}_{args.view:03d}"
    write_image(out / f"{stem}.txt", color)
    write_column(out / f"{stem}_oc.txt", oc)
    return EXIT_OK


def cmd_export_oc(args) -> int:
    trainer = _load_trainer(args)
    out = _out_dir(args.out)
    s = trainer.stats
    rows = [{"index": i, "m": int(s.m[i]), "oc": float(s.oc[i])} for i in range(len(s))]
    write_csv(out / "oc.csv", OC_FIELDS, rows)
    maps_dir = _out_dir(out / "oc_maps")
    for i, v in enumerate(trainer.views):
        write_column(maps_dir / f"view_{i:03d}.txt", trainer.render_view(v, with_oc=True)[1])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ocsplat", description="Noise-robust flatland Gaussian splatting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="synthesize a dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=40)
    g.add_argument("--test-views", type=int, default=SceneConfig.n_test_views)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--gaussians", type=int, default=120)
    g.add_argument("--fraction", type=float, default=0.3)
    g.add_argument("--per-view", type=int, default=1)
    g.add_argument("--distractor-size", type=float, default=SceneConfig.distractor_size)
    g.add_argument("--camera-arc", type=float, default=SceneConfig.camera_arc,
                   help="angular extent of the camera ring in radians")
    g.add_argument("--camera-cluster", type=float, default=SceneConfig.camera_cluster,
                   help="fraction of cameras squeezed into one narrow arc")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=TrainConfig.iterations)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lambda-s", type=float, default=TrainConfig.lambda_s)
    t.add_argument("--lambda4", type=float, default=TrainConfig.lambda4)
    t.add_argument("--lambda5", type=float, default=TrainConfig.lambda5)
    t.add_argument("--disable", action="append", metavar="{" + ",".join(ABLATIONS) + "}")
    t.add_argument("--metrics-csv")
    t.add_argument("--eval-every", type=int)
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    for name, func, doc in (
        ("eval", cmd_eval, "metrics, anchors and maps for a checkpoint"),
        ("render", cmd_render, "render one view of a checkpoint"),
        ("export-oc", cmd_export_oc, "per-primitive observation completeness"),
    ):
        c = sub.add_parser(name, help=doc)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--dataset", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--threads", type=int, default=1)
        if name == "eval":
            c.add_argument("--maps", action="store_true", help="also dump per-view assessment maps")
        if name == "render":
            c.add_argument("--view", type=int, required=True)
            c.add_argument("--split", choices=("train", "test"), default="test")
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except anc.InvalidLambda as exc:
        print(f"ocsplat: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SchemaError) as exc:
        print(f"ocsplat: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"ocsplat: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ocsplat: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
