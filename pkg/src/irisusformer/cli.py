"""``irisusformer`` command line: synth, train, eval, predict, visualize, gradcheck."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import gradcheck
from .checkpoint import CheckpointError
from .config import ABLATIONS, ConfigError, RunConfig
from .data import DataError, generate_sample, load_dataset, load_image, load_mask, read_manifest, save_image, \
    save_mask, write_manifest
from .metrics import evaluate_masks, format_table, per_image_records
from .train import evaluate, infer, load_model, read_log, train
from .viz import parse_crop, plot_loss_curve, plot_metrics, write_visuals

log = logging.getLogger("irisusformer")

EXIT_FAIL = 1     # a check or criterion failed
EXIT_CONFIG = 2   # bad config / arguments
EXIT_IO = 3       # unreadable data or checkpoint


def _load_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.preset(args.preset)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
        cfg.data.synth.seed = args.seed
    if getattr(args, "variant", None):
        cfg.train.variant = args.variant
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    cfg.validate()
    return cfg


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    # precedence: --out, then the environment override, then the config
    if args.out:
        return Path(args.out)
    if os.environ.get(cfgmod.OUT_DIR_ENV):
        return Path(os.environ[cfgmod.OUT_DIR_ENV])
    return Path(cfg.out_dir if cfg is not None else "runs/default")


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    if out.exists() and any(out.iterdir()) and not args.force:
        log.error("%s is not empty (use --force to overwrite)", out)
        return EXIT_CONFIG
    n_train = cfg.data.num_train if args.num_train is None else args.num_train
    n_test = cfg.data.num_test if args.num_test is None else args.num_test
    params = cfg.data.synth
    for split, start, n in (("train", 0, n_train), ("test", n_train, n_test)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        records = []
        for k in range(n):
            image, mask = generate_sample(params, start + k)
            img_p, msk_p = d / f"{split}_{k:04d}.png", d / f"{split}_{k:04d}_mask.png"
            save_image(img_p, image)
            save_mask(msk_p, mask)
            records.append((img_p, msk_p))
        write_manifest(out / f"{split}.tsv", records, split)
    cfg.data.train_manifest = str((out / "train.tsv").resolve())
    cfg.data.test_manifest = str((out / "test.tsv").resolve())
    (out / "config.toml").write_text(cfgmod.dumps(cfg), encoding="utf-8")
    print(f"wrote {n_train} train / {n_test} test samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = args.manifest or cfg.data.train_manifest
    if not manifest:
        log.error("no training manifest: pass --manifest or set data.train_manifest")
        return EXIT_CONFIG
    out = _out_dir(args, cfg)
    trainer, records = train(cfg, manifest, args.iterations, args.batch, out, resume=args.resume)
    (out / "config.toml").write_text(cfgmod.dumps(trainer.cfg), encoding="utf-8")
    if records:
        plot_loss_curve(records, out / "loss_curve.png")
        last = records[-1]
        print(f"iter {last.iter}\tlr {last.lr:.3e}\ttotal {last.total:.6f}\tmean_uncertainty "
              f"{last.mean_uncertainty:.6f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def _manifest_for_eval(args, cfg: RunConfig | None):
    manifest = args.manifest or (cfg.data.test_manifest if cfg is not None else "")
    if not manifest:
        raise ConfigError("no manifest: pass --manifest")
    return read_manifest(manifest, split="test")


def cmd_eval(args) -> int:
    if args.predictions:
        # score stored masks (mask column of a manifest) instead of running a model
        cfg = None
        manifest = _manifest_for_eval(args, cfg)
        preds = read_manifest(args.predictions)
        if len(preds) != len(manifest):
            raise DataError(f"{len(preds)} predictions for {len(manifest)} ground-truth masks")
        _, masks = load_dataset(manifest)
        pred = np.stack([load_mask(m) for _, m in preds.records])
        report = evaluate_masks(list(pred), list(masks), [p.name for p, _ in manifest.records], args.pooled)
    else:
        if not args.checkpoint:
            raise ConfigError("pass a checkpoint or --predictions")
        model, cfg = load_model(args.checkpoint)
        manifest = _manifest_for_eval(args, cfg)
        images, masks = load_dataset(manifest, cfg.model.in_channels)
        report = evaluate(model, images, masks, [p.name for p, _ in manifest.records], pooled=args.pooled)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(report)
    (out / "metrics.tsv").write_text(per_image_records(report), encoding="utf-8")
    (out / "metrics.txt").write_text(table, encoding="utf-8")
    plot_metrics(report, out / "metrics.png")
    print(table, end="")
    return 0


def cmd_predict(args) -> int:
    model, cfg = load_model(args.checkpoint)
    if args.image:
        paths = [Path(p) for p in args.image]
    else:
        paths = [p for p, _ in _manifest_for_eval(args, cfg).records]
    images = np.stack([load_image(p, cfg.model.in_channels) for p in paths])
    variant = args.variant or cfg.train.variant
    res = infer(model, images, variant=variant)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    lines, records = ["image\tmask\tmean_uncertainty"], []
    for p, m, u in zip(paths, res.masks, res.uncertainty):
        dst = out / f"{p.stem}_pred.png"
        save_mask(dst, m.astype(np.uint8))
        records.append((p.resolve(), dst))
        lines.append(f"{p}\t{dst.name}\t{float(u.mean())!r}")
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    # plain image<TAB>mask manifest, usable as ``eval --predictions``
    write_manifest(out / "pred_manifest.tsv", records, "pred")
    print(f"wrote {len(paths)} predicted masks to {out}")
    return 0


def cmd_visualize(args) -> int:
    model, cfg = load_model(args.checkpoint)
    if args.comparison and not args.mask:
        log.error("a comparison map needs --mask")
        return EXIT_CONFIG
    image = load_image(args.image, cfg.model.in_channels)
    gt = load_mask(args.mask) if args.mask else None
    box = parse_crop(args.crop) if args.crop else None
    res = infer(model, image[None], variant=args.variant or cfg.train.variant)
    out = _out_dir(args, cfg)
    written = write_visuals(out, Path(args.image).stem, image, res.masks[0] if gt is not None else None, gt,
                            res.uncertainty[0], args.vmax, box, args.zoom)
    for key, path in written.items():
        print(f"{key}\t{path}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.only or None
    unknown = sorted(set(names or []) - set(gradcheck.REGISTRY))
    if unknown:
        log.error("unknown check(s): %s", ", ".join(unknown))
        return EXIT_CONFIG
    results = gradcheck.run_suite(names, seed=args.seed or 0)
    report = gradcheck.format_report(results)
    print(report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(report + "\n", encoding="utf-8")
    return 0 if all(r.passed for r in results) else EXIT_FAIL


def cmd_plot_log(args) -> int:
    plot_loss_curve(read_log(args.log), args.output)
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irisusformer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
        if seed:
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help=f"output directory (overrides ${cfgmod.OUT_DIR_ENV} and the config)")

    sp = sub.add_parser("synth", help="write a synthetic train/test dataset with manifests")
    common(sp)
    sp.add_argument("--num-train", type=int)
    sp.add_argument("--num-test", type=int)
    sp.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp.add_argument("--variant", choices=("normalized", "literal"))
    sp.add_argument("--resume", metavar="CHECKPOINT")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="E1/F1/mIoU/Acc on a manifest")
    sp.add_argument("checkpoint", nargs="?")
    sp.add_argument("--manifest")
    sp.add_argument("--predictions", help="manifest whose mask column holds predicted masks")
    sp.add_argument("--pooled", action="store_true", help="pool counts over images before the ratios")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write predicted masks")
    sp.add_argument("checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--image", nargs="+")
    sp.add_argument("--variant", choices=("normalized", "literal"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("visualize", help="comparison map and uncertainty heatmap for one image")
    sp.add_argument("checkpoint")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--comparison", action="store_true", help="require the comparison map (needs --mask)")
    sp.add_argument("--crop", help="x,y,w,h region to enlarge")
    sp.add_argument("--zoom", type=int, default=4)
    sp.add_argument("--vmax", type=float, help="absolute heatmap ceiling instead of the per-image max")
    sp.add_argument("--variant", choices=("normalized", "literal"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op, block and loss")
    sp.add_argument("--only", nargs="+", metavar="NAME")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("plot-log", help="render a training log as a loss curve")
    sp.add_argument("log")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_plot_log)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        # DataError / CheckpointError / crop and shape errors
        kind = "data" if isinstance(exc, (DataError, CheckpointError)) else "error"
        log.error("%s: %s", kind, exc)
        return EXIT_IO if kind == "data" else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
