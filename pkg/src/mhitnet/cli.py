"""Command-line entry point: ``python -m mhitnet <command> ...``.

Exit status is 0 on success, 1 when a check or validation fails, and 2 on
usage errors (argparse's own convention).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, ablation_label
from .data import generate_synthetic, load_dataset, minmax_normalize, read_pgm, save_dataset, write_pgm
from .errors import MhitError
from .gradsuite import run_suite
from .metrics import evaluate_predictions, format_table, fps_benchmark, fps_verdicts
from .network import EncoderSpec, MhitNet, NetConfig
from .tensor import Tensor, no_grad
from .training import fit, predict

log = logging.getLogger("mhitnet")

# Backbone first, single modules, pairs, then the full model
ABLATION_ORDER = (
    (False, False, False),
    (True, False, False), (False, True, False), (False, False, True),
    (True, True, False), (True, False, True), (False, True, True),
    (True, True, True),
)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.override(args.set)
    return cfg


def _datasets(cfg: RunConfig):
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        return load_dataset(root / "train"), load_dataset(root / "val")
    return generate_synthetic(cfg.synthetic_spec())


def _train(cfg: RunConfig, flags=None, echo=True):
    if flags is not None:
        cfg = cfg.with_modules(*flags)
    train, val = _datasets(cfg)
    net = MhitNet(cfg.net_config(), seed=cfg.seed)

    def report(rec):
        if echo:
            print(f"epoch {rec.epoch:3d}  lr {rec.lr:.3g}  loss {rec.loss:.4f}  val_dice {rec.val_dice:.4f}", flush=True)

    history = fit(net, train, cfg.epochs, cfg.adam_config(), cfg.loss_config(), seed=cfg.seed,
                  batch_size=cfg.batch_size, val=val, threshold=cfg.confidence_threshold,
                  flips=cfg.flips, on_epoch=report)
    return net, history, val


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net, history, _ = _train(cfg)
    save_checkpoint(out / "model.ckpt", net)
    history.write_csv(out / "train_log.csv")
    (out / "config.txt").write_text(cfg.to_text())
    print(f"final val_dice {history.records[-1].val_dice:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'train_log.csv'}")
    return 0


def _restore(cfg: RunConfig, path) -> MhitNet:
    net = MhitNet(cfg.net_config(), seed=cfg.seed)
    load_checkpoint(path, net)
    return net


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    net = _restore(cfg, args.checkpoint)
    _, val = _datasets(cfg)
    report = evaluate_predictions(predict(net, val.images), val.masks, cfg.eval_config())
    if args.fps:
        report.fps = fps_benchmark(net, (1, 1, cfg.image_size, cfg.image_size))
    label = ablation_label(cfg.skip_flags()[0]) if len(set(cfg.skip_flags())) == 1 else "custom"
    print(format_table([(label, report)]))
    if args.fps:
        print(f"FPS {report.fps:.1f}")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    net = _restore(cfg, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        images = np.stack([read_pgm(p).astype(np.float32) / 255.0 for p in args.input])[:, None]
        names = [Path(p).stem for p in args.input]
    else:
        _, val = _datasets(cfg)
        images = val.images
        names = [f"{i:04d}" for i in range(len(images))]
    net.eval()
    thr = cfg.confidence_threshold
    with no_grad():
        for name, img in zip(names, images):
            taps = {}
            prob = net(Tensor(img[None]), taps).data[0, 0]
            write_pgm(out / f"{name}_mask.pgm", (prob >= thr).astype(np.uint8) * 255)
            for key in sorted(taps):
                amap = np.abs(taps[key].data[0]).mean(axis=0)
                write_pgm(out / f"{name}_attn_{key}.pgm", minmax_normalize(amap))
    print(f"wrote {len(names)} mask(s) and attention maps to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(eps=args.eps, seed=args.seed)
    for r in results:
        status = "pass" if r.passed else "FAIL"
        extra = f", {r.skipped}/{r.probes} probes on kinks" if r.skipped else ""
        print(f"{status}  {r.name:42s} rel_err {r.error:.3e} (tol {r.tolerance:g}{extra})")
    worst = max(r.error for r in results)
    print(f"max relative error: {worst:.3e}")
    return 0 if all(r.passed for r in results) else 1


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    net_cfg = NetConfig(EncoderSpec(blocks_per_stage=cfg.blocks, width=args.width), args.size,
                        cfg.heads, cfg.hca_reduction, cfg.paa_downsample, cfg.skip_flags())
    net = MhitNet(net_cfg, seed=cfg.seed)
    fps = fps_benchmark(net, (1, 1, args.size, args.size), warmup=args.warmup, iters=args.iters)
    print(f"input {args.size}x{args.size}, width {args.width:g}: {fps:.2f} FPS")
    for line in fps_verdicts(fps):
        print(line)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    rows = []
    for flags in ABLATION_ORDER:
        label = ablation_label(flags)
        print(f"training {label}", flush=True)
        net, _, val = _train(cfg, flags, echo=False)
        rows.append((label, evaluate_predictions(predict(net, val.images), val.masks, cfg.eval_config())))
    print(format_table(rows, ("AC", "DS")))
    if args.csv:
        with open(args.csv, "w") as fh:
            header, *_ = rows[0][1].to_csv().splitlines()
            fh.write("label," + header + "\n")
            for label, rep in rows:
                fh.write(f"{label}," + rep.to_csv().splitlines()[1] + "\n")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    train, val = generate_synthetic(cfg.synthetic_spec())
    out = Path(args.out)
    save_dataset(train, out / "train")
    save_dataset(val, out / "val")
    print(f"wrote {len(train)} training and {len(val)} validation pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhitnet", description="Segmentation network with multi-scale skip attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_, checkpoint=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a model, write checkpoint and CSV log")
    p.add_argument("--out", help="output directory (default: out_dir from the config)")

    p = add("eval", cmd_eval, "evaluate a checkpoint on the validation set", checkpoint=True)
    p.add_argument("--csv", help="also write the metric row as CSV")
    p.add_argument("--fps", action="store_true", help="include a forward-pass FPS measurement")

    p = add("predict", cmd_predict, "write mask and attention-map PGMs", checkpoint=True)
    p.add_argument("--input", nargs="+", help="PGM images (default: the validation set)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = add("bench", cmd_bench, "measure forward passes per second")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--width", type=float, default=0.25)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=10)

    p = add("ablate", cmd_ablate, "train and evaluate all 8 module combinations")
    p.add_argument("--csv", help="also write all rows as CSV")

    p = add("gen-data", cmd_gen_data, "write the synthetic dataset as PGM files")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint is not None and not Path(checkpoint).is_file():
        parser.error(f"checkpoint not found: {checkpoint}")
    config = getattr(args, "config", None)
    if config is not None and not Path(config).is_file():
        parser.error(f"config file not found: {config}")
    try:
        return args.func(args)
    except (MhitError, FileNotFoundError) as exc:
        print(f"mhitnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
