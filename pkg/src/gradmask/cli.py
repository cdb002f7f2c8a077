"""gradmask command line: pretrain, build-mask, finetune, eval, restore, degrade, gradcheck.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
from PIL import Image

from . import persistence, plotting, training
from .gradcheck import gradcheck
from .masking import effective_params
from .tasks import Task
from .unet import UNet
from .weather import from_uint8, make_dataset, to_uint8

log = logging.getLogger("gradmask")

TASK_CHOICES = [t.label for t in Task]


def _config(args) -> persistence.RunConfig:
    return persistence.load_config(args.config) if args.config else persistence.RunConfig()


def _load_ck(args, cfg):
    net = UNet(cfg.model)
    return persistence.load(args.ck, cfg.model, expected_len=net.num_params), net


def _csv_logger(args, out=None):
    out = out or sys.stdout
    rows = []

    def on_epoch(epoch, task, loss):
        rows.append((epoch, task, loss))
        if args.log == "csv":
            print(f"{epoch},{task},{loss!r}", file=out, flush=True)

    if args.log == "csv":
        print("epoch,task,loss", file=out, flush=True)
    return rows, on_epoch


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    train = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    rows, on_epoch = _csv_logger(args)
    store = training.pretrain_base(cfg.model, train, cfg.loss, on_epoch=on_epoch)
    persistence.save(store, args.out, cfg.model)
    if args.loss_plot:
        plotting.plot_loss_curve(rows, args.loss_plot, "joint pre-training")
    return 0


def cmd_build_mask(args) -> int:
    cfg = _config(args)
    store, net = _load_ck(args, cfg)
    fraction = cfg.fraction if args.fraction is None else args.fraction
    batches = cfg.calib_batches if args.batches is None else args.batches
    task = Task.parse(args.task)
    training.build_task_mask(store, cfg.model, task, cfg.train, cfg.loss, fraction, batches,
                             per_layer=args.per_layer or cfg.per_layer)
    persistence.save(store, args.ck, cfg.model)
    m = store.masks[task]
    print(f"{task.label}: masked {m.popcount} of {store.total_len} parameters, gamma={m.gamma!r}")
    if args.plot:
        plotting.plot_mask_layers(store, net.registry, args.plot)
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    store, _ = _load_ck(args, cfg)
    train = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    rows, on_epoch = _csv_logger(args)
    training.finetune_task(store, cfg.model, Task.parse(args.task), train, cfg.loss, on_epoch=on_epoch)
    persistence.save(store, args.ck, cfg.model)
    if args.loss_plot:
        plotting.plot_loss_curve(rows, args.loss_plot, f"masked fine-tuning ({args.task})")
    return 0


def eval_report_text(reports: dict) -> str:
    return "".join(reports[m].to_csv(mode=m, header=(i == 0)) for i, m in enumerate(reports))


def cmd_eval(args) -> int:
    cfg = _config(args)
    store, _ = _load_ck(args, cfg)
    reports = training.evaluate_modes(store, cfg.model, Task.parse(args.task), args.n, args.seed,
                                      cfg.train.image_size, cfg.train.intensity)
    with open(args.out, "w", newline="") as fh:
        fh.write(eval_report_text(reports))
    for mode, rep in reports.items():
        print(f"{args.task},{mode},psnr={rep.mean_psnr:.3f},ssim={rep.mean_ssim:.4f}")
    if not args.no_plot:
        plot_path = args.plot or os.path.splitext(args.out)[0] + ".png"
        plotting.plot_eval(reports, plot_path)
    return 0


def cmd_restore(args) -> int:
    cfg = _config(args)
    store, net = _load_ck(args, cfg)
    task = Task.parse(args.task)
    params = store.base if args.mode == "base" else effective_params(store, task)
    with Image.open(args.input) as im:
        img = from_uint8(np.asarray(im.convert("RGB")))
    out = net.predict(img[None], params)[0]
    Image.fromarray(to_uint8(out)).save(args.out)
    return 0


def cmd_degrade(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    size = (args.size, args.size)
    for i, (deg, clean) in enumerate(make_dataset(args.task, args.n, args.seed, size, args.intensity)):
        stem = os.path.join(args.out, f"{args.task}_{args.seed + i:06d}")
        Image.fromarray(to_uint8(deg)).save(stem + "_degraded.png")
        Image.fromarray(to_uint8(clean)).save(stem + "_clean.png")
    print(f"wrote {args.n} pairs to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    params = None
    if args.ck:
        params = _load_ck(args, cfg)[0].base
    res = gradcheck(cfg.model, cfg.loss, sample=args.sample, seed=args.seed,
                    size=cfg.train.image_size, params=params)
    print(f"checked={res.checked} skipped_kinks={res.skipped_kinks} "
          f"max_rel_err={res.max_rel_err:.3e} tol={args.tol:.0e}")
    if not res.passed(args.tol):
        print(f"error: gradient check failed (max relative error {res.max_rel_err:.3e} "
              f"at parameter {res.worst_index})", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradmask", allow_abbrev=False,
                                     description="Gradient-guided parameter masks for weather restoration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="key=value config file")
        return p

    p = add("pretrain", cmd_pretrain, "jointly train the base model on all tasks")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", choices=["csv", "none"], default="none")
    p.add_argument("--loss-plot")

    p = add("build-mask", cmd_build_mask, "profile gradients and build a task mask")
    p.add_argument("--ck", required=True)
    p.add_argument("--task", required=True, choices=TASK_CHOICES)
    p.add_argument("--fraction", type=float)
    p.add_argument("--batches", type=int)
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--plot", help="write a per-layer mask-fraction figure here")

    p = add("finetune", cmd_finetune, "masked fine-tuning of one task")
    p.add_argument("--ck", required=True)
    p.add_argument("--task", required=True, choices=TASK_CHOICES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", choices=["csv", "none"], default="none")
    p.add_argument("--loss-plot")

    p = add("eval", cmd_eval, "evaluate degraded / base / masked modes")
    p.add_argument("--ck", required=True)
    p.add_argument("--task", required=True, choices=TASK_CHOICES)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=training.EVAL_SEED_DEFAULT)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="figure path (default: next to the CSV)")
    p.add_argument("--no-plot", action="store_true")

    p = add("restore", cmd_restore, "restore one PNG with a task's parameters")
    p.add_argument("--ck", required=True)
    p.add_argument("--task", required=True, choices=TASK_CHOICES)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["masked", "base"], default="masked")

    p = sub.add_parser("degrade", help="dump synthetic degraded/clean PNG pairs", allow_abbrev=False)
    p.set_defaults(fn=cmd_degrade)
    p.add_argument("--task", required=True, choices=TASK_CHOICES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--intensity", type=float, default=0.5)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the network gradient")
    p.add_argument("--sample", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--ck", help="check at a checkpoint's base parameters instead of the init")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes exit 1
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
