"""Command-line interface.

Subcommands: params, train, eval, infer, gradcheck, synth, audit.
Every report has a --json twin; errors exit nonzero with one line on
stderr. HIFORMER_THREADS caps the math-library thread pools (it must be
set before the package first imports numpy).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import params as params_mod
from . import pnm
from .config import build_config
from .errors import HiFormerError
from .gradcheck import run_gradcheck
from .model import HiFormer, build_model
from .nn import init_parameters
from .train import TrainConfig, evaluate_model, predict_masks, train
from .tensor import Tensor, no_grad


def _add_model_flags(p, default_model=None):
    p.add_argument("--model", default=default_model,
                   required=default_model is None,
                   help="preset name or JSON config path")
    p.add_argument("--no-dlf", action="store_true",
                   help="bypass the two-scale fusion module")
    p.add_argument("--backbone", default=None,
                   help="override the CNN backbone kind")
    p.add_argument("--hw", type=int, default=None,
                   help="override the square input side")
    p.add_argument("--k", type=int, default=None,
                   help="override the class count")


def _config_from(args):
    overrides = {"no_dlf": args.no_dlf, "backbone": args.backbone,
                 "hw": args.hw}
    if args.k is not None:
        overrides["num_classes"] = args.k
    return build_config(args.model, **overrides)


def _load_samples(args, cfg):
    """--data is a dataset directory or the literal 'synth'."""
    if args.data == "synth":
        h, w = cfg.input_hw
        if h != w:
            raise HiFormerError("synthetic data needs a square input")
        return data_mod.synth_dataset(args.n, h, cfg.num_classes, seed=args.seed)
    return data_mod.load_dataset(args.data, cfg.num_classes)


def _emit(args, payload, text):
    print(json.dumps(payload, indent=2) if args.json else text)


def cmd_params(args):
    cfg = _config_from(args)
    report = params_mod.count_parameters(HiFormer(cfg))
    _emit(args, {"model": cfg.name, "total": report.total,
                 "per_module": dict(report.per_module)},
          params_mod.format_param_report(cfg.name, report))
    return 0


def cmd_audit(args):
    rows = params_mod.audit(tolerance=args.tolerance)
    payload = [
        {"model": r.name, "measured": r.measured, "reference": r.reference,
         "rel_dev": r.rel_dev, "within": r.within,
         "largest_module": r.largest_module,
         "per_module": dict(r.report.per_module)}
        for r in rows
    ]
    _emit(args, payload, params_mod.format_audit(rows))
    return 0 if all(r.within for r in rows) else 1


def cmd_train(args):
    cfg = _config_from(args)
    if args.data != "synth":
        probe = data_mod.load_dataset(args.data, cfg.num_classes)[0]
        h, w = probe.mask.shape
        if (h, w) != cfg.input_hw:
            cfg = build_config(args.model, no_dlf=args.no_dlf,
                               backbone=args.backbone, hw=h,
                               **({"num_classes": args.k} if args.k else {}))
    samples = _load_samples(args, cfg)
    model = build_model(cfg, seed=args.seed)
    tcfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr,
        momentum=args.momentum, weight_decay=args.weight_decay,
        seed=args.seed, val_frac=args.val_frac,
        use_augment=not args.no_augment, poly_decay=args.poly_decay,
        out=args.out, log_path=args.log, resume=args.resume,
    )
    state, history = train(model, samples, tcfg)
    last = history[-1] if history else {}
    _emit(args, {"best_dice": state.best_dice, "epochs": state.epoch,
                 "steps": state.step, "last": last},
          f"trained {state.epoch} epochs, {state.step} steps; "
          f"best val dice {state.best_dice:.4f}")
    return 0


def cmd_eval(args):
    cfg = _config_from(args)
    samples = data_mod.load_dataset(args.data, cfg.num_classes)
    if args.oracle:
        # Score ground truth against itself: checks the metric path.
        from .metrics import aggregate_metrics
        report = aggregate_metrics(
            ((s.mask, s.mask) for s in samples), cfg.num_classes
        )
    else:
        if not args.ckpt:
            raise HiFormerError("eval needs --ckpt (or --oracle)")
        h, w = samples[0].mask.shape
        if (h, w) != cfg.input_hw:
            cfg = dataclasses.replace(cfg, input_hw=(h, w))
        model = HiFormer(cfg)
        init_parameters(model, 0)
        ckpt_io.load_model(model, args.ckpt, partial=args.partial)
        report = evaluate_model(model, samples, cfg.num_classes, args.batch)
    _emit(args, report.to_dict(), report.format())
    return 0


def cmd_infer(args):
    image = pnm.load_image(args.image)
    h, w = image.shape[1:]
    cfg = _config_from(args)
    if (h, w) != cfg.input_hw:
        cfg = dataclasses.replace(cfg, input_hw=(h, w))
    model = HiFormer(cfg)
    init_parameters(model, 0)
    ckpt_io.load_model(model, args.ckpt, partial=args.partial)
    model.eval()
    with no_grad():
        logits = model(Tensor(image[None]))
    mask = np.argmax(logits.data[0], axis=0).astype(np.int64)
    pnm.save_mask(args.out, mask)
    classes = sorted(int(c) for c in np.unique(mask))
    _emit(args, {"out": args.out, "classes": classes},
          f"wrote {args.out} ({h}x{w}, classes {classes})")
    return 0


def cmd_gradcheck(args):
    report = run_gradcheck(
        model_name=args.model, seed=args.seed, hw=args.hw,
        samples_per_tensor=args.samples, threshold=args.threshold,
        no_dlf=args.no_dlf, backbone=args.backbone,
        **({"num_classes": args.k} if args.k else {}),
    )
    _emit(args, {"passed": report.passed, "threshold": report.threshold,
                 "group_max": report.group_max},
          report.format())
    return 0 if report.passed else 1


def cmd_synth(args):
    samples = data_mod.synth_dataset(args.n, args.hw, args.k, seed=args.seed)
    data_mod.save_dataset(samples, args.out)
    _emit(args, {"out": args.out, "n": len(samples), "hw": args.hw, "k": args.k},
          f"wrote {len(samples)} samples ({args.hw}x{args.hw}, K={args.k}) "
          f"under {args.out}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="hiformer",
        description="segmentation network tooling: parameters, training, "
                    "evaluation, inference, gradient checks, synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="print the parameter report")
    _add_model_flags(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("audit", help="compare all named models to the published totals")
    p.add_argument("--tolerance", type=float, default=params_mod.AUDIT_TOLERANCE)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("train", help="train on a dataset directory or 'synth'")
    _add_model_flags(p)
    p.add_argument("--data", required=True, help="dataset dir or 'synth'")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=200, help="synthetic sample count")
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--poly-decay", action="store_true")
    p.add_argument("--out", default=None, help="best-checkpoint path")
    p.add_argument("--log", default=None, help="JSON-lines metrics log")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_model_flags(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--partial", action="store_true")
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="write the argmax mask for one image")
    _add_model_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PPM/PGM")
    p.add_argument("--out", required=True, help="output PGM mask path")
    p.add_argument("--partial", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_model_flags(p, default_model="hiformer-tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=3,
                   help="entries checked per tensor")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--hw", type=int, default=64)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HiFormerError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
