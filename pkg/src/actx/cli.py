"""Command-line entry point: ``actx <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import io, metrics, plotting
from .model import init_params, predict, train
from .synth import generate

log = logging.getLogger("actx")


class CLIError(Exception):
    pass


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CLIError(f"{what} {path} is not a directory")
    return p


def cmd_synth_gen(args) -> int:
    cfg = io.load_run_config(args.config)
    groups = generate(cfg.synth)
    out = Path(args.out)
    if cfg.test_fraction > 0:
        n_test = int(round(cfg.test_fraction * len(groups)))
        if not 0 < n_test < len(groups):
            raise CLIError(f"test_fraction {cfg.test_fraction} leaves an empty split")
        io.save_dataset(groups[:-n_test], out / "train")
        io.save_dataset(groups[-n_test:], out / "test")
        print(f"train,{len(groups) - n_test},{out / 'train'}")
        print(f"test,{n_test},{out / 'test'}")
    else:
        io.save_dataset(groups, out)
        print(f"all,{len(groups)},{out}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gc.run(seed=args.seed, instances=args.instances)
    lines = gc.format_report(reports)
    print("\n".join(lines))
    return 0 if max(r.max_error for r in reports) <= gc.TOLERANCE else 1


def cmd_train(args) -> int:
    cfg = io.load_run_config(args.config)
    data = io.load_dataset(_require_dir(args.data, "--data"))
    if not data:
        raise CLIError("dataset is empty")
    D_in = data[0].action.shape[3]
    K = 1 + max(g.label for g in data)
    if cfg.backbone:
        params = init_params(cfg.backbone, K, seed=cfg.train.seed, backbone_in=D_in)
    else:
        params = init_params(D_in, K, seed=cfg.train.seed)
    params, history = train(data, cfg.train, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = io.save_checkpoint(params, cfg.train, out)
    io.write_history(history, out / "history.csv")
    plotting.plot_history(history, out / "loss_curve.png")
    print(f"checkpoint,{ckpt}")
    print(f"history,{out / 'history.csv'}")
    print(f"final_loss,{history[-1]['loss']:.6f}" if history else "final_loss,nan")
    return 0


def evaluate(params, hyper, data) -> dict:
    scores, labels, ious = [], [], []
    for g in data:
        s, maps = predict(g.action, params, hyper)
        scores.append(s)
        labels.append(g.label)
        if g.truth_mask is not None:
            ious.append(metrics.attention_iou(maps["s_act"], g.truth_mask))
    scores = np.array(scores)
    labels = np.array(labels)
    mAP, per_class = metrics.mean_ap(scores, labels)
    return {
        "accuracy": metrics.accuracy(scores, labels),
        "per_class_ap": per_class,
        "mAP": mAP,
        "mean_iou": float(np.mean(ious)) if ious else float("nan"),
    }


def cmd_eval(args) -> int:
    params, cfg = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(_require_dir(args.data, "--data"))
    res = evaluate(params, cfg.hyper, data)
    lines = ["metric,value", f"accuracy,{res['accuracy']:.6f}"]
    lines += [f"ap_class_{k},{ap:.6f}" for k, ap in enumerate(res["per_class_ap"])]
    lines += [f"mAP,{res['mAP']:.6f}", f"mean_iou,{res['mean_iou']:.6f}"]
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text("\n".join(lines) + "\n")
        plotting.plot_ap(res["per_class_ap"], out / "ap.png")
    return 0


def cmd_export_attention(args) -> int:
    params, cfg = io.load_checkpoint(args.checkpoint)
    F = io.read_tensor(args.input)
    if F.ndim == 3:
        # H×W×D still image: a one-frame clip
        F = F[None]
    if F.ndim != 4:
        raise CLIError(f"--input must be T×H×W×D (or H×W×D), got shape {F.shape}")
    scores, maps = predict(F, params, cfg.hyper)
    summary = io.export_attention(maps, args.out)
    plotting.plot_attention(maps, Path(args.out) / "attention.png")
    print("class,score")
    for k, s in enumerate(scores):
        print(f"{k},{s:.6f}")
    print(f"frames,{len(summary['s_att_frame_mass'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actx", description="Attentive action/context factorization at toy scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="materialize a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy, AP, mAP and attention IoU")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="also write metrics.csv and ap.png here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-attention", help="export attention maps of one feature map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, io.ConfigError, io.ContainerError, ValueError, OSError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
