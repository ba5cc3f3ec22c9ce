"""Command-line entry point: data generation, the three training stages,
evaluation and MIP export."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config, with_seed
from .data import DatasetReader
from .evaluate import evaluate_model, export_mips
from .fields import _atomic_write, load_volume
from .synthetic import TreeSpec, make_dataset
from .trainer import load_checkpoint, load_model, stage_pretrain, stage_refine, stage_sld

log = logging.getLogger("sld3d")


def _config(args):
    cfg = load_config(args.profile, args.config, args.set)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if getattr(args, "ref_dir", None):
        cfg.ref_dir = args.ref_dir
    if getattr(args, "single_ref", None):
        cfg.single_ref = args.single_ref
    return cfg


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def plot_curves(stage_dirs: dict, out_png) -> Path | None:
    """Per-step total loss and per-epoch validation DSC for each stage."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = {}
    for name, d in stage_dirs.items():
        p = Path(d) / "log.jsonl"
        if not p.exists():
            continue
        steps, totals, epochs, dsc = [], [], [], []
        for line in p.read_text().splitlines():
            rec = json.loads(line)
            if "summary" in rec:
                if "val_dsc" in rec["summary"]:
                    epochs.append(rec["summary"]["epoch"])
                    dsc.append(rec["summary"]["val_dsc"])
            else:
                steps.append(rec["step"])
                totals.append(rec["total"])
        series[name] = (steps, totals, epochs, dsc)
    if not series:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name, (steps, totals, epochs, dsc) in series.items():
        axes[0].plot(steps, totals, label=name)
        if dsc:
            axes[1].plot(epochs, dsc, marker="o", label=name)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("total loss")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation DSC")
    for ax in axes:
        ax.legend()
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return out_png


def _evaluate(ckpt, data, split, cfg_crop=None, out=None):
    _, manifest = load_checkpoint(ckpt)
    crop = cfg_crop or manifest["config"]["crop_size"]
    model = load_model(ckpt)
    reader = DatasetReader(data)
    rep = evaluate_model(model, reader, split, crop, manifest["config"]["eval_threshold"],
                         manifest["config"]["eval_overlap"],
                         provenance={"checkpoint": str(ckpt), "stage": manifest["stage"],
                                     "epoch": manifest["epoch"], "kind": manifest.get("kind")})
    report = rep.to_dict()
    if out:
        _write_json(out, report)
    return report


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    spec = TreeSpec(root_radius=args.root_radius)
    man = make_dataset(args.out, args.train, args.val, args.test, seed=args.seed, size=args.size,
                       n_refs=args.n_refs, spec=spec, force=args.force)
    print(json.dumps({"out": args.out, "splits": {k: len(v) for k, v in man["splits"].items()},
                      "references": len(man["references"])}))


def cmd_pretrain(args):
    out = stage_pretrain(_config(args), args.data, args.out, resume=args.resume, epochs=args.epochs)
    print(out)


def cmd_train_sld(args):
    out = stage_sld(_config(args), args.data, args.init, args.out, resume=args.resume, epochs=args.epochs)
    print(out)


def cmd_refine(args):
    out = stage_refine(_config(args), args.data, args.init, args.out, resume=args.resume, epochs=args.epochs,
                       dump_pseudo=args.dump_pseudo)
    print(out)


def cmd_evaluate(args):
    report = _evaluate(args.checkpoint, args.data, args.split, args.crop, args.out)
    print(json.dumps(report["mean"]))


def cmd_export_mips(args):
    model = load_model(args.checkpoint)
    _, manifest = load_checkpoint(args.checkpoint)
    vol = load_volume(args.volume)
    crop = args.crop or manifest["config"]["crop_size"]
    stem = args.stem or (vol.id or Path(args.volume).name)
    for p in export_mips(model, vol.data, args.out, stem, crop):
        print(p)


def cmd_run_all(args):
    cfg = _config(args)
    out = Path(args.out)
    stages = {"pretrain": out / "pretrain", "sld": out / "sld", "refine": out / "refine"}
    stage_pretrain(cfg, args.data, stages["pretrain"])
    stage_sld(cfg, args.data, stages["pretrain"], stages["sld"])
    stage_refine(cfg, args.data, stages["sld"], stages["refine"], dump_pseudo=args.dump_pseudo)
    report = {"config": cfg.to_dict(), "evaluations": {}}
    for name in ("sld", "refine"):
        report["evaluations"][name] = _evaluate(stages[name] / "best", args.data, args.split)
    curves = plot_curves(stages, out / "training_curves.png")
    report["curves"] = str(curves) if curves else None
    _write_json(out / "report.json", report)
    print(json.dumps({k: v["mean"] for k, v in report["evaluations"].items()}))


def _train_args(p, init: bool):
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--out", required=True, help="stage output directory")
    if init:
        p.add_argument("--init", required=True, help="checkpoint of the previous stage")
    p.add_argument("--resume", help="checkpoint of this stage to continue from")
    p.add_argument("--epochs", type=int, help="run at most this many more epochs")


def _config_args(p):
    p.add_argument("--profile", default="desk", choices=["paper", "desk", "smoke"])
    p.add_argument("--config", help="JSON file of config overrides")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, dotted for nested keys (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--ref-dir", help="directory of binary PNG reference masks")
    p.add_argument("--single-ref", help="restrict references to this one file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sld3d", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic vessel dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=16)
    p.add_argument("--val", type=int, default=2)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-refs", type=int, default=16)
    p.add_argument("--root-radius", type=float, default=3.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="patch-discrimination pretraining")
    _train_args(p, init=False)
    _config_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-sld", help="shape-guided local discrimination training")
    _train_args(p, init=True)
    _config_args(p)
    p.set_defaults(func=cmd_train_sld)

    p = sub.add_parser("refine", help="reliability refinement with pseudo labels")
    _train_args(p, init=True)
    _config_args(p)
    p.add_argument("--dump-pseudo", action="store_true", help="write pseudo labels per epoch")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="DSC/PR/RR of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--crop", type=int, help="tile size (default: training crop size)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-mips", help="write prediction and intensity MIPs as PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="volume path stem (without .raw/.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--stem")
    p.add_argument("--crop", type=int)
    p.set_defaults(func=cmd_export_mips)

    p = sub.add_parser("run-all", help="all three stages, then evaluation and plots")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dump-pseudo", action="store_true")
    _config_args(p)
    p.set_defaults(func=cmd_run_all)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, FileExistsError, KeyError, ValueError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
