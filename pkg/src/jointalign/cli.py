"""Command-line interface: gen-data, train, eval, refine, calib, plots."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .align_net import AlignNet
from .config import ConfigError, ENV_PREFIX, RunConfig
from .pipeline import (
    DiskDataset,
    StreamDataset,
    generate_dataset,
    load_manifest,
    run_evaluation,
    run_training,
    write_report,
)

logger = logging.getLogger("jointalign")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file merged over the preset")
    parser.add_argument("--preset", choices=("paper", "desk"), default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None,
                        help="parallelism cap for data generation")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        dest="set_flags",
                        help=f"config override (env prefix: {ENV_PREFIX})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointalign",
        description="Joint multi-object render-and-compare pose refinement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)

    p = sub.add_parser("train", help="train the alignment network")
    _add_common(p)
    p.add_argument("--data", type=Path, help="materialized dataset directory")
    p.add_argument("--stream", action="store_true",
                   help="regenerate scenes from seeds instead of reading disk")
    p.add_argument("--scenes", type=int, default=None,
                   help="scene count (stream mode) or limit (disk mode)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, default=None, help="CSV training log")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--max-scenes", type=int, default=None)
    p.add_argument("--offset", type=int, default=0,
                   help="skip this many leading scenes (held-out split)")
    p.add_argument("--oracle", action="store_true",
                   help="closed-form oracle predictor instead of the network")
    p.add_argument("--identity-predictor", action="store_true")

    p = sub.add_parser("refine", help="write refined poses as JSON lines")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-scenes", type=int, default=None)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--identity-predictor", action="store_true")
    p.add_argument("--dump-traces", type=Path, default=None)

    p = sub.add_parser("calib", help="calibration bins CSV + figure")
    p.add_argument("--report", type=Path, required=True,
                   help="eval report directory")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("plots", help="loss/accuracy CSVs + figures")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--train-log", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)

    return parser


def _config_from(args) -> RunConfig:
    return RunConfig.build(preset=args.preset, config_path=args.config,
                           set_flags=args.set_flags, seed=args.seed,
                           workers=args.workers)


def _mode_from(args) -> str:
    if getattr(args, "oracle", False):
        return "oracle"
    if getattr(args, "identity_predictor", False):
        return "identity"
    return "net"


def _load_net(args, cfg: RunConfig):
    if _mode_from(args) != "net":
        return None
    if not args.checkpoint:
        raise ConfigError("--checkpoint required unless --oracle or "
                          "--identity-predictor is set")
    net, _ = AlignNet.load(args.checkpoint, cfg=cfg.net)
    return net


def _dataset_from(args, cfg: RunConfig, limit=None, offset=0):
    manifest = load_manifest(args.data)
    if manifest["config_hash"] != cfg.config_hash():
        logger.warning("dataset config hash %s differs from run config %s",
                       manifest["config_hash"][:12], cfg.config_hash()[:12])
    return DiskDataset(args.data, cfg, limit=limit, offset=offset)


def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    manifest = generate_dataset(cfg, args.out, args.count)
    print(f"wrote {manifest['count']} scenes to {args.out} "
          f"(config {manifest['config_hash'][:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    if args.stream:
        if not args.scenes:
            raise ConfigError("--stream needs --scenes")
        dataset = StreamDataset(cfg, args.scenes)
    else:
        if not args.data:
            raise ConfigError("train needs --data or --stream")
        dataset = _dataset_from(args, cfg, limit=args.scenes)
    log_path = args.log or args.out.with_suffix(".log.csv")
    summary = run_training(cfg, dataset, args.out, log_path=log_path,
                           resume=args.resume, epochs=args.epochs)
    last = summary["epochs"][-1] if summary["epochs"] else {}
    print(f"trained {len(summary['epochs'])} epoch(s), "
          f"{summary['steps']} optimizer steps; "
          f"final l_align {last.get('l_align_mean', float('nan')):.3f} "
          f"l_cls {last.get('l_cls_mean', float('nan')):.3f}")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    net = _load_net(args, cfg)
    dataset = _dataset_from(args, cfg, limit=args.max_scenes,
                            offset=args.offset)
    report = run_evaluation(cfg, dataset, net=net, mode=_mode_from(args))
    path = write_report(report, args.out)
    print(f"per-scene instance accuracy: "
          f"{report['per_scene']['instance_accuracy']:.3f}")
    print(f"per-image instance accuracy: "
          f"{report['per_image']['instance_accuracy']:.3f}")
    print("accuracy by iteration: "
          + " ".join(f"{a:.3f}" for a in report["accuracy_by_iteration"]))
    print(f"AP50 {report['ap_mesh']['ap50']:.3f} "
          f"APmean {report['ap_mesh']['ap_mean']:.3f} "
          f"(rho {report['ap_mesh']['rho']})")
    t = report["timing"]
    print(f"forward passes: {t['forward_passes']} "
          f"({t['ms_per_pass']:.1f} ms/pass incl. input building)")
    print(f"report: {path}")
    return 0


def cmd_refine(args) -> int:
    cfg = _config_from(args)
    net = _load_net(args, cfg)
    dataset = _dataset_from(args, cfg, limit=args.max_scenes,
                            offset=args.offset)
    collected = []
    report = run_evaluation(cfg, dataset, net=net, mode=_mode_from(args),
                            collect=collected)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        for item in collected:
            for pred in item["preds"]:
                fh.write(json.dumps(pred.to_json(scene_id=item["scene"].seed),
                                    sort_keys=True) + "\n")
    if args.dump_traces:
        with open(args.dump_traces, "w") as fh:
            for item in collected:
                trace = item["trace"]
                fh.write(json.dumps({
                    "scene": item["scene"].seed,
                    "chosen": trace.chosen,
                    "sigmas": {oid: [t.sigma for t in tracks]
                               for oid, tracks in trace.tracks.items()},
                    "forward_passes": trace.forward_passes,
                }, sort_keys=True) + "\n")
    n_preds = sum(len(item["preds"]) for item in collected)
    t = report["timing"]
    print(f"wrote {n_preds} predictions to {args.out}")
    print(f"forward passes: {t['forward_passes']} "
          f"({t['ms_per_pass']:.1f} ms/pass incl. input building)")
    return 0


def cmd_calib(args) -> int:
    from .plots import save_calibration_figure

    report = json.loads((args.report / "report.json").read_text())
    if not report.get("calibration"):
        print("report has no calibration data", file=sys.stderr)
        return 1
    out = args.out or args.report
    out.mkdir(parents=True, exist_ok=True)
    bins = report["calibration"]["bins"]
    with open(out / "calibration_bins.csv", "w") as fh:
        fh.write("bin,confidence,accuracy,count\n")
        for i, b in enumerate(bins):
            fh.write(f"{i},{b['confidence']:.6f},{b['accuracy']:.6f},"
                     f"{b['count']}\n")
    fig = save_calibration_figure(bins, out / "calibration.png")
    print(f"spearman: {report['calibration']['spearman']:.3f}")
    print(f"wrote {out / 'calibration_bins.csv'} and {fig}")
    return 0


def cmd_plots(args) -> int:
    from .plots import (
        read_log_csv,
        save_accuracy_iteration_figure,
        save_calibration_figure,
        save_category_table_figure,
        save_loss_curves_figure,
    )

    report = json.loads((args.report / "report.json").read_text())
    out = args.out or args.report
    out.mkdir(parents=True, exist_ok=True)
    acc = report["accuracy_by_iteration"]
    with open(out / "accuracy_by_iteration.csv", "w") as fh:
        fh.write("iteration,instance_accuracy\n")
        for k, a in enumerate(acc):
            fh.write(f"{k},{a:.6f}\n")
    written = [out / "accuracy_by_iteration.csv",
               save_accuracy_iteration_figure(acc, out / "accuracy_by_iteration.png")]
    for proto in ("per_scene", "per_image"):
        written.append(save_category_table_figure(
            report[proto]["per_category"], report[proto]["instance_accuracy"],
            out / f"{proto}_categories.png", proto.replace("_", "-")))
    if report.get("calibration"):
        written.append(save_calibration_figure(report["calibration"]["bins"],
                                               out / "calibration.png"))
    if args.train_log and Path(args.train_log).exists():
        rows = read_log_csv(args.train_log)
        if rows:
            with open(out / "loss_curves.csv", "w") as fh:
                fh.write("step,l_align,l_cls\n")
                for r in rows:
                    fh.write(f"{r['step']},{r['l_align']},{r['l_cls']}\n")
            written.append(save_loss_curves_figure(rows, out / "loss_curves.png"))
    for w in written:
        print(f"wrote {w}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "refine": cmd_refine,
    "calib": cmd_calib,
    "plots": cmd_plots,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
