"""Command-line entry point.

Subcommands: ``synth`` (phantom dataset), ``train``, ``eval``, ``predict``,
``inspect`` (architecture table, parameters, FLOPs), ``gradcam``.

Every run or output directory is self-contained; nothing is written
elsewhere.  A train run directory holds::

    config.ini    effective configuration (defaults + file + overrides)
    seed.txt      model and train seeds
    log.jsonl     one line per step and per epoch
    checkpoints/  epoch_NNNN.ltpc and final.ltpc

With ``--run-dir`` omitted, runs are numbered ``run-0001``, ``run-0002``,
... under $LATUP_RUN_ROOT.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .config import load_config
from .errors import ConfigError, LatupError
from .gradcam import grad_cam
from .model import build_latupnet, count_parameters, estimate_flops, summary
from .tensor import Tensor
from .train import fit, load_checkpoint

RUN_ROOT_ENV = "LATUP_RUN_ROOT"


def _resolve_run_dir(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get(RUN_ROOT_ENV)
    if not root:
        raise ConfigError(
            f"--run-dir not given and {RUN_ROOT_ENV} is not set")
    root_path = Path(root)
    root_path.mkdir(parents=True, exist_ok=True)
    n = 1
    while (root_path / f"run-{n:04d}").exists():
        n += 1
    return root_path / f"run-{n:04d}"


def _load_network(config, checkpoint=None):
    spec = config.network_spec()
    network = build_latupnet(spec, seed=config["model"]["seed"])
    if checkpoint is not None:
        load_checkpoint(network, checkpoint)
    return network


def _check_dataset(dataset, spec):
    for volume in dataset:
        if volume.modalities.shape != tuple(spec.input_shape):
            raise ConfigError(
                f"sample {volume.sample_id} has shape {volume.modalities.shape}, "
                f"model expects {tuple(spec.input_shape)}")


def _predict_labels(network, volume):
    probs, _ = network.forward(Tensor(volume.modalities[None]), training=False)
    return metrics_mod.prediction_to_labels(probs.data)


def _cmd_synth(args) -> int:
    out = Path(args.out)
    volumes = [data_mod.generate_phantom(args.size, args.seed + i)
               for i in range(args.count)]
    data_mod.save_dataset(out, volumes, extra_meta={
        "count": args.count, "seed": args.seed, "size": [args.size] * 3})
    if args.folds:
        folds = data_mod.split_folds([v.sample_id for v in volumes],
                                     k=args.folds, seed=args.seed)
        data_mod.save_folds(out / "folds.json", folds, seed=args.seed, k=args.folds)
    print(f"wrote {len(volumes)} phantoms to {out}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config, tuple(args.override))
    run_dir = _resolve_run_dir(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset = data_mod.load_dataset(args.data)
    spec = config.network_spec()
    _check_dataset(dataset, spec)
    network = _load_network(config)

    (run_dir / "config.ini").write_text(config.to_ini())
    (run_dir / "seed.txt").write_text(
        f"model_seed={config['model']['seed']}\n"
        f"train_seed={config['train']['seed']}\n")
    log = fit(network, dataset, config.train_config(), run_dir=run_dir,
              max_steps=args.max_steps)
    (run_dir / "log.jsonl").write_text("\n".join(log.jsonl_lines()) + "\n")
    last = log.epochs[-1]
    print(f"trained {len(log.steps)} steps; final loss {last.loss:.4f} "
          f"(wdl {last.wdl:.4f}); run dir {run_dir}")
    return 0


def _cmd_eval(args) -> int:
    config = load_config(args.config, tuple(args.override))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = data_mod.load_dataset(args.data)
    _check_dataset(dataset, config.network_spec())
    network = _load_network(config, args.checkpoint)
    folds = data_mod.load_folds(args.folds_file) if args.folds_file else {}

    records = []
    trues, preds = [], []
    for volume in dataset:
        pred = _predict_labels(network, volume)
        trues.append(volume.labels)
        preds.append(pred)
        records.extend(metrics_mod.evaluate_sample(
            volume.labels, pred, volume.sample_id,
            fold=folds.get(volume.sample_id, 0)))

    metrics_mod.write_metrics_csv(records, out / "metrics.csv")
    metrics_mod.write_metrics_jsonl(records, out / "metrics.jsonl")
    confusion = metrics_mod.confusion_matrix(
        trues, preds, exclude_et_absent=config["eval"]["exclude_et_absent"])
    (out / "confusion.json").write_text(json.dumps({
        "mean": confusion.mean.tolist(),
        "std": confusion.std.tolist(),
        "row_counts": confusion.row_counts.tolist(),
        "excluded_samples": confusion.excluded,
        "classes": list(metrics_mod.CLASS_DISPLAY),
    }, indent=2, sort_keys=True) + "\n")
    agg = {
        group: {
            str(key): {region: {metric: stats.as_dict()
                                for metric, stats in per_region.items()}
                       for region, per_region in groups.items()}
            for key, groups in metrics_mod.aggregate(records, group).items()
        }
        for group in ("overall", "fold")
    }
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")

    overall = metrics_mod.aggregate(records, "overall")["overall"]
    parts = [f"{region} dsc {overall[region]['dsc'].mean:.3f}"
             for region in metrics_mod.REGIONS if region in overall]
    print(f"evaluated {len(dataset)} samples: " + ", ".join(parts))
    return 0


def _cmd_predict(args) -> int:
    config = load_config(args.config, tuple(args.override))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = data_mod.load_dataset(args.data)
    _check_dataset(dataset, config.network_spec())
    network = _load_network(config, args.checkpoint)
    for volume in dataset:
        pred = _predict_labels(network, volume)
        data_mod.write_raw(out / f"{volume.sample_id}_pred.ltpv", pred)
    print(f"wrote {len(dataset)} prediction volumes to {out}")
    return 0


def _cmd_inspect(args) -> int:
    config = load_config(args.config, tuple(args.override))
    spec = config.network_spec()
    print(summary(spec))
    network = build_latupnet(spec, seed=config["model"]["seed"])
    total, _ = count_parameters(network)
    totals, _ = estimate_flops(spec)
    print(f"\nTrainable parameters: {total:,}")
    print(f"Dense-compute estimate: {totals['macs']:,} MACs, "
          f"{totals['flops']:,} FLOPs "
          f"({totals['flops'] / 1e9:.2f} GFLOPs at this input size)")
    print("Note: dense multiply-accumulate counting; not comparable with "
          "profiler-based figures.")
    return 0


def _cmd_gradcam(args) -> int:
    config = load_config(args.config, tuple(args.override))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = data_mod.load_dataset(args.data)
    _check_dataset(dataset, config.network_spec())
    network = _load_network(config, args.checkpoint)
    by_id = {v.sample_id: v for v in dataset}
    if args.sample not in by_id:
        raise ConfigError(f"sample {args.sample!r} not in dataset "
                          f"({sorted(by_id)[:5]}...)")
    volume = by_id[args.sample]
    heat = grad_cam(network, Tensor(volume.modalities[None]), args.channel,
                    layer_name=args.layer, normalize=args.normalize)
    name = f"{args.sample}_gradcam_{args.channel}_{args.layer}.ltpv"
    data_mod.write_raw(out / name, heat.astype(np.float32))
    print(f"wrote {out / name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latup",
        description="Lightweight 3D attention U-Net: synth/train/eval/predict/inspect/gradcam")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="INI config file (defaults when omitted)")
        p.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    p = sub.add_parser("synth", help="generate a phantom dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=0,
                   help="also write folds.json with this many folds")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="per-sample metrics, confusion matrix, aggregates")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds-file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="write predicted label volumes")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("inspect", help="print the architecture table and totals")
    add_config(p)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("gradcam", help="write a Grad-CAM heatmap volume")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--channel", default="et",
                   help="bg | ncr_net | ed | et or channel index")
    p.add_argument("--layer", default="prob_map-input")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LatupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
