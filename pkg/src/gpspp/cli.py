"""Command line entry point: ``gpspp {featurize,train,pack-stats,ensemble}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path


from .encodings import featurize, read_sidecar, write_sidecar
from .ensemble import EnsembleSpec, ensemble_eval, write_predictions
from .exceptions import GPSError
from .graph import SPLIT_NAMES, load_dataset, make_split, random_dataset
from .model import GPSModel, ModelConfig
from .packer import PackSpec, graphs_per_pack_histogram, pack_efficiency, pack_stream
from .training import TrainConfig, jsonable, load_config, train

log = logging.getLogger("gpspp")


def _features(dataset, cfg: ModelConfig, sidecar=None):
    if sidecar is not None:
        return read_sidecar(sidecar, list(dataset))
    return [featurize(g, cfg.k_lap, cfg.k_rw, cfg.max_spd, cfg.max_degree) for g in dataset]


def cmd_featurize(args):
    dataset = load_dataset(args.dataset)
    feats = [featurize(g, args.k_lap, args.k_rw, args.max_spd, args.max_degree) for g in dataset]
    write_sidecar(args.out, feats, args.k_lap, args.k_rw, args.max_spd, args.max_degree)
    print(f"wrote features for {len(feats)} graphs to {args.out}")


def cmd_train(args):
    model_cfg, train_cfg = load_config(args.config) if args.config else (ModelConfig(), TrainConfig())
    overrides = {"seed": args.seed} if args.seed is not None else {}
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if args.epochs is not None:
        overrides["total_epochs"] = args.epochs
        overrides["warmup_epochs"] = min(train_cfg.warmup_epochs, args.epochs)
    train_cfg = train_cfg.replace(**overrides)
    dataset = load_dataset(args.dataset)
    split = make_split(len(dataset), args.split, train_cfg.seed, dataset.valid_indices)
    feats = _features(dataset, model_cfg, args.features)
    result = train(dataset, split, model_cfg, train_cfg, out_dir=args.out, featurized=feats,
                   callback=lambda row: log.info("epoch %(epoch)d %(split)s mae %(mae).5f", row))
    print(json.dumps(jsonable({k: result.summary[k] for k in
                                ("epochs", "steps", "final_train_mae", "final_eval_mae")})))


def cmd_pack_stats(args):
    if args.dataset:
        sizes = [(g.num_nodes, g.num_edges) for g in load_dataset(args.dataset)]
    else:
        sizes = [(g.num_nodes, g.num_edges) for g in random_dataset(args.synthetic, seed=args.seed)]
    spec = PackSpec(args.max_nodes, args.max_edges, args.max_graphs)
    packs = pack_stream(sizes, spec)
    node_eff, edge_eff, per_pack = pack_efficiency(packs)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["metric", "value"])
    out.writerow(["num_graphs", len(sizes)])
    out.writerow(["num_packs", len(packs)])
    out.writerow(["node_efficiency", f"{node_eff:.6f}"])
    out.writerow(["edge_efficiency", f"{edge_eff:.6f}"])
    out.writerow(["mean_efficiency", f"{(node_eff + edge_eff) / 2:.6f}"])
    out.writerow(["graphs_per_pack", f"{per_pack:.6f}"])
    sys.stdout.write("\n")
    out.writerow(["graphs_in_pack", "num_packs"])
    for k, count in graphs_per_pack_histogram(packs).items():
        out.writerow([k, count])


def cmd_ensemble(args):
    spec = EnsembleSpec.from_json(args.spec)
    dataset = load_dataset(args.dataset)
    split = make_split(len(dataset), args.split, args.seed, dataset.valid_indices)
    ids = split.eval_indices if len(split.eval_indices) else split.train_indices
    cfg = ModelConfig()
    for m in spec.members:
        if m.checkpoint is not None:
            cfg = GPSModel.load(m.checkpoint).config
            break
    feats = _features(dataset, cfg, args.features)
    report = ensemble_eval(spec, [feats[i] for i in ids], graph_ids=ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.csv", ids, report.pop("predictions"))
    report["split"] = args.split
    with open(out / "summary.json", "w") as fh:
        json.dump(jsonable(report), fh, indent=2)
    print(json.dumps(jsonable({k: report[k] for k in ("avg_mae", "ensembled_mae", "num_graphs")})))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpspp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="precompute structural encodings into a binary sidecar")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-lap", type=int, default=7)
    p.add_argument("--k-rw", type=int, default=16)
    p.add_argument("--max-spd", type=int, default=20)
    p.add_argument("--max-degree", type=int, default=10)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model and write metrics, summary and checkpoint")
    p.add_argument("--config", help="TOML file with [model] and [train] tables")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES, default="original")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="sidecar written by 'featurize'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pack-stats", help="packing efficiency and graphs-per-pack histogram as CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--synthetic", type=int, metavar="N", help="use N random molecules")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-nodes", type=int, default=60)
    p.add_argument("--max-edges", type=int, default=120)
    p.add_argument("--max-graphs", type=int, default=8)
    p.set_defaults(func=cmd_pack_stats)

    p = sub.add_parser("ensemble", help="weighted ensemble of checkpoints or prediction files")
    p.add_argument("--spec", required=True, help='JSON list of {"checkpoint"|"predictions": path, "weight": w}')
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES, default="original")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (GPSError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
