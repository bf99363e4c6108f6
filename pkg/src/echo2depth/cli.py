"""``echo2depth`` command line.

Subcommands: simulate, train, eval, ablate, export-figures.  Config and
grid files are ``key = value`` text.  On failure the last stderr line is
``error: {"type": ..., "message": ...}`` (JSON) and the exit code is 1.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import DEFAULT_SPLIT_COUNTS, SPLITS, SplitArrays, load_split, read_key_values
from .simulate import simulate_dataset, split_counts_for

log = logging.getLogger("echo2depth")


def _counts(args):
    if args.split_counts:
        parts = [int(x) for x in args.split_counts.split(",")]
        if len(parts) != 3:
            raise ValueError("--split-counts takes train,val,test")
        return dict(zip(SPLITS, parts))
    if args.scenes is None:
        return dict(DEFAULT_SPLIT_COUNTS)
    return split_counts_for(args.scenes)


def cmd_simulate(args):
    snr = None if args.snr_db.lower() in ("inf", "none") else float(args.snr_db)
    manifest = simulate_dataset(args.out, _counts(args), seed=args.seed,
                                resolution=args.resolution, max_order=args.max_order,
                                snr_db=snr, force=args.force)
    print(json.dumps({"out": str(args.out), "counts": manifest["counts"],
                      "resolution": manifest["resolution"]}))


def cmd_train(args):
    from .training import TrainConfig, train

    items = read_key_values(args.config)
    for override in args.set or []:
        k, _, v = override.partition("=")
        items[k.strip()] = v.strip()
    if args.data:
        items["data"] = args.data
    if args.out:
        items["out"] = args.out
    cfg = TrainConfig.from_mapping(items)
    if not cfg.out:
        raise ValueError("no output directory (config key 'out' or --out)")
    result = train(cfg)
    print(json.dumps({"checkpoint": str(result.checkpoint), "best_val_l1": result.best_val_l1,
                      "epochs": len(result.epochs)}))


def cmd_eval(args):
    from .evaluation import evaluate, write_metrics

    rows = evaluate(args.ckpt, args.data, split=args.split)
    if args.out:
        write_metrics(rows, args.out)
    else:
        write_metrics(rows, "/dev/stdout")


def cmd_ablate(args):
    from .evaluation import run_ablation_grid

    grid = read_key_values(args.grid)
    data = args.data or grid.pop("data", None)
    out = args.out or grid.pop("out", None)
    grid.pop("data", None)
    grid.pop("out", None)
    if not data or not out:
        raise ValueError("ablation needs a dataset and an output directory")
    rows = run_ablation_grid(grid, data, out)
    for r in rows:
        print(f"{r['regime']:9s} {r['representation']:15s} {r['fusion']:6s} {r['generator']:7s} "
              f"{r['resolution']:4d} {r['target']:6s} {r['l1']:.4f}")


def cmd_export(args):
    from .evaluation import export_figures

    data = load_split(args.data, args.split)
    n = min(args.n, len(data))
    subset = SplitArrays(data.audio[:n], data.depth[:n], data.gray[:n], data.seeds[:n],
                         data.ids[:n])
    for p in export_figures(args.ckpt, subset, args.out, gray_checkpoint=args.gray_ckpt):
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="echo2depth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--scenes", type=int, default=None,
                   help="total samples, split 3950:750:504 (default: exactly those counts)")
    s.add_argument("--split-counts", default=None, help="explicit train,val,test counts")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--resolution", type=int, default=64, choices=(16, 32, 64, 128))
    s.add_argument("--max-order", type=int, default=3)
    s.add_argument("--snr-db", default="30")
    s.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train one model from a key=value config")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--data", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint and the baselines")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--out", default=None, type=Path, help="metrics CSV (default stdout)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate a grid of configurations")
    a.add_argument("--grid", required=True, type=Path)
    a.add_argument("--data", default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("export-figures", help="write GT/prediction panels")
    f.add_argument("--ckpt", required=True, type=Path)
    f.add_argument("--gray-ckpt", default=None, type=Path)
    f.add_argument("--data", required=True, type=Path)
    f.add_argument("--split", default="test", choices=SPLITS)
    f.add_argument("-n", type=int, default=4)
    f.add_argument("--out", required=True, type=Path)
    f.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        if args.verbose:
            logging.exception("command failed")
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
