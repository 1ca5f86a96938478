"""Command line entry point.

    siesta fit-base --config c.yaml --set pq.rotation=true --out base/
    siesta run      --config c.yaml --base base/ --out runs/r1
    siesta sweep    --config c.yaml --grid sleep.updates=320,640 --seeds 0,1,2 --out sweep/
    siesta stats    runs/a/predictions.csv runs/b/predictions.csv

Every ``--set key=value`` mirrors a RunConfig path. Exit code is 0 on
success; failures print ``siesta: <category>: <message>`` and exit with the
category's code (config 2, usage 3, data 4, numeric 5, io 6).
"""
import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys

import yaml

from . import config as config_mod
from . import data, nn, orchestrator, results, stats
from .errors import ConfigError, DataError, SiestaError
from .pq import PQCodec

log = logging.getLogger("siesta")

IO_EXIT = 6
BASE_FILES = ("model.ckpt", "codec.pq", "base.json")


def _load_cfg(args, extra=()):
    return config_mod.parse_config(args.config, list(args.set or ()) + list(extra))


def _dataset(cfg):
    return data.load_configured(cfg.data, cfg.plan.base_classes, cfg.plan.class_order)


def save_base(outdir, cfg, base):
    net, head, codec, n_updates = base
    os.makedirs(outdir, exist_ok=True)
    nn.save_checkpoint(os.path.join(outdir, "model.ckpt"), net, head)
    codec.save(os.path.join(outdir, "codec.pq"))
    with open(os.path.join(outdir, "base.json"), "w") as fh:
        json.dump({"base_updates": int(n_updates), "seed": cfg.seed}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(outdir, "config.yaml"), "w") as fh:
        fh.write(config_mod.dump_config(cfg))


def load_base(basedir, cfg):
    for name in BASE_FILES:
        if not os.path.exists(os.path.join(basedir, name)):
            raise DataError(f"{basedir}: missing {name}; run fit-base first")
    net, head = nn.load_checkpoint(os.path.join(basedir, "model.ckpt"))
    codec = PQCodec.load(os.path.join(basedir, "codec.pq"))
    with open(os.path.join(basedir, "base.json")) as fh:
        meta = json.load(fh)
    if head is None:
        raise DataError(f"{basedir}/model.ckpt has no classifier head")
    if codec.dim != cfg.data.d or head.n_classes != cfg.data.n_classes or head.dim != cfg.model.embed_dim:
        raise ConfigError(f"{basedir}: base was fit for another data/model shape than this config")
    return net, head, codec, int(meta["base_updates"])


# ---------------------------------------------------------------- commands

def cmd_fit_base(args):
    cfg = _load_cfg(args)
    ds = _dataset(cfg)
    if args.features_out:
        data.write_feature_file(args.features_out, ds)
    base = orchestrator.fit_base(cfg, ds)
    save_base(args.out, cfg, base)
    print(f"base: {base[3]} updates, written to {args.out}")
    return 0


def cmd_run(args):
    cfg = _load_cfg(args)
    if args.out:
        cfg.output_dir = args.out
    ds = _dataset(cfg)
    base = load_base(args.base, cfg) if args.base else None
    res = orchestrator.run_experiment(cfg, ds, base)
    results.emit_results(res, cfg, cfg.output_dir)
    m = res.metrics
    mu = "n/a" if m.mu is None else f"{m.mu:.2f}"
    print(f"{m.mode}/{m.ordering} seed {m.seed}: final alpha {m.final_alpha:.2f}, mu {mu}, "
          f"U {m.updates}, M {m.peak_memory_bytes} -> {cfg.output_dir}")
    return 0


def _parse_grid(items):
    grid = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--grid {item!r} is not key=v1,v2,...")
        key, vals = item.split("=", 1)
        grid.append((key.strip(), [v.strip() for v in vals.split(",") if v.strip()]))
    return grid


def _base_key(cfg):
    # everything base initialization depends on
    d = config_mod.to_dict(cfg)
    sl = dict(d["sleep"])
    sl.pop("updates")
    return yaml.safe_dump([d["seed"], d["data"], d["model"], d["pq"], d["base"], sl,
                           d["plan"]["base_classes"], d["plan"]["class_order"]], sort_keys=True)


def cmd_sweep(args):
    grid = _parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [None]
    keys = [k for k, _ in grid]
    combos = list(itertools.product(*[v for _, v in grid])) if grid else [()]
    os.makedirs(args.out, exist_ok=True)
    bases, datasets = {}, {}
    rows = []
    for combo in combos:
        for seed in seeds:
            extra = [f"{k}={v}" for k, v in zip(keys, combo)]
            if seed is not None:
                extra.append(f"seed={seed}")
            cfg = _load_cfg(args, extra)
            tag = ",".join(extra) or "default"
            cfg.output_dir = os.path.join(args.out, tag.replace("/", "_"))
            dkey = yaml.safe_dump([dataclasses.asdict(cfg.data), cfg.plan.base_classes, cfg.plan.class_order])
            if dkey not in datasets:
                datasets[dkey] = _dataset(cfg)
            ds = datasets[dkey]
            bkey = _base_key(cfg)
            if cfg.plan.mode != "offline_oracle" and bkey not in bases:
                bases[bkey] = orchestrator.fit_base(cfg, ds)
            res = orchestrator.run_experiment(cfg, ds, bases.get(bkey))
            results.emit_results(res, cfg, cfg.output_dir, artifacts=False)
            m = res.metrics
            rows.append(dict(zip(keys, combo), seed=cfg.seed, final_alpha=m.final_alpha, mu=m.mu,
                             U=m.updates, M=m.peak_memory_bytes, outdir=cfg.output_dir))
            print(f"{tag}: final alpha {m.final_alpha:.2f}, U {m.updates}")
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys + ["seed", "final_alpha", "mu", "U", "M", "outdir"])
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_stats(args):
    if len(args.predictions) < 2:
        raise ConfigError("stats needs at least two predictions.csv files")
    loaded = [results.read_predictions(p) for p in args.predictions]
    truth = loaded[0][0]
    for p, (lab, _) in zip(args.predictions, loaded):
        if len(lab) != len(truth) or (lab != truth).any():
            raise DataError(f"{p}: labels differ from {args.predictions[0]}")
    preds = [pr for _, pr in loaded]
    out = {"files": list(args.predictions),
           "accuracy": [float((pr == truth).mean() * 100.0) for pr in preds]}
    if len(preds) == 2:
        stat, p = stats.mcnemar_test(preds[0], preds[1], truth)
        out.update(test="mcnemar", statistic=stat, p_value=p)
    else:
        stat, p = stats.cochran_q_test(preds, truth)
        out.update(test="cochran_q", statistic=stat, p_value=p)
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    ap = argparse.ArgumentParser(prog="siesta", description="wake/sleep continual learning runs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run config (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config path")
        return p

    p = with_config(sub.add_parser("fit-base", help="PQ fit and supervised base training"))
    p.add_argument("--out", required=True)
    p.add_argument("--features-out", help="also write the extracted features as a feature file")
    p.set_defaults(func=cmd_fit_base)

    p = with_config(sub.add_parser("run", help="one experiment"))
    p.add_argument("--base", help="directory written by fit-base")
    p.add_argument("--out", help="output directory (default: output_dir from config)")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("sweep", help="grid of experiments"))
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="McNemar (2 files) or Cochran's Q (3+) on predictions.csv files")
    p.add_argument("predictions", nargs="+")
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SiestaError as exc:
        print(f"siesta: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"siesta: io: {exc}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
