"""Writing a finished run to disk.

Layout of an output directory::

    metrics.json      MetricsRecord (sorted keys, stable float repr)
    curves.csv        step, seen_classes, pre_sleep_acc, post_sleep_acc, U, M
    update_log.csv    step, loss, lr, seen_updates
    predictions.csv   index, label, prediction (final evaluation)
    config.yaml       config echo; reparses to an equal RunConfig
    seeds.json        every seed the run derived its randomness from
    model.ckpt        network checkpoint with the head appended
    codec.pq          PQ codec
    buffer.jsonl      replay buffer dump

Every file is rewritten whole, so emitting the same result twice gives the
same bytes.
"""
import csv
import json
import os

import numpy as np

from . import config as config_mod
from . import kernels, nn
from .sleep import write_update_log

CURVE_COLUMNS = ("step", "seen_classes", "pre_sleep_acc", "post_sleep_acc", "U", "M")


def _num(v):
    # numpy scalars -> python, so json output does not depend on numpy types
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return _num(obj)


def metrics_json(result):
    m = result.metrics.to_dict()
    m["online_correct"] = result.online_correct
    m["online_seen"] = result.online_seen
    m["n_eval"] = int(len(result.eval_labels))
    return json.dumps(_clean(m), sort_keys=True, indent=2) + "\n"


def seed_manifest(cfg):
    return {
        "seed": cfg.seed,
        "pq_fit": cfg.seed,
        "network_init": cfg.seed,
        "ordering": cfg.seed,
        "wake_and_sleep_rng": cfg.seed + 1,
        "base_training_rng": cfg.seed + 7919,
        "split_seed": cfg.data.split_seed,
        "extractor_seed": cfg.data.extractor_seed,
        "synthetic_seed": cfg.data.synthetic_seed,
        "kernel_backend": kernels.BACKEND,
    }


def write_curves(path, steps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in steps:
            w.writerow([repr(_num(row[c])) if isinstance(row[c], float) else row[c] for c in CURVE_COLUMNS])


def read_curves(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if k.endswith("acc") else int(v)) for k, v in r.items()} for r in rows]


def write_predictions(path, labels, preds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "prediction"])
        for i, (t, p) in enumerate(zip(labels, preds)):
            w.writerow([i, int(t), int(p)])


def read_predictions(path):
    """-> (labels, predictions) int arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    preds = np.array([int(r["prediction"]) for r in rows], dtype=np.int64)
    return labels, preds


def emit_results(result, cfg, outdir, artifacts=True):
    """Write all run outputs to ``outdir`` (created if needed). Returns the file paths.

    IO errors propagate as OSError.
    """
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    def put(name, text):
        p = os.path.join(outdir, name)
        with open(p, "w") as fh:
            fh.write(text)
        paths[name] = p

    put("metrics.json", metrics_json(result))
    put("config.yaml", config_mod.dump_config(cfg))
    put("seeds.json", json.dumps(seed_manifest(cfg), sort_keys=True, indent=2) + "\n")
    paths["curves.csv"] = os.path.join(outdir, "curves.csv")
    write_curves(paths["curves.csv"], result.metrics.steps)
    paths["update_log.csv"] = os.path.join(outdir, "update_log.csv")
    write_update_log(paths["update_log.csv"], result.update_log)
    paths["predictions.csv"] = os.path.join(outdir, "predictions.csv")
    write_predictions(paths["predictions.csv"], result.eval_labels, result.final_predictions)

    st = result.state
    if artifacts and st is not None:
        paths["model.ckpt"] = os.path.join(outdir, "model.ckpt")
        nn.save_checkpoint(paths["model.ckpt"], st.net, st.head)
        paths["codec.pq"] = os.path.join(outdir, "codec.pq")
        st.codec.save(paths["codec.pq"])
        paths["buffer.jsonl"] = os.path.join(outdir, "buffer.jsonl")
        st.buffer.dump_jsonl(paths["buffer.jsonl"])
    return paths
