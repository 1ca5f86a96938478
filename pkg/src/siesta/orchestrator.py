"""Experiment driver: base initialization, wake/sleep alternation, evaluation
and bookkeeping of accuracy, update count and memory.

Modes
-----
siesta          running-mean head updates while awake, budgeted rehearsal while asleep
awake_only      running-mean head updates only; never sleeps
remind          one SGD step per streamed sample on (sample + rehearsal) mini-batches
offline_oracle  trains on all data at once with the same total update budget
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn, pq, sleep
from .buffer import ReplayBuffer
from .data import BASE, EVAL, STREAM
from .errors import ConfigError, UsageError
from .head import CosineHead

log = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    mode: str
    ordering: str
    seed: int
    base_accuracy: float
    steps: list = field(default_factory=list)
    alpha_t: list = field(default_factory=list)
    mu: Optional[float] = None
    final_alpha: Optional[float] = None
    updates: int = 0
    base_updates: int = 0
    peak_memory_bytes: int = 0
    stopped_early: bool = False

    def finalize(self):
        self.mu = float(np.mean(self.alpha_t)) if self.alpha_t else None
        self.final_alpha = self.alpha_t[-1] if self.alpha_t else self.base_accuracy
        return self

    def to_dict(self):
        return {
            "mode": self.mode, "ordering": self.ordering, "seed": self.seed,
            "base_accuracy": self.base_accuracy, "alpha_t": list(self.alpha_t),
            "mu": self.mu, "final_alpha": self.final_alpha, "U": self.updates,
            "U_base": self.base_updates, "M": self.peak_memory_bytes,
            "stopped_early": self.stopped_early, "steps": list(self.steps),
        }


@dataclass
class RunResult:
    metrics: MetricsRecord
    update_log: list
    final_predictions: np.ndarray
    eval_labels: np.ndarray
    online_correct: int = 0
    online_seen: int = 0
    state: Optional["LearnerState"] = None


@dataclass
class LearnerState:
    """Everything one learner carries through a run."""
    net: nn.Network
    head: CosineHead
    codec: pq.PQCodec
    buffer: ReplayBuffer
    rng: np.random.Generator
    updates: int = 0
    remind_opt: Optional[nn.OptimizerState] = None
    seen_classes: set = field(default_factory=set)


# ---------------------------------------------------------------- orderings

def make_ordering(labels, ordering, seed, class_order=None, permutation=None):
    """Permutation of sample indices.

    class_incremental: classes in ``class_order`` (default ascending id), each
    class's samples shuffled; iid: a global shuffle; custom: ``permutation``.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("cannot order an empty label set")
    rng = np.random.default_rng(seed)
    if ordering == "iid":
        return rng.permutation(len(labels))
    if ordering == "class_incremental":
        present = list(np.unique(labels))
        order = [c for c in (class_order or []) if c in present]
        order += [c for c in present if c not in order]
        return np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in order])
    if ordering == "custom":
        perm = np.asarray(permutation if permutation is not None else [], dtype=np.int64)
        if perm.size == 0 or not np.array_equal(np.sort(perm), np.arange(len(labels))):
            raise ConfigError("custom ordering needs a permutation of all stream indices")
        return perm
    raise ConfigError(f"unknown ordering {ordering!r}")


def wake_boundaries(stream_labels, every_samples=0, every_classes=0, at_end=True):
    """End indices (exclusive) of each wake slice; a sleep follows each one."""
    n = len(stream_labels)
    cuts = []
    if every_samples > 0:
        cuts = list(range(every_samples, n + 1, every_samples))
    elif every_classes > 0:
        seen, since = set(), 0
        for i, y in enumerate(stream_labels):
            if y not in seen:
                if since == every_classes:
                    cuts.append(i)
                    since = 0
                seen.add(y)
                since += 1
    if at_end and n and (not cuts or cuts[-1] != n):
        cuts.append(n)
    return cuts


# ---------------------------------------------------------------- phases

def _encode_reconstruct(codec, X):
    codes = codec.encode(X)
    return codes, codec.decode(codes)


def evaluate(state, X_eval_rec, y_eval, classes=None):
    """Accuracy (percent) over eval samples whose class is in ``classes``, and all predictions."""
    Z = sleep.embed(state.net, X_eval_rec)
    preds = state.head.predict_batch(Z)
    mask = np.ones(len(y_eval), bool) if classes is None else np.isin(y_eval, sorted(classes))
    acc = 100.0 * float(np.mean(preds[mask] == y_eval[mask])) if mask.any() else 0.0
    return acc, preds


def run_wake_phase(state, X, y, mode="siesta", remind_rehearsal=50):
    """Stream samples one at a time. Returns per-sample predictions (made after each update)."""
    codes, X_rec = _encode_reconstruct(state.codec, X)
    preds = np.empty(len(y), dtype=np.int64)
    if mode in ("siesta", "awake_only"):
        # G is frozen while awake, so embeddings can be computed up front
        Z = sleep.embed(state.net, X_rec)
        for i in range(len(y)):
            state.buffer.insert(codes[i], y[i], state.rng)
            state.head.online_update(Z[i], y[i])
            state.seen_classes.add(int(y[i]))
            preds[i] = state.head.predict(Z[i])
        return preds
    if mode != "remind":
        raise ConfigError(f"wake phase not defined for mode {mode!r}")
    if state.remind_opt is None:
        raise UsageError("remind mode needs an optimizer state")
    for i in range(len(y)):
        label = int(y[i])
        x = X_rec[i:i + 1]
        if not state.head.active()[label]:
            z, _ = nn.forward(state.net, x)
            state.head.online_update(z[0], label)
        n_old = min(remind_rehearsal, len(state.buffer))
        if n_old:
            idx = state.rng.choice(len(state.buffer), n_old, replace=False)
            Xo, yo = state.buffer.reconstruct_batch(idx, state.codec)
            Xb, yb = np.concatenate([x, Xo]), np.concatenate([[label], yo])
        else:
            Xb, yb = x, np.array([label])
        sleep.train_step(state.net, state.head, state.remind_opt, Xb, yb)
        state.updates += len(yb)
        state.buffer.insert(codes[i], label, state.rng)
        state.seen_classes.add(label)
        z, _ = nn.forward(state.net, x)
        preds[i] = state.head.predict(z[0])
    return preds


def base_initialize(cfg, X_base, y_base, seed):
    """PQ fit on all base vectors, then supervised training of the top network
    and head on reconstructed base tensors. Returns (net, head, codec, n_updates, log)."""
    r, s, d = X_base.shape[1:]
    vectors = X_base.reshape(-1, d)
    codec = pq.fit(vectors, cfg.pq.n_codebooks, cfg.pq.codebook_size, seed=seed,
                   iterations=cfg.pq.iterations, restarts=cfg.pq.restarts)
    if cfg.pq.rotation:
        codec = pq.fit_rotation(codec, vectors, cfg.pq.rotation_iterations)
    net = nn.Network.init(nn.default_specs(d, cfg.model.embed_dim), seed)
    n_classes = cfg.data.n_classes
    head = CosineHead(n_classes, cfg.model.embed_dim, cfg.model.tau)
    n_updates, rows = train_offline(net, head, codec, X_base, y_base, cfg,
                                    cfg.base.epochs * len(y_base), cfg.base.policy, seed)
    return net, head, codec, n_updates, rows


def fit_base(cfg, dataset):
    """Base initialization only, for reuse across runs: (net, head, codec, n_updates)."""
    m = dataset.split == BASE
    net, head, codec, n_updates, _ = base_initialize(cfg, dataset.tensors[m], dataset.labels[m], cfg.seed)
    return net, head, codec, n_updates


def train_offline(net, head, codec, X, y, cfg, budget, policy, seed):
    """Running-mean head init over all (X, y), then ``budget`` rehearsal updates
    drawn from an unbounded buffer holding every sample."""
    rng = np.random.default_rng(seed + 7919)
    codes, X_rec = _encode_reconstruct(codec, X)
    Z = sleep.embed(net, X_rec)
    for zi, yi in zip(Z, y):
        head.online_update(zi, yi)
    buf = ReplayBuffer(codec.entry_bytes(*X.shape[1:3]) * max(len(y), 1), codes.shape[1:])
    for c, yi in zip(codes, y):
        buf.insert(c, yi, rng)
    scfg = copy.deepcopy(cfg.sleep)
    scfg.updates = budget - budget % scfg.batch_size
    _, _, rows = sleep.consolidate(net, head, buf, codec, scfg, policy, rng)
    return scfg.updates if rows else 0, rows


# ---------------------------------------------------------------- experiment

def _plan_sleep_updates(cfg, n_sleeps):
    q = cfg.sleep.batch_size
    return n_sleeps * (cfg.sleep.updates - cfg.sleep.updates % q)


def _stream_schedule(cfg, y_stream):
    plan = cfg.plan
    order = make_ordering(y_stream, plan.ordering, cfg.seed, plan.class_order, plan.permutation or None)
    every_samples = plan.sleep_every_samples
    every_classes = plan.sleep_every_classes
    if every_samples == 0 and every_classes > 0 and plan.ordering != "class_incremental":
        # classes-seen alias: the same number of sleeps spread evenly over the stream
        n_cls = len(np.unique(y_stream))
        every_samples = max(1, int(round(len(y_stream) * every_classes / n_cls)))
    cuts = wake_boundaries(y_stream[order], every_samples, every_classes if every_samples == 0 else 0,
                           plan.sleep_at_end)
    return order, cuts


def run_experiment(cfg, dataset, base=None):
    """Run one experiment described by ``cfg`` on a split dataset.

    ``base`` optionally supplies a pre-fitted (net, head, codec, base_updates)
    tuple from ``fit-base``; otherwise base initialization runs here.
    """
    if dataset.split is None:
        raise ConfigError("dataset has no split tags; call make_splits first")
    plan = cfg.plan
    seed = cfg.seed
    X, y = dataset.tensors, dataset.labels
    m_base, m_stream, m_eval = dataset.split == BASE, dataset.split == STREAM, dataset.split == EVAL
    X_base, y_base = X[m_base], y[m_base]
    X_stream, y_stream = X[m_stream], y[m_stream]
    X_eval, y_eval = X[m_eval], y[m_eval]
    if len(y_base) == 0:
        raise ConfigError("no base-initialization samples")
    base_classes = set(int(c) for c in np.unique(y_base))
    order, cuts = _stream_schedule(cfg, y_stream) if len(y_stream) else (np.zeros(0, int), [])
    update_log = []

    if base is None:
        net, head, codec, base_updates, rows = base_initialize(cfg, X_base, y_base, seed)
        update_log += [dict(r, phase="base") for r in rows]
    else:
        net, head, codec, base_updates = base
        net, head = net.copy(), head.copy()
    X_eval_rec = codec.reconstruct(X_eval)
    r, s = X.shape[1:3]

    if plan.mode == "offline_oracle":
        budget = plan.offline_updates or (base_updates + _plan_sleep_updates(cfg, len(cuts)))
        net = nn.Network.init(net.specs, seed)
        head = CosineHead(head.n_classes, head.dim, cfg.model.tau)
        X_all = np.concatenate([X_base, X_stream])
        y_all = np.concatenate([y_base, y_stream])
        n_up, rows = train_offline(net, head, codec, X_all, y_all, cfg, budget, "uniform", seed)
        update_log += [dict(r, phase="offline") for r in rows]
        state = LearnerState(net, head, codec, ReplayBuffer(codec.entry_bytes(r, s) * len(y_all),
                                                            (r, s, codec.n_codebooks)), None)
        acc, preds = evaluate(state, X_eval_rec, y_eval)
        rec = MetricsRecord(plan.mode, plan.ordering, seed, acc, updates=n_up, base_updates=0,
                            peak_memory_bytes=codec.entry_bytes(r, s) * len(y_all))
        rec.steps.append({"step": 1, "seen_classes": len(np.unique(y_all)), "pre_sleep_acc": acc,
                          "post_sleep_acc": acc, "U": n_up, "M": rec.peak_memory_bytes})
        rec.alpha_t.append(acc)
        return RunResult(rec.finalize(), update_log, preds, y_eval, state=state)

    rng = np.random.default_rng(seed + 1)
    buf = ReplayBuffer(cfg.buffer.capacity_bytes, (r, s, codec.n_codebooks))
    for c, yi in zip(codec.encode(X_base), y_base):
        buf.insert(c, yi, rng)
    state = LearnerState(net, head, codec, buf, rng, seen_classes=set(base_classes))
    if plan.mode == "remind":
        state.remind_opt = sleep.make_optimizer(net, head, 1, cfg.sleep, schedule=False)
        state.remind_opt.base_lr = plan.remind_lr

    base_acc, _ = evaluate(state, X_eval_rec, y_eval, state.seen_classes)
    rec = MetricsRecord(plan.mode, plan.ordering, seed, base_acc, base_updates=base_updates)
    online_correct = 0
    start = 0
    for t, end in enumerate(cuts, 1):
        sl = order[start:end]
        preds = run_wake_phase(state, X_stream[sl], y_stream[sl], plan.mode, plan.remind_rehearsal)
        online_correct += int(np.sum(preds == y_stream[sl]))
        start = end
        pre, _ = evaluate(state, X_eval_rec, y_eval, state.seen_classes)
        post = pre
        if plan.mode == "siesta":
            scfg = copy.deepcopy(cfg.sleep)
            if plan.update_cap:
                room = plan.update_cap - state.updates
                if room < scfg.updates:
                    scfg.updates = max(0, room - room % scfg.batch_size)
                    rec.stopped_early = True
            _, _, rows = sleep.consolidate(state.net, state.head, state.buffer, codec, scfg,
                                           plan.policy, state.rng, seen_updates=state.updates)
            if rows:
                state.updates = rows[-1]["seen_updates"]
            update_log += [dict(row, phase=f"sleep{t}") for row in rows]
            post, _ = evaluate(state, X_eval_rec, y_eval, state.seen_classes)
        elif plan.update_cap and state.updates >= plan.update_cap:
            rec.stopped_early = True
        rec.alpha_t.append(post)
        rec.steps.append({"step": t, "seen_classes": len(state.seen_classes), "pre_sleep_acc": pre,
                          "post_sleep_acc": post, "U": state.updates, "M": state.buffer.peak_bytes})
        if rec.stopped_early:
            break
    _, final_preds = evaluate(state, X_eval_rec, y_eval)
    rec.updates = state.updates
    rec.peak_memory_bytes = state.buffer.peak_bytes
    return RunResult(rec.finalize(), update_log, final_preds, y_eval, online_correct, int(start), state)
