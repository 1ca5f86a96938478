"""Offline consolidation: rehearsal policies, latent mixup/cutmix and the
budgeted training loop run while asleep.
"""
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import ConfigError, NumericError, UsageError

log = logging.getLogger(__name__)

POLICIES = (
    "balanced_uniform", "uniform", "min_rehearsal", "max_interference",
    "max_loss", "min_margin", "prototypical", "balanced_prototypical",
)
MODEL_POLICIES = {"max_interference", "max_loss", "min_margin", "prototypical", "balanced_prototypical"}
RANKED = {"min_rehearsal", "max_interference", "max_loss", "min_margin", "prototypical"}
BALANCED = {"balanced_uniform", "balanced_prototypical"}


@dataclass
class SleepConfig:
    updates: int = 0
    batch_size: int = 64
    augmentation: str = "none"
    p_cutmix: float = 0.6
    p_mixup: float = 0.4
    cutmix_beta: float = 1.0
    mixup_alpha: float = 0.1
    lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    layer_decay: float = 0.99
    schedule: nn.ScheduleConfig = field(default_factory=nn.ScheduleConfig)
    interference_k: int = 10

    def validate(self):
        if self.updates < 0:
            raise ConfigError("sleep.updates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("sleep.batch_size must be >= 1")
        if self.augmentation not in ("none", "mixup_cutmix"):
            raise ConfigError(f"unknown augmentation {self.augmentation!r}")
        for name in ("p_cutmix", "p_mixup"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"sleep.{name} must lie in [0, 1]")
        if self.p_cutmix + self.p_mixup > 1.0 + 1e-12:
            raise ConfigError("p_cutmix + p_mixup must not exceed 1")


def _check_policy(kind):
    if kind not in POLICIES:
        raise ConfigError(f"unknown rehearsal policy {kind!r}; choose from {POLICIES}")


# ---------------------------------------------------------------- scoring

def embed(net, X, chunk=512):
    out = []
    for lo in range(0, len(X), chunk):
        z, _ = nn.forward(net, X[lo:lo + chunk])
        out.append(z)
    return np.concatenate(out) if out else np.zeros((0, net.out_dim))


def interference_scores(Z, labels, k=10):
    """Mean cosine similarity of each embedding to its k most similar
    embeddings from other classes (0 when no other class is stored)."""
    norms = np.linalg.norm(Z, axis=1)
    U = Z / np.where(norms > 0, norms, 1.0)[:, None]
    S = U @ U.T
    S[labels[:, None] == labels[None, :]] = -np.inf
    n_other = np.sum(np.isfinite(S), axis=1)
    out = np.zeros(len(Z))
    for i in range(len(Z)):
        kk = min(k, n_other[i])
        if kk:
            out[i] = np.mean(np.partition(S[i], -kk)[-kk:])
    return out


def prototype_distances(Z, labels):
    d = np.empty(len(Z))
    for c in np.unique(labels):
        m = labels == c
        d[m] = np.linalg.norm(Z[m] - Z[m].mean(axis=0), axis=1)
    return d


def margin_scores(P):
    """Priority -(p_top1 - p_top2): small margins rank first."""
    P = np.asarray(P, dtype=np.float64)
    if P.shape[1] == 1:
        return -P[:, 0]
    top2 = np.sort(P, axis=1)[:, -2:]
    return -(top2[:, 1] - top2[:, 0])


def policy_scores(kind, buffer, codec=None, net=None, head=None, k=10):
    """Per-entry priority (higher = rehearse sooner)."""
    _check_policy(kind)
    n = len(buffer)
    if n == 0:
        raise UsageError("cannot score an empty buffer")
    if kind in ("balanced_uniform", "uniform"):
        return np.ones(n)
    if kind == "min_rehearsal":
        return -buffer.rehearsal_count[:n].astype(np.float64)
    if codec is None or net is None or (head is None and kind in ("max_loss", "min_margin")):
        raise ConfigError(f"policy {kind!r} needs the codec, network and head")
    X, y = buffer.decode_all(codec)
    Z = embed(net, X)
    if kind == "max_loss":
        return head.loss_per_sample(Z, y)
    if kind == "min_margin":
        return margin_scores(head.scores_batch(Z)[1])
    if kind == "max_interference":
        return interference_scores(Z, y, k)
    return -prototype_distances(Z, y)


# ---------------------------------------------------------------- selection

class RehearsalSampler:
    """Draws successive rehearsal mini-batches for one sleep phase.

    Entries are drawn without replacement across draws until the pool (the
    whole buffer, or one class for balanced kinds) is used up, then the pool
    refills. Priority kinds sample without replacement with probability
    proportional to the priority rank.
    """

    def __init__(self, kind, buffer, rng, scores=None):
        _check_policy(kind)
        if len(buffer) == 0:
            raise UsageError("cannot sample from an empty buffer")
        self.kind = kind
        self.rng = rng
        n = len(buffer)
        self.n = n
        self.scores = np.ones(n) if scores is None else np.asarray(scores, dtype=np.float64)
        if kind in RANKED and scores is None:
            raise ConfigError(f"policy {kind!r} needs scores")
        self.weights = rankdata(self.scores) if kind in RANKED else None
        self.used = np.zeros(n, dtype=bool)
        self.classes = buffer.classes()
        self.members = {c: buffer.members(c) for c in self.classes}
        self.cursor = {c: 0 for c in self.classes}
        self.start = 0
        if kind == "balanced_prototypical":
            # nearest-to-mean first; stable on ties
            self.order = {c: m[np.argsort(-self.scores[m], kind="stable")] for c, m in self.members.items()}
        elif kind == "balanced_uniform":
            self.order = {c: rng.permutation(m) for c, m in self.members.items()}

    def _from_pool(self, size):
        out = []
        while size > 0:
            free = np.flatnonzero(~self.used)
            if free.size == 0:
                self.used[:] = False
                continue
            take = min(size, free.size)
            if self.weights is None:
                pick = self.rng.choice(free, take, replace=False)
            else:
                w = self.weights[free]
                pick = self.rng.choice(free, take, replace=False, p=w / w.sum())
            self.used[pick] = True
            out.append(pick)
            size -= take
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def _from_class(self, c, count):
        order, out = self.order[c], []
        for _ in range(count):
            if self.cursor[c] == len(order):
                self.cursor[c] = 0
                if self.kind == "balanced_uniform":
                    order = self.order[c] = self.rng.permutation(self.members[c])
            out.append(order[self.cursor[c]])
            self.cursor[c] += 1
        return out

    def quotas(self, size):
        K = len(self.classes)
        base, rem = divmod(size, K)
        q = {c: base for c in self.classes}
        for j in range(rem):
            q[self.classes[(self.start + j) % K]] += 1
        self.start = (self.start + rem) % K
        return q

    def draw(self, size):
        if self.kind in BALANCED:
            out = []
            for c, cnt in self.quotas(size).items():
                out += self._from_class(c, cnt)
            return np.array(out, dtype=np.int64)
        return self._from_pool(min(size, self.n))


def select_rehearsal_set(kind, buffer, size, rng, scores=None):
    """One policy-driven selection of ``size`` buffer indices.

    Non-balanced kinds return at most ``len(buffer)`` distinct entries.
    Balanced kinds give every stored class floor(size/K) entries, the
    remainder going round-robin from the lowest class id; a class smaller
    than its quota is cycled.
    """
    if kind in ("uniform", "balanced_uniform") and scores is None:
        scores = np.ones(len(buffer))
    return RehearsalSampler(kind, buffer, rng, scores).draw(size)


# ---------------------------------------------------------------- augmentation

def cutmix_box(r, s, lam, rng):
    """Random rectangle whose area is about (1 - lam) of the r x s grid."""
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(r * cut), int(s * cut)
    cy, cx = int(rng.integers(r)), int(rng.integers(s))
    y1, y2 = np.clip(cy - ch // 2, 0, r), np.clip(cy + ch // 2, 0, r)
    x1, x2 = np.clip(cx - cw // 2, 0, s), np.clip(cx + cw // 2, 0, s)
    return int(y1), int(y2), int(x1), int(x2)


def mix_tensors(a, ya, b, yb, mode, rng, mixup_alpha=0.1, cutmix_beta=1.0, lam=None, box=None):
    """Mix two (r, s, d) tensors. Returns (out, (ya, yb, lam)) where lam is the
    weight on ``ya``: the convex weight for mixup, 1 - pasted area fraction for cutmix."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"cannot mix tensors of shapes {a.shape} and {b.shape}")
    if mode == "mixup":
        lam = float(rng.beta(mixup_alpha, mixup_alpha)) if lam is None else float(lam)
        return lam * a + (1.0 - lam) * b, (ya, yb, lam)
    if mode != "cutmix":
        raise ConfigError(f"unknown mix mode {mode!r}")
    r, s = a.shape[-3], a.shape[-2]
    if box is None:
        lam0 = float(rng.beta(cutmix_beta, cutmix_beta)) if lam is None else float(lam)
        box = cutmix_box(r, s, lam0, rng)
    y1, y2, x1, x2 = box
    out = a.copy()
    out[..., y1:y2, x1:x2, :] = b[..., y1:y2, x1:x2, :]
    lam = 1.0 - (y2 - y1) * (x2 - x1) / (r * s)
    return out, (ya, yb, lam)


def mix_batch(X, T, cfg, rng):
    """Apply the augmentation dispatch to a batch with soft targets T.

    u ~ U(0,1): u < p_cutmix -> cutmix, else u < p_cutmix + p_mixup -> mixup,
    else unchanged. One lambda (and one box) per batch, partners by permutation.
    Returns (X, T, mode, lam).
    """
    u = rng.random()
    if u < cfg.p_cutmix:
        mode = "cutmix"
    elif u < cfg.p_cutmix + cfg.p_mixup:
        mode = "mixup"
    else:
        return X, T, "none", 1.0
    perm = rng.permutation(len(X))
    Xm, (_, _, lam) = mix_tensors(X, None, X[perm], None, mode, rng, cfg.mixup_alpha, cfg.cutmix_beta)
    return Xm, lam * T + (1.0 - lam) * T[perm], mode, lam


# ---------------------------------------------------------------- training

def make_optimizer(net, head, total_steps, cfg, schedule=True):
    params = [head.weights, np.zeros(1)] + net.param_arrays()
    return nn.OptimizerState.for_params(
        params, total_steps, base_lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        layer_decay=cfg.layer_decay, schedule=cfg.schedule if schedule else None)


def train_step(net, head, opt, X, T):
    """One SGD step on head and network.

    The temperature is optimized through the logit scale s = 1/tau, whose
    gradient sum(dl * a) stays bounded as tau shrinks. Returns (loss, lr).
    """
    Z, tape = nn.forward(net, X)
    loss, dW, dtau, dZ = head.backward(Z, T)
    grads, _ = nn.backward(net, tape, dZ)
    scale = np.array([1.0 / head.tau])
    params = [head.weights, scale] + net.param_arrays()
    all_grads = [dW, np.array([-dtau * head.tau ** 2])] + grads
    depths = [0, 0] + net.param_depths()
    mask = [True, False] + [True] * len(grads)
    lr = nn.sgd_step(params, all_grads, opt, depths, mask)
    if not scale[0] > 0:
        raise NumericError(f"logit scale left the positive range ({scale[0]})")
    head.tau = float(1.0 / scale[0])
    net.version += 1
    return loss, lr


def consolidate(net, head, buffer, codec, config, policy, rng, seen_updates=0, scores=None):
    """Run one sleep phase of n = m // q mini-batch updates (in place).

    Returns (net, head, update_log) where each log row is
    {step, loss, lr, seen_updates}; seen_updates counts backward-passed samples.
    """
    config.validate()
    q = config.batch_size
    n_steps = config.updates // q
    if config.updates % q:
        log.warning("sleep updates %d not divisible by batch %d; running %d mini-batches",
                    config.updates, q, n_steps)
    update_log = []
    if n_steps == 0:
        return net, head, update_log
    if len(buffer) == 0:
        raise UsageError("cannot consolidate from an empty buffer")
    if scores is None:
        scores = policy_scores(policy, buffer, codec, net, head, config.interference_k)
    sampler = RehearsalSampler(policy, buffer, rng, scores)
    opt = make_optimizer(net, head, n_steps, config)
    for step in range(n_steps):
        idx = sampler.draw(q)
        X, y = buffer.reconstruct_batch(idx, codec)
        T = head.targets(y)
        if config.augmentation == "mixup_cutmix":
            X, T, _, _ = mix_batch(X, T, config, rng)
        loss, lr = train_step(net, head, opt, X, T)
        seen_updates += len(idx)
        update_log.append({"step": step, "loss": loss, "lr": lr, "seen_updates": seen_updates})
    return net, head, update_log


def write_update_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "seen_updates"])
        for r in rows:
            w.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"])), r["seen_updates"]])
