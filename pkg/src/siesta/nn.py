"""Minimal differentiable top network (the trainable layers between the frozen
extractor and the cosine head), plus SGD with momentum and a OneCycle schedule.

Tensors are channels-last: a batch of latent tensors has shape (B, r, s, d).
"""
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, NumericError, UsageError

KINDS = ("dense", "pointwise_conv", "global_avg_pool", "gelu")
TRAINABLE = ("dense", "pointwise_conv")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: Optional[int] = None

    @property
    def trainable(self):
        return self.kind in TRAINABLE

    @property
    def output_dim(self):
        return self.out_dim if self.trainable else self.in_dim


def default_specs(d, embed_dim):
    """pointwise_conv(d->2d) + gelu + pool + dense(2d->e) + gelu + dense(e->e)."""
    return [
        LayerSpec("pointwise_conv", d, 2 * d),
        LayerSpec("gelu", 2 * d),
        LayerSpec("global_avg_pool", 2 * d),
        LayerSpec("dense", 2 * d, embed_dim),
        LayerSpec("gelu", embed_dim),
        LayerSpec("dense", embed_dim, embed_dim),
    ]


def validate_specs(specs):
    if not specs:
        raise ConfigError("network needs at least one layer")
    pooled = False
    n_pool = 0
    dim = specs[0].in_dim
    for i, spec in enumerate(specs):
        if spec.kind not in KINDS:
            raise ConfigError(f"layers[{i}]: unknown kind {spec.kind!r}")
        if spec.in_dim < 1 or (spec.trainable and (spec.out_dim is None or spec.out_dim < 1)):
            raise ConfigError(f"layers[{i}]: dims must be positive")
        if not spec.trainable and spec.out_dim not in (None, spec.in_dim):
            raise ConfigError(f"layers[{i}]: {spec.kind} has no out_dim")
        if spec.in_dim != dim:
            raise ConfigError(f"layers[{i}]: in_dim {spec.in_dim} does not chain from {dim}")
        if spec.kind == "global_avg_pool":
            n_pool += 1
            pooled = True
        elif spec.kind == "pointwise_conv" and pooled:
            raise ConfigError(f"layers[{i}]: pointwise_conv after pooling")
        elif spec.kind == "dense" and not pooled:
            raise ConfigError(f"layers[{i}]: dense before pooling")
        dim = spec.output_dim
    if n_pool != 1:
        raise ConfigError(f"exactly one global_avg_pool required, got {n_pool}")
    if not any(s.trainable for s in specs):
        raise ConfigError("network has no trainable layer")


class Network:
    """Ordered layer stack with per-layer (W, b) parameters.

    ``version`` is bumped on every in-place parameter update so that a tape
    recorded before the update is rejected by :func:`backward`.
    """

    def __init__(self, specs, params=None):
        specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        validate_specs(specs)
        self.specs = specs
        self.params = []
        for i, spec in enumerate(specs):
            if not spec.trainable:
                self.params.append({})
                continue
            p = {} if params is None else params[i]
            W = np.asarray(p.get("W", np.zeros((spec.in_dim, spec.out_dim))), dtype=np.float64)
            b = np.asarray(p.get("b", np.zeros(spec.out_dim)), dtype=np.float64)
            if W.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise ConfigError(f"layers[{i}]: parameter shapes {W.shape}, {b.shape} do not match spec")
            self.params.append({"W": W.copy(), "b": b.copy()})
        self.version = 0

    @classmethod
    def init(cls, specs, seed):
        """Kaiming (fan-in) normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = []
        for spec in specs:
            if spec.kind in TRAINABLE:
                W = rng.standard_normal((spec.in_dim, spec.out_dim)) * math.sqrt(2.0 / spec.in_dim)
                params.append({"W": W, "b": np.zeros(spec.out_dim)})
            else:
                params.append({})
        return cls(specs, params)

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].output_dim

    def trainable_layers(self):
        return [i for i, s in enumerate(self.specs) if s.trainable]

    def depth_index(self, layer):
        """0 is reserved for the output head; the last trainable layer here is 1."""
        order = self.trainable_layers()
        return len(order) - order.index(layer)

    def param_arrays(self):
        """Parameter arrays in layer order (W, b per trainable layer)."""
        out = []
        for i in self.trainable_layers():
            out += [self.params[i]["W"], self.params[i]["b"]]
        return out

    def param_depths(self):
        out = []
        for i in self.trainable_layers():
            d = self.depth_index(i)
            out += [d, d]
        return out

    def copy(self):
        return Network(self.specs, [dict((k, v.copy()) for k, v in p.items()) for p in self.params])

    def n_params(self):
        return sum(a.size for a in self.param_arrays())


@dataclass
class Tape:
    net_id: int
    version: int
    inputs: list


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def forward(net, batch):
    """Run the stack on a (B, r, s, d) batch; returns (B, e) embeddings and the tape."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != net.in_dim:
        raise ConfigError(f"expected (B, r, s, {net.in_dim}) input, got {x.shape}")
    inputs = []
    for spec, p in zip(net.specs, net.params):
        inputs.append(x)
        if spec.trainable:
            x = x @ p["W"] + p["b"]
        elif spec.kind == "gelu":
            x = _gelu(x)
        else:
            x = x.mean(axis=(1, 2))
    return x, Tape(id(net), net.version, inputs)


def backward(net, tape, output_grad):
    """Parameter gradients (same order as ``net.param_arrays()``) and the input gradient."""
    if tape.net_id != id(net) or tape.version != net.version:
        raise UsageError("tape does not belong to the current state of this network")
    g = np.asarray(output_grad, dtype=np.float64)
    grads = {}
    for i in range(len(net.specs) - 1, -1, -1):
        spec, x = net.specs[i], tape.inputs[i]
        if spec.trainable:
            W = net.params[i]["W"]
            xf = x.reshape(-1, spec.in_dim)
            gf = g.reshape(-1, spec.out_dim)
            grads[i] = (xf.T @ gf, gf.sum(axis=0))
            g = g @ W.T
        elif spec.kind == "gelu":
            g = g * _gelu_grad(x)
        else:
            r, s = x.shape[1], x.shape[2]
            g = np.broadcast_to(g[:, None, None, :] / (r * s), x.shape).copy()
    flat = []
    for i in net.trainable_layers():
        flat += list(grads[i])
    return flat, g


# ---------------------------------------------------------------- optimizer

@dataclass
class ScheduleConfig:
    pct_start: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4


def onecycle_lr(step, total, max_lr, params=None):
    """Cosine warmup from max_lr/div_start to max_lr, then cosine anneal to max_lr/div_final."""
    params = params or ScheduleConfig()
    if total <= 0:
        raise ConfigError("OneCycle needs total > 0 steps")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    lo = max_lr / params.div_start
    end = max_lr / params.div_final
    up = params.pct_start * total
    if step <= up:
        if up == 0:
            return max_lr
        return max_lr + (lo - max_lr) * (1.0 + math.cos(math.pi * step / up)) / 2.0
    frac = (step - up) / (total - up)
    return end + (max_lr - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


@dataclass
class OptimizerState:
    buffers: list
    total_steps: int
    base_lr: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    layer_decay: float = 0.99
    schedule: Optional[ScheduleConfig] = field(default_factory=ScheduleConfig)
    step: int = 0

    @classmethod
    def for_params(cls, params, total_steps, **kw):
        return cls(buffers=[np.zeros_like(p) for p in params], total_steps=total_steps, **kw)

    def current_lr(self):
        """Scheduled LR at this step; a constant base_lr when ``schedule`` is None."""
        if self.schedule is None:
            return self.base_lr
        return onecycle_lr(self.step, self.total_steps, self.base_lr, self.schedule)


def sgd_step(params, grads, state, depths, decay_mask=None):
    """In-place momentum SGD over parallel lists of arrays.

    v <- momentum*v + g + wd*theta ; theta <- theta - lr * layer_decay**depth * v.
    ``decay_mask[i]`` False exempts array i from weight decay. Returns the
    scheduled (depth 0) learning rate used.
    """
    if state.schedule is not None and state.step >= state.total_steps:
        raise UsageError(f"optimizer already took all {state.total_steps} steps")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient in parameter {i} (shape {np.shape(g)}, {bad} bad entries)")
    lr = state.current_lr()
    for i, (p, g, v) in enumerate(zip(params, grads, state.buffers)):
        wd = state.weight_decay if decay_mask is None or decay_mask[i] else 0.0
        v *= state.momentum
        v += g
        if wd:
            v += wd * p
        p -= lr * state.layer_decay ** depths[i] * v
    state.step += 1
    return lr


# ---------------------------------------------------------------- checkpoints

NET_MAGIC = b"SIESTANN"
NET_VERSION = 1
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


def network_to_bytes(net):
    out = [NET_MAGIC, struct.pack("<II", NET_VERSION, len(net.specs))]
    for spec in net.specs:
        out.append(struct.pack("<BII", _KIND_CODE[spec.kind], spec.in_dim, spec.output_dim))
    for a in net.param_arrays():
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def network_from_bytes(buf, offset=0):
    """Parse a network; returns (net, offset just past it)."""
    try:
        if buf[offset:offset + 8] != NET_MAGIC:
            raise DataError("bad network checkpoint magic")
        offset += 8
        version, n_layers = struct.unpack_from("<II", buf, offset)
        offset += 8
        if version != NET_VERSION:
            raise DataError(f"unsupported network checkpoint version {version}")
        specs = []
        for _ in range(n_layers):
            code, din, dout = struct.unpack_from("<BII", buf, offset)
            offset += 9
            kind = KINDS[code]
            specs.append(LayerSpec(kind, din, dout if kind in TRAINABLE else None))
        params = []
        for spec in specs:
            if not spec.trainable:
                params.append({})
                continue
            nW = spec.in_dim * spec.out_dim
            W = np.frombuffer(buf, dtype="<f8", count=nW, offset=offset).reshape(spec.in_dim, spec.out_dim)
            offset += 8 * nW
            b = np.frombuffer(buf, dtype="<f8", count=spec.out_dim, offset=offset)
            offset += 8 * spec.out_dim
            params.append({"W": W.astype(np.float64), "b": b.astype(np.float64)})
    except (struct.error, ValueError, IndexError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"truncated or corrupt network checkpoint: {exc}") from exc
    return Network(specs, params), offset


def save_checkpoint(path, net, head=None):
    data = network_to_bytes(net)
    if head is not None:
        data += head.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path):
    """Returns (net, head or None)."""
    from .head import CosineHead

    with open(path, "rb") as fh:
        buf = fh.read()
    net, off = network_from_bytes(buf)
    head = None
    if off < len(buf):
        head, off = CosineHead.from_bytes(buf, off)
    if off != len(buf):
        raise DataError(f"{len(buf) - off} trailing bytes in checkpoint")
    return net, head
