"""Cosine-softmax output layer with running-mean online updates."""
import struct

import numpy as np

from .errors import ConfigError, DataError, NumericError, UsageError

HEAD_MAGIC = b"HEAD"


def _safe_unit(x):
    """Row-normalize; zero rows stay zero. Returns (unit rows, norms)."""
    norms = np.linalg.norm(x, axis=-1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[..., None], norms


class CosineHead:
    """K class vectors f_k, integer counters c_k and a temperature tau.

    Rows with zero norm are inactive: their cosine is defined as 0 and they are
    excluded from the softmax (probability 0), so classes that were allocated
    but never observed cannot be predicted.
    """

    def __init__(self, n_classes, dim, tau=0.1):
        if n_classes < 1 or dim < 1:
            raise ConfigError("head needs n_classes >= 1 and dim >= 1")
        if not tau > 0:
            raise ConfigError("temperature must be positive")
        self.weights = np.zeros((n_classes, dim))
        self.counters = np.zeros(n_classes, dtype=np.int64)
        self.tau = float(tau)

    @property
    def n_classes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]

    def active(self):
        return np.linalg.norm(self.weights, axis=1) > 0

    def copy(self):
        h = CosineHead(self.n_classes, self.dim, self.tau)
        h.weights = self.weights.copy()
        h.counters = self.counters.copy()
        return h

    # ------------------------------------------------------------ inference

    def cosines(self, Z):
        """(B, K) cosine matrix for a (B, e) batch."""
        zu, _ = _safe_unit(np.atleast_2d(np.asarray(Z, dtype=np.float64)))
        fu, _ = _safe_unit(self.weights)
        return zu @ fu.T

    def probabilities(self, A):
        active = self.active()
        if not active.any():
            raise UsageError("head has no active class")
        logits = np.where(active, A / self.tau, -np.inf)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def scores_batch(self, Z):
        A = self.cosines(Z)
        return A, self.probabilities(A)

    def scores(self, z):
        A, P = self.scores_batch(np.asarray(z, dtype=np.float64)[None])
        return A[0], P[0]

    def predict_batch(self, Z):
        A = self.cosines(Z)
        active = self.active()
        if not active.any():
            raise UsageError("head has no active class")
        return np.argmax(np.where(active, A, -np.inf), axis=1)

    def predict(self, z):
        return int(self.predict_batch(np.asarray(z)[None])[0])

    # ------------------------------------------------------------ wake update

    def online_update(self, z, label):
        """f_k <- (c_k f_k + z) / (c_k + 1); c_k <- c_k + 1."""
        k = int(label)
        if not 0 <= k < self.n_classes:
            raise UsageError(f"label {k} outside [0, {self.n_classes})")
        c = self.counters[k]
        self.weights[k] = (c * self.weights[k] + np.asarray(z, dtype=np.float64)) / (c + 1)
        self.counters[k] = c + 1

    # ------------------------------------------------------------ training

    def targets(self, labels):
        """One-hot targets for integer labels; soft (B, K) targets pass through."""
        labels = np.asarray(labels)
        if labels.ndim == 2:
            return labels.astype(np.float64)
        T = np.zeros((labels.shape[0], self.n_classes))
        T[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
        return T

    def backward(self, Z, labels):
        """Mean cross-entropy and its exact gradients.

        ``labels`` are integer ids or a (B, K) soft-target matrix (rows sum
        to 1, e.g. from mixup). Returns (loss, dweights, dtau, dZ).
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        B = Z.shape[0]
        if B == 0:
            raise UsageError("empty batch")
        T = self.targets(labels)
        active = self.active()
        if np.any(T[:, ~active] != 0):
            raise UsageError("target mass on an inactive class")
        zu, zn = _safe_unit(Z)
        fu, fn = _safe_unit(self.weights)
        A = zu @ fu.T
        P = self.probabilities(A)
        logits = np.where(active, A / self.tau, -np.inf)
        m = logits.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        logp = np.where(active, logits - lse, 0.0)
        loss = -np.sum(T * logp) / B
        dl = (P - T) / B
        dA = dl / self.tau
        dtau = float(np.sum(dl * -A) / self.tau ** 2)
        zsafe = np.where(zn > 0, zn, 1.0)
        fsafe = np.where(fn > 0, fn, 1.0)
        dZ = (dA @ fu - np.sum(dA * A, axis=1, keepdims=True) * zu) / zsafe[:, None]
        dZ[zn == 0] = 0.0
        dW = (dA.T @ zu - np.sum(dA * A, axis=0)[:, None] * fu) / fsafe[:, None]
        dW[fn == 0] = 0.0
        if not (np.isfinite(loss) and np.all(np.isfinite(dW)) and np.isfinite(dtau)):
            raise NumericError(f"non-finite head loss/gradient (loss={loss}, tau={self.tau})")
        return float(loss), dW, dtau, dZ

    def loss_per_sample(self, Z, labels):
        """Per-sample cross-entropy, no gradients."""
        A = self.cosines(Z)
        active = self.active()
        logits = np.where(active, A / self.tau, -np.inf)
        m = logits.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
        labels = np.asarray(labels, dtype=np.int64)
        return lse - logits[np.arange(len(labels)), labels]

    # ------------------------------------------------------------ serialization

    def to_bytes(self):
        return b"".join([
            HEAD_MAGIC,
            struct.pack("<II", self.n_classes, self.dim),
            np.ascontiguousarray(self.weights, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.counters, dtype="<i8").tobytes(),
            struct.pack("<d", self.tau),
        ])

    @classmethod
    def from_bytes(cls, buf, offset=0):
        try:
            if buf[offset:offset + 4] != HEAD_MAGIC:
                raise DataError("bad head magic")
            offset += 4
            K, e = struct.unpack_from("<II", buf, offset)
            offset += 8
            W = np.frombuffer(buf, dtype="<f8", count=K * e, offset=offset).reshape(K, e)
            offset += 8 * K * e
            c = np.frombuffer(buf, dtype="<i8", count=K, offset=offset)
            offset += 8 * K
            (tau,) = struct.unpack_from("<d", buf, offset)
            offset += 8
        except (struct.error, ValueError) as exc:
            raise DataError(f"truncated or corrupt head checkpoint: {exc}") from exc
        head = cls(K, e, tau)
        head.weights = W.astype(np.float64)
        head.counters = c.astype(np.int64)
        return head, offset
