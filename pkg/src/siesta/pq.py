"""Product quantization of the channel vectors inside latent tensors.

Each (r, s, d) tensor is treated as r*s vectors of length d. A codec splits d
into ``n_codebooks`` contiguous subspaces, each quantized against its own
k-means codebook, and stores one byte per subspace per spatial position.
An optional orthogonal rotation (OPQ style) is applied before splitting.
"""
import logging
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

CODEC_MAGIC = b"SIESTAPQ"
LABEL_BYTES = 4


@dataclass
class KMeansResult:
    centroids: np.ndarray
    objective: float
    history: list


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.full(n, np.inf)
    kernels.min_sq_dist_update(x, centroids[0], d2)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k; remaining picks are duplicates
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        kernels.min_sq_dist_update(x, centroids[j], d2)
    return centroids


def kmeans(x, k, rng, iterations=25):
    """Lloyd's algorithm from a k-means++ start.

    An empty cluster is re-seeded with the point farthest from its current
    centroid. ``history`` holds the objective (sum of squared distances) of
    each assignment step and is non-increasing.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    centroids = _kmeans_pp(x, k, rng)
    labels, d2 = kernels.nearest_centroid(x, centroids)
    history = [float(d2.sum())]
    for _ in range(iterations):
        sums, counts = kernels.lloyd_update(x, labels, k)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(d2))
            centroids[j] = x[far]
            labels[far] = j
            d2[far] = 0.0
        labels, d2 = kernels.nearest_centroid(x, centroids)
        obj = float(d2.sum())
        history.append(obj)
        if obj == history[-2]:
            break
    return KMeansResult(centroids, history[-1], history)


class PQCodec:
    def __init__(self, codebooks, rotation=None):
        codebooks = np.asarray(codebooks, dtype=np.float64)
        if codebooks.ndim != 3:
            raise ConfigError("codebooks must be (n_codebooks, codebook_size, sub_dim)")
        if codebooks.shape[1] > 256:
            raise ConfigError("codebook_size > 256 does not fit a byte code")
        self.codebooks = codebooks
        self.rotation = None if rotation is None else np.asarray(rotation, dtype=np.float64)
        if self.rotation is not None and self.rotation.shape != (self.dim, self.dim):
            raise ConfigError(f"rotation must be {self.dim}x{self.dim}")

    @property
    def n_codebooks(self):
        return self.codebooks.shape[0]

    @property
    def codebook_size(self):
        return self.codebooks.shape[1]

    @property
    def sub_dim(self):
        return self.codebooks.shape[2]

    @property
    def dim(self):
        return self.n_codebooks * self.sub_dim

    def entry_bytes(self, r, s):
        """Storage for one encoded tensor: one byte per code plus the label."""
        return r * s * self.n_codebooks + LABEL_BYTES

    # ------------------------------------------------------------ vectors

    def encode_vectors(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ConfigError(f"expected (n, {self.dim}) vectors, got {x.shape}")
        if self.rotation is not None:
            x = x @ self.rotation.T
        return kernels.pq_encode(x, self.codebooks)

    def decode_vectors(self, codes):
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.n_codebooks:
            raise DataError(f"expected (n, {self.n_codebooks}) codes, got {codes.shape}")
        if codes.size and int(codes.max()) >= self.codebook_size:
            raise DataError(f"code {int(codes.max())} >= codebook_size {self.codebook_size}")
        y = kernels.pq_decode(codes, self.codebooks)
        if self.rotation is not None:
            y = y @ self.rotation
        return y

    # ------------------------------------------------------------ tensors

    def encode(self, tensor):
        """(..., r, s, d) tensor(s) -> (..., r, s, n_codebooks) uint8 codes."""
        t = np.asarray(tensor, dtype=np.float64)
        if t.shape[-1] != self.dim:
            raise ConfigError(f"tensor channel dim {t.shape[-1]} != codec dim {self.dim}")
        codes = self.encode_vectors(t.reshape(-1, self.dim))
        return codes.reshape(t.shape[:-1] + (self.n_codebooks,))

    def decode(self, codes):
        codes = np.asarray(codes)
        y = self.decode_vectors(codes.reshape(-1, self.n_codebooks))
        return y.reshape(codes.shape[:-1] + (self.dim,))

    def reconstruct(self, tensor):
        return self.decode(self.encode(tensor))

    def quantization_error(self, vectors):
        """Mean squared reconstruction error per vector."""
        x = np.asarray(vectors, dtype=np.float64).reshape(-1, self.dim)
        y = self.decode_vectors(self.encode_vectors(x))
        return float(np.mean(np.sum((x - y) ** 2, axis=1)))

    # ------------------------------------------------------------ io

    def to_bytes(self):
        flag = 0 if self.rotation is None else 1
        out = [CODEC_MAGIC, struct.pack("<IIIB", self.n_codebooks, self.codebook_size, self.dim, flag),
               np.ascontiguousarray(self.codebooks, dtype="<f8").tobytes()]
        if flag:
            out.append(np.ascontiguousarray(self.rotation, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        if buf[:8] != CODEC_MAGIC:
            raise DataError("bad codec magic")
        try:
            M, K, d, flag = struct.unpack_from("<IIIB", buf, 8)
        except struct.error as exc:
            raise DataError("truncated codec header") from exc
        if M == 0 or d % M:
            raise DataError(f"codec dim {d} not divisible by {M} codebooks")
        off = 8 + 13
        n_cb = M * K * (d // M)
        need = off + 8 * n_cb + (8 * d * d if flag else 0)
        if len(buf) != need:
            raise DataError(f"codec file has {len(buf)} bytes, expected {need}")
        cb = np.frombuffer(buf, dtype="<f8", count=n_cb, offset=off).reshape(M, K, d // M)
        rot = None
        if flag:
            rot = np.frombuffer(buf, dtype="<f8", count=d * d, offset=off + 8 * n_cb).reshape(d, d)
        return cls(cb.astype(np.float64), None if rot is None else rot.astype(np.float64))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _fit_codebooks(x, n_codebooks, codebook_size, rng, iterations, restarts):
    sub = x.shape[1] // n_codebooks
    books = np.empty((n_codebooks, codebook_size, sub))
    for m in range(n_codebooks):
        xs = np.ascontiguousarray(x[:, m * sub:(m + 1) * sub])
        best = None
        for _ in range(restarts):
            res = kmeans(xs, codebook_size, rng, iterations)
            if best is None or res.objective < best.objective:
                best = res
        books[m] = best.centroids
    return books


def fit(vectors, n_codebooks=8, codebook_size=256, seed=0, iterations=25, restarts=3):
    """Fit per-subspace k-means codebooks (best of ``restarts``) to (N, d) vectors."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("fit expects (N, d) vectors")
    N, d = x.shape
    if n_codebooks < 1 or d % n_codebooks:
        raise ConfigError(f"dim {d} not divisible by n_codebooks {n_codebooks}")
    if not 1 <= codebook_size <= 256:
        raise ConfigError("codebook_size must be in [1, 256]")
    if N < codebook_size:
        raise ConfigError(f"need at least codebook_size={codebook_size} vectors, got {N}")
    rng = np.random.default_rng(seed)
    return PQCodec(_fit_codebooks(x, n_codebooks, codebook_size, rng, iterations, restarts))


def _lloyd_refine(x, centroids, iterations):
    centroids = centroids.copy()
    k = centroids.shape[0]
    labels, d2 = kernels.nearest_centroid(x, centroids)
    for _ in range(iterations):
        sums, counts = kernels.lloyd_update(x, labels, k)
        ne = counts > 0
        centroids[ne] = sums[ne] / counts[ne, None]
        labels, d2 = kernels.nearest_centroid(x, centroids)
    return centroids


def fit_rotation(codec, vectors, iterations=10, lloyd_iterations=5):
    """Alternate an orthogonal Procrustes rotation update with warm-started
    codebook refinement. Keeps the best state seen, so the training error
    never exceeds the starting error.
    """
    x = np.asarray(vectors, dtype=np.float64).reshape(-1, codec.dim)
    R = np.eye(codec.dim) if codec.rotation is None else codec.rotation.copy()
    books = codec.codebooks.copy()
    best = PQCodec(books.copy(), R.copy())
    best_err = best.quantization_error(x)
    sub = codec.sub_dim
    for _ in range(iterations):
        cur = PQCodec(books, R)
        y_hat = kernels.pq_decode(cur.encode_vectors(x), books)
        try:
            U, _, Vt = np.linalg.svd(x.T @ y_hat)
        except np.linalg.LinAlgError:
            log.warning("SVD failed in fit_rotation; keeping identity rotation")
            R = np.eye(codec.dim)
            break
        R = (U @ Vt).T
        xr = x @ R.T
        for m in range(codec.n_codebooks):
            xs = np.ascontiguousarray(xr[:, m * sub:(m + 1) * sub])
            books[m] = _lloyd_refine(xs, books[m], lloyd_iterations)
        cand = PQCodec(books.copy(), R.copy())
        err = cand.quantization_error(x)
        if err < best_err:
            best, best_err = cand, err
    if not np.all(np.isfinite(best.rotation)):
        return PQCodec(codec.codebooks.copy(), np.eye(codec.dim))
    return best


def quantization_error(codec, vectors):
    return codec.quantization_error(vectors)
