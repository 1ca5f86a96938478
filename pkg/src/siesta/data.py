"""Dataset ingestion and the frozen feature extractor.

The frozen extractor stands in for the bottom layers of the network: each
image becomes an (r, s, d) latent tensor that is never trained afterwards.
"""
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

BASE, STREAM, EVAL = 0, 1, 2

_IDX_DTYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("<").kind + str(v.itemsize): k for k, v in _IDX_DTYPES.items()}


@dataclass
class FeatureDataset:
    tensors: np.ndarray         # (N, r, s, d)
    labels: np.ndarray          # (N,) int64
    split: np.ndarray = None    # (N,) BASE / STREAM / EVAL, assigned by make_splits

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def shape(self):
        return self.tensors.shape[1:]

    def subset(self, mask):
        return FeatureDataset(self.tensors[mask], self.labels[mask],
                              None if self.split is None else self.split[mask])


# ---------------------------------------------------------------- IDX

def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path):
    """Parse an IDX file (optionally gzipped) into a numpy array."""
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise DataError(f"{path}: bad IDX magic")
    code, ndim = buf[2], buf[3]
    if code not in _IDX_DTYPES:
        raise DataError(f"{path}: unknown IDX type 0x{code:02x}")
    if len(buf) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    dt = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dt.itemsize
    body = buf[4 + 4 * ndim:]
    if len(body) != need:
        raise DataError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, array):
    a = np.asarray(array)
    key = a.dtype.kind + str(a.dtype.itemsize)
    if key not in _IDX_CODES:
        raise ConfigError(f"dtype {a.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    data = a.astype(_IDX_DTYPES[code]).tobytes()
    with (gzip.open(path, "wb") if str(path).endswith(".gz") else open(path, "wb")) as fh:
        fh.write(header + data)


def load_idx(images_path, labels_path):
    """Images scaled to [0, 1] (uint8 sources divided by 255) and int64 labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected a 3-d image array, got {images.ndim}-d")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataError("image and label counts differ")
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.0
    return images.astype(np.float64), labels.astype(np.int64)


def digits_idx(directory):
    """Write the scikit-learn 8x8 digits as IDX files (once) and return their paths."""
    os.makedirs(directory, exist_ok=True)
    img_path = os.path.join(directory, "digits-images-idx3-ubyte")
    lab_path = os.path.join(directory, "digits-labels-idx1-ubyte")
    if not (os.path.exists(img_path) and os.path.exists(lab_path)):
        from sklearn.datasets import load_digits

        d = load_digits()
        imgs = np.round(d.images * (255.0 / 16.0)).astype(np.uint8)
        write_idx(img_path, imgs)
        write_idx(lab_path, d.target.astype(np.uint8))
    return img_path, lab_path


# ---------------------------------------------------------------- extractor

@dataclass(frozen=True)
class RandomPatchExtractor:
    """Seeded random projection of image patches laid out on an r x s grid,
    followed by a ReLU. Deterministic for a given seed and image size."""
    seed: int
    r: int
    s: int
    d: int
    patch: int = 4

    def grid(self, h, w):
        if self.patch > min(h, w):
            raise ConfigError(f"patch {self.patch} larger than image {h}x{w}")
        ys = np.round(np.linspace(0, h - self.patch, self.r)).astype(int)
        xs = np.round(np.linspace(0, w - self.patch, self.s)).astype(int)
        return ys, xs

    def projection(self):
        rng = np.random.default_rng(self.seed)
        p2 = self.patch * self.patch
        return rng.standard_normal((p2, self.d)) / np.sqrt(p2)

    def __call__(self, images):
        images = np.asarray(images, dtype=np.float64)
        n, h, w = images.shape
        ys, xs = self.grid(h, w)
        P = self.projection()
        p = self.patch
        patches = np.empty((n, self.r, self.s, p * p))
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                patches[:, i, j] = images[:, y:y + p, x:x + p].reshape(n, -1)
        return np.maximum(patches @ P, 0.0)


def extract_features(images, labels, extractor):
    """Apply a frozen extractor: a RandomPatchExtractor or a feature-file path."""
    if isinstance(extractor, (str, os.PathLike)):
        ds = load_feature_file(extractor)
        if len(ds.labels) != len(labels) or not np.array_equal(ds.labels, labels):
            raise DataError("feature file does not match the supplied labels")
        return ds
    tensors = extractor(images)
    if tensors.shape[1:] != (extractor.r, extractor.s, extractor.d):
        raise ConfigError("extractor output shape does not match its config")
    return FeatureDataset(tensors, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------- feature files

FEAT_MAGIC = b"SFT\x00"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIIIIII")  # magic, version, N, r, s, d, label width
_LABEL_DT = {1: "<u1", 2: "<u2", 4: "<u4", 8: "<u8"}


def feature_file_size(n, r, s, d, label_width=4):
    return _FEAT_HEADER.size + 4 * n * r * s * d + label_width * n


def write_feature_file(path, dataset, label_width=4):
    if label_width not in _LABEL_DT:
        raise ConfigError(f"label width must be one of {sorted(_LABEL_DT)}")
    n = len(dataset.labels)
    r, s, d = dataset.tensors.shape[1:] if n else dataset.tensors.shape[-3:]
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, n, r, s, d, label_width))
        fh.write(np.ascontiguousarray(dataset.tensors, dtype="<f4").tobytes())
        fh.write(np.asarray(dataset.labels).astype(_LABEL_DT[label_width]).tobytes())


def load_feature_file(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _FEAT_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, n, r, s, d, lw = _FEAT_HEADER.unpack_from(buf)
    if magic != FEAT_MAGIC:
        raise DataError(f"{path}: bad feature file magic")
    if version != FEAT_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    if lw not in _LABEL_DT:
        raise DataError(f"{path}: bad label width {lw}")
    if len(buf) != feature_file_size(n, r, s, d, lw):
        raise DataError(f"{path}: size {len(buf)} != expected {feature_file_size(n, r, s, d, lw)}")
    off = _FEAT_HEADER.size
    t = np.frombuffer(buf, dtype="<f4", count=n * r * s * d, offset=off).reshape(n, r, s, d)
    labels = np.frombuffer(buf, dtype=_LABEL_DT[lw], count=n, offset=off + 4 * n * r * s * d)
    return FeatureDataset(t.astype(np.float64), labels.astype(np.int64))


# ---------------------------------------------------------------- synthetic data

# marginal per-coordinate std of synthetic tensors (about that of the digits features)
SYNTH_STD = 0.35


def make_synthetic(n_classes, r, s, d, per_class, seed, noise=1.0, zipf=0.0, min_per_class=5,
                   eval_per_class=40, separation=1.0):
    """Gaussian class prototypes in tensor space plus per-sample noise.

    With ``zipf > 0`` the training count of class k (in a seeded random
    class order) is per_class / (rank + 1) ** zipf, floored at
    ``min_per_class``; the eval split stays balanced. Returns a dataset with
    eval rows tagged EVAL and training rows untagged (STREAM).
    """
    rng = np.random.default_rng(seed)
    # coordinates keep std SYNTH_STD whatever the separation/noise mix
    unit = SYNTH_STD / np.sqrt(separation ** 2 + noise ** 2)
    protos = rng.standard_normal((n_classes, r, s, d)) * separation
    ranks = rng.permutation(n_classes)
    counts = np.full(n_classes, per_class)
    if zipf > 0:
        counts = np.maximum(min_per_class, np.floor(per_class / (ranks + 1.0) ** zipf)).astype(int)
    X, y, split = [], [], []
    for c in range(n_classes):
        for n, tag in ((counts[c], STREAM), (eval_per_class, EVAL)):
            X.append(unit * (protos[c] + noise * rng.standard_normal((n, r, s, d))))
            y.append(np.full(n, c))
            split.append(np.full(n, tag))
    return FeatureDataset(np.concatenate(X), np.concatenate(y).astype(np.int64), np.concatenate(split))


def make_splits(dataset, base_classes, eval_fraction=0.3, seed=0):
    """Tag rows BASE / STREAM / EVAL. Rows already tagged EVAL keep the tag;
    otherwise a stratified ``eval_fraction`` of each class goes to EVAL."""
    rng = np.random.default_rng(seed)
    split = np.full(len(dataset.labels), STREAM, dtype=np.int64)
    preset = dataset.split is not None and np.any(dataset.split == EVAL)
    if preset:
        split[dataset.split == EVAL] = EVAL
    else:
        for c in np.unique(dataset.labels):
            idx = np.flatnonzero(dataset.labels == c)
            n_eval = int(round(eval_fraction * len(idx)))
            split[rng.permutation(idx)[:n_eval]] = EVAL
    base = np.isin(dataset.labels, list(base_classes)) & (split != EVAL)
    split[base] = BASE
    return FeatureDataset(dataset.tensors, dataset.labels, split)


def load_configured(data_cfg, base_classes, class_order=()):
    """Build the split FeatureDataset described by a DataConfig.

    ``base_classes`` is a count: the first that many classes of
    ``class_order`` (ascending id by default) form the base set.
    """
    src = data_cfg.source
    if src == "synthetic":
        ds = make_synthetic(data_cfg.n_classes, data_cfg.r, data_cfg.s, data_cfg.d, data_cfg.per_class,
                            data_cfg.synthetic_seed, noise=data_cfg.noise, zipf=data_cfg.zipf,
                            min_per_class=data_cfg.min_per_class, eval_per_class=data_cfg.eval_per_class,
                            separation=data_cfg.separation)
    elif src == "features":
        ds = load_feature_file(data_cfg.features)
    else:
        if src == "digits":
            img_path, lab_path = digits_idx(data_cfg.cache_dir)
        elif src == "idx":
            img_path, lab_path = data_cfg.images, data_cfg.labels
        else:
            raise ConfigError(f"unknown data source {src!r}")
        images, labels = load_idx(img_path, lab_path)
        ext = RandomPatchExtractor(data_cfg.extractor_seed, data_cfg.r, data_cfg.s, data_cfg.d, data_cfg.patch)
        ds = extract_features(images, labels, ext)
    if ds.shape != (data_cfg.r, data_cfg.s, data_cfg.d):
        raise ConfigError(f"dataset tensors are {ds.shape}, config says {(data_cfg.r, data_cfg.s, data_cfg.d)}")
    if ds.n_classes > data_cfg.n_classes:
        raise ConfigError(f"dataset has {ds.n_classes} classes, data.n_classes is {data_cfg.n_classes}")
    order = [c for c in class_order if c < data_cfg.n_classes]
    order += [c for c in range(data_cfg.n_classes) if c not in order]
    return make_splits(ds, order[:base_classes], data_cfg.eval_fraction, data_cfg.split_seed)
