"""Dataset readers (IDX and CSV) and a synthetic softmax-regression generator."""
from dataclasses import dataclass
import csv
import gzip
import hashlib
import os
import struct

import numpy as np

from ..errors import FormatError

__all__ = ["Dataset", "load_idx", "load_csv", "synthetic_logreg", "file_digest"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (N, p) with one label per row")
        if self.labels.size == 0:
            raise ValueError("empty dataset")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1

    @property
    def n(self):
        return self.labels.shape[0]

    def subset(self, idx, split=None):
        return Dataset(self.features[idx], self.labels[idx], split or self.split, self.n_classes)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(raw, path, magic, ndim):
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"header needs {need} bytes, file has {len(raw)}", path=path, offset=len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", path=path, offset=0)
    return struct.unpack(">" + "I" * ndim, raw[4:need]), need


def load_idx(path_images, path_labels, max_label=9, split="train"):
    """Read an IDX image/label pair (optionally gzipped); intensities are scaled to [0, 1]."""
    img = _read_bytes(path_images)
    lab = _read_bytes(path_labels)
    (n_img, rows, cols), off_i = _idx_header(img, path_images, IDX_IMAGES_MAGIC, 3)
    (n_lab,), off_l = _idx_header(lab, path_labels, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"{n_img} images but {n_lab} labels", path=path_labels, offset=4)
    body = n_img * rows * cols
    if len(img) - off_i != body:
        raise FormatError(f"image payload has {len(img) - off_i} bytes, header implies {body}",
                          path=path_images, offset=off_i + min(body, len(img) - off_i))
    if len(lab) - off_l != n_lab:
        raise FormatError(f"label payload has {len(lab) - off_l} bytes, header implies {n_lab}",
                          path=path_labels, offset=off_l + min(n_lab, len(lab) - off_l))
    if n_img == 0:
        raise FormatError("file declares zero items", path=path_images, offset=4)
    X = np.frombuffer(img, dtype=np.uint8, offset=off_i).reshape(n_img, rows * cols) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8, offset=off_l).astype(np.int64)
    bad = np.flatnonzero(y > max_label)
    if bad.size:
        raise FormatError(f"label {int(y[bad[0]])} outside 0..{max_label}", path=path_labels,
                          offset=off_l + int(bad[0]))
    return Dataset(X, y, split, max_label + 1)


def load_csv(path, label_column="label", split="train"):
    """Numeric CSV with a header row; labels are remapped to 0..C-1 in sorted order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file", path=path, line=1) from None
        header = [h.strip() for h in header]
        if isinstance(label_column, int):
            li = label_column
        elif label_column in header:
            li = header.index(label_column)
        else:
            raise FormatError(f"no column named {label_column!r}", path=path, line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"expected {len(header)} cells, found {len(row)}", path=path, line=lineno)
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise FormatError("non-numeric cell", path=path, line=lineno) from None
    if not rows:
        raise FormatError("no data rows", path=path, line=2)
    A = np.array(rows)
    raw = A[:, li]
    values, y = np.unique(raw, return_inverse=True)
    if values.size < 2:
        raise FormatError("classification needs at least two distinct labels", path=path)
    X = np.delete(A, li, axis=1)
    return Dataset(X, y.astype(np.int64), split, int(values.size))


def synthetic_logreg(n, n_features=3, n_classes=3, feature_scale=2.0, weight_scale=1.0, rng=None,
                     weights=None):
    """Features ``N(0, s^2 I)`` with labels drawn from a softmax of random affine scores.

    Returns ``(dataset, weights)`` so that held-out sets can reuse the same weights.
    """
    rng = np.random.default_rng(rng)
    W = rng.standard_normal((n_classes, n_features + 1)) * weight_scale if weights is None else weights
    X = rng.standard_normal((n, n_features)) * feature_scale
    Z = X @ W[:, :-1].T + W[:, -1]
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    y = (P.cumsum(axis=1) > rng.random((n, 1))).argmax(axis=1)
    return Dataset(X, y, "train", n_classes), W


def file_digest(path):
    """Git-style blob hash (sha1 over ``blob <size>\\0`` + content) and plain sha256."""
    data = _read_bytes(path) if not os.path.isdir(path) else b""
    blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
    return blob, hashlib.sha256(data).hexdigest()
