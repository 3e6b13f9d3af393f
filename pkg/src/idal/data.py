"""Synthetic multi-class domain-shift data, CSV persistence and batching."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import cycle, islice
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataFormatError

FORMAT_TAG = "idal-dataset"
FORMAT_VERSION = "v1"


@dataclass(frozen=True)
class ShiftSpec:
    k: int = 4
    d: int = 8
    n_source: int = 2000
    n_target: int = 2000
    class_separation: float = 4.0
    rotation_angle: float = math.pi / 4
    scale_factor: float = 1.3
    style_offset_magnitude: float = 1.0
    noise_sigma_source: float = 0.5
    noise_sigma_target: float = 0.5
    seed: int = 0

    def validate(self):
        checks = [
            ("k", self.k >= 2, "must be >= 2"),
            ("d", self.d >= 2, "must be >= 2"),
            ("n_source", self.n_source >= 0, "must be >= 0"),
            ("n_target", self.n_target >= 0, "must be >= 0"),
            ("class_separation", self.class_separation > 0, "must be > 0"),
            ("rotation_angle", math.isfinite(self.rotation_angle), "must be finite"),
            ("scale_factor", self.scale_factor > 0, "must be > 0"),
            ("style_offset_magnitude", self.style_offset_magnitude >= 0, "must be >= 0"),
            ("noise_sigma_source", self.noise_sigma_source >= 0, "must be >= 0"),
            ("noise_sigma_target", self.noise_sigma_target >= 0, "must be >= 0"),
        ]
        for name, ok, why in checks:
            if not ok:
                raise ConfigError(f"ShiftSpec.{name} {why} (got {getattr(self, name)!r})")
        return self

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Dataset:
    """Feature rows plus training labels (``-1`` = unlabeled).

    ``eval_labels`` is the sealed ground-truth channel used only for scoring;
    it is ``None`` when unknown.
    """

    features: np.ndarray
    labels: np.ndarray
    domain: str
    num_classes: int
    eval_labels: np.ndarray | None = None
    fingerprint: str | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1 and self.features.size == 0:
            self.features = self.features.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.eval_labels is not None:
            self.eval_labels = np.asarray(self.eval_labels, dtype=np.int64)
            if self.eval_labels.size == 0:
                self.eval_labels = None
        if self.domain not in ("source", "target"):
            raise ConfigError(f"domain must be 'source' or 'target', got {self.domain!r}")
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ConfigError(f"features shape {self.features.shape} does not match {n} labels")
        if not np.isfinite(self.features).all():
            raise ConfigError("features contain non-finite values")
        if n and (self.labels.min() < -1 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in {-1} U [0, K)")
        if self.domain == "source" and n and self.labels.min() < 0:
            raise ConfigError("source datasets must be fully labeled")
        if self.eval_labels is not None and (
                self.eval_labels.shape != (n,) or self.eval_labels.min() < 0
                or self.eval_labels.max() >= self.num_classes):
            raise ConfigError("eval_labels must be a length-n vector in [0, K)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_eval = (self.eval_labels is None and other.eval_labels is None) or (
            self.eval_labels is not None and other.eval_labels is not None
            and np.array_equal(self.eval_labels, other.eval_labels))
        return (self.domain == other.domain and self.num_classes == other.num_classes
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels) and same_eval)


def class_centers(spec: ShiftSpec) -> np.ndarray:
    """``class_separation`` times unit directions: the first K coordinate axes
    when K <= d, otherwise seeded random unit vectors."""
    if spec.k <= spec.d:
        return spec.class_separation * np.eye(spec.d)[: spec.k]
    rng = np.random.default_rng([spec.seed, 1])
    dirs = rng.standard_normal((spec.k, spec.d))
    return spec.class_separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def rotation_matrix(d: int, angle: float) -> np.ndarray:
    R = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def style_offset(spec: ShiftSpec) -> np.ndarray:
    return spec.style_offset_magnitude * np.ones(spec.d) / math.sqrt(spec.d)


def target_centers(spec: ShiftSpec) -> np.ndarray:
    return spec.scale_factor * class_centers(spec) @ rotation_matrix(spec.d, spec.rotation_angle).T \
        + style_offset(spec)


def generate_shift_pair(spec: ShiftSpec) -> tuple[Dataset, Dataset]:
    """Source/target Gaussian class clusters; the target is rotated (first two
    coordinates), scaled, offset and re-noised.  Classes are assigned
    round-robin so each class gets floor(n/K) or ceil(n/K) samples."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    src_c = class_centers(spec)
    tgt_c = target_centers(spec)
    ys = np.arange(spec.n_source) % spec.k
    yt = np.arange(spec.n_target) % spec.k
    xs = src_c[ys] + spec.noise_sigma_source * rng.standard_normal((spec.n_source, spec.d))
    xt = tgt_c[yt] + spec.noise_sigma_target * rng.standard_normal((spec.n_target, spec.d))
    fp = spec.fingerprint()
    source = Dataset(xs, ys, "source", spec.k, eval_labels=ys.copy(), fingerprint=fp)
    target = Dataset(xt, np.full(spec.n_target, -1), "target", spec.k, eval_labels=yt,
                     fingerprint=fp)
    return source, target


# -- CSV ------------------------------------------------------------------------

def _header(ds: Dataset) -> str:
    return f"{FORMAT_TAG},{FORMAT_VERSION},n={len(ds)},d={ds.dim},k={ds.num_classes},domain={ds.domain}"


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    ev = ds.eval_labels if ds.eval_labels is not None else np.full(len(ds), -1)
    lines = [_header(ds)]
    for row, y, e in zip(ds.features, ds.labels, ev):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(y)},{int(e)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(line: str, path) -> dict:
    parts = line.strip().split(",")
    if len(parts) != 6 or parts[0] != FORMAT_TAG:
        raise DataFormatError("not an idal dataset header", path, 1)
    if parts[1] != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {parts[1]!r}", path, 1)
    meta = {}
    for key, part in zip(("n", "d", "k", "domain"), parts[2:]):
        name, _, value = part.partition("=")
        if name != key or not value:
            raise DataFormatError(f"header field {key}= expected, got {part!r}", path, 1)
        meta[key] = value
    try:
        for key in ("n", "d", "k"):
            meta[key] = int(meta[key])
    except ValueError:
        raise DataFormatError("header sizes must be integers", path, 1) from None
    if meta["domain"] not in ("source", "target"):
        raise DataFormatError(f"unknown domain {meta['domain']!r}", path, 1)
    return meta


def load_csv(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise DataFormatError("file is not UTF-8", path) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataFormatError("empty file", path, 1)
    meta = _parse_header(lines[0], path)
    n, d = meta["n"], meta["d"]
    rows = lines[1:]
    if len(rows) != n:
        raise DataFormatError(f"header declares n={n} rows, found {len(rows)}", path,
                              min(len(rows), n) + 2)
    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    ev = np.empty(n, dtype=np.int64)
    for i, line in enumerate(rows):
        lineno = i + 2
        cells = line.split(",")
        if len(cells) != d + 2:
            raise DataFormatError(f"expected {d + 2} cells, found {len(cells)}", path, lineno)
        try:
            X[i] = [float(c) for c in cells[:d]]
            y[i] = int(cells[d])
            ev[i] = int(cells[d + 1])
        except ValueError as exc:
            raise DataFormatError(f"non-numeric cell ({exc})", path, lineno) from None
        if not np.isfinite(X[i]).all():
            raise DataFormatError("non-finite feature value", path, lineno)
    eval_labels = ev if n and (ev >= 0).all() else None
    try:
        return Dataset(X, y, meta["domain"], meta["k"], eval_labels=eval_labels)
    except ConfigError as exc:
        raise DataFormatError(str(exc), path) from None


# -- batching --------------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray
    indices: np.ndarray
    labels: np.ndarray | None = field(default=None)

    def __len__(self):
        return len(self.indices)


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int,
               stream: int = 0) -> list[Batch]:
    """Shuffled partition of ``ds`` determined by ``(seed, epoch, stream)``.

    Labels are attached only for source data; target batches never carry
    them on the training path.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(ds) == 0:
        raise ConfigError(f"cannot batch an empty {ds.domain} dataset")
    order = np.random.default_rng([seed, epoch, stream]).permutation(len(ds))
    out = []
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        labels = ds.labels[idx] if ds.domain == "source" else None
        out.append(Batch(ds.features[idx], idx, labels))
    return out


def paired_batches(source: Dataset, target: Dataset, batch_size: int, seed: int,
                   epoch: int) -> Iterator[tuple[Batch, Batch]]:
    """One (source, target) batch per step; the shorter stream is recycled."""
    sb = batch_iter(source, batch_size, seed, epoch, stream=0)
    tb = batch_iter(target, batch_size, seed, epoch, stream=1)
    steps = max(len(sb), len(tb))
    return zip(islice(cycle(sb), steps), islice(cycle(tb), steps))
