"""Dataset types, binary bank formats and the synthetic dataset generator."""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from mpgan._io import atomic_write_bytes, atomic_write_json, read_json
from mpgan._kernels import sorted_class_mean
from mpgan.errors import (
    DimensionMismatch,
    FormatError,
    InvalidSpec,
    MissingClass,
    SplitError,
)

FEATURE_MAGIC = b"MPFB"
SEMANTIC_MAGIC = b"MPSE"
FORMAT_VERSION = 1

_FEATURE_HEADER = struct.Struct("<4sIIIQ")
_SEMANTIC_HEADER = struct.Struct("<4sIII")

SPLIT_NAMES = ("SCS", "SCE", "synthetic")
STAGES = ("raw_tfidf", "denoised")


@dataclass(frozen=True)
class ClassSplit:
    seen: tuple
    unseen: tuple
    split_name: str = "synthetic"

    def __post_init__(self):
        seen = tuple(int(c) for c in self.seen)
        unseen = tuple(int(c) for c in self.unseen)
        object.__setattr__(self, "seen", seen)
        object.__setattr__(self, "unseen", unseen)
        if not seen or not unseen:
            raise SplitError("seen and unseen label sets must both be non-empty")
        if len(set(seen)) != len(seen) or len(set(unseen)) != len(unseen):
            raise SplitError("duplicate class id inside a split side")
        overlap = set(seen) & set(unseen)
        if overlap:
            raise SplitError(f"seen and unseen overlap on {sorted(overlap)}")
        if self.split_name not in SPLIT_NAMES:
            raise SplitError(f"unknown split name {self.split_name!r}")

    @property
    def all_classes(self):
        return self.seen + self.unseen


@dataclass(frozen=True, eq=False)
class PatchFeatureBank:
    """Per-patch visual features.

    ``features`` has shape (n_samples, n_patches, feat_dim) and is kept as
    float32, the on-disk precision; use :meth:`patch` or :meth:`as_float64`
    for arithmetic.
    """

    labels: np.ndarray
    features: np.ndarray
    patch_names: tuple = ()

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 3:
            raise DimensionMismatch(f"features must be (n, P, d), got shape {feats.shape}")
        if feats.shape[0] != labels.shape[0]:
            raise DimensionMismatch("one label per sample required")
        if feats.shape[1] < 1 or feats.shape[2] < 1:
            raise DimensionMismatch("need at least one patch of positive dimension")
        names = tuple(self.patch_names) or tuple(f"patch{p}" for p in range(feats.shape[1]))
        if len(names) != feats.shape[1]:
            raise DimensionMismatch(f"{len(names)} patch names for {feats.shape[1]} patches")
        labels.flags.writeable = False
        feats.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "patch_names", names)

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_patches(self):
        return self.features.shape[1]

    @property
    def feat_dim(self):
        return self.features.shape[2]

    def patch(self, p):
        return self.features[:, p, :].astype(np.float64)

    def as_float64(self):
        return self.features.astype(np.float64)

    def select(self, class_ids):
        mask = np.isin(self.labels, np.asarray(list(class_ids), dtype=np.int64))
        return PatchFeatureBank(self.labels[mask], self.features[mask], self.patch_names)

    def class_counts(self):
        ids, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def check_split(self, split):
        allowed = set(split.all_classes)
        stray = set(np.unique(self.labels).tolist()) - allowed
        if stray:
            raise SplitError(f"bank holds classes outside the split: {sorted(stray)}")

    def __eq__(self, other):
        if not isinstance(other, PatchFeatureBank):
            return NotImplemented
        return (
            self.patch_names == other.patch_names
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


@dataclass(frozen=True, eq=False)
class SemanticEmbedding:
    class_ids: tuple
    vectors: np.ndarray
    stage: str = "raw_tfidf"

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        vecs = np.array(self.vectors, copy=True)
        if vecs.dtype not in (np.float32, np.float64):
            vecs = vecs.astype(np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(ids):
            raise DimensionMismatch("need exactly one vector per class id")
        if len(set(ids)) != len(ids):
            raise DimensionMismatch("duplicate class id in embedding")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "raw_tfidf" and (vecs < 0).any():
            raise ValueError("raw TF-IDF vectors must be non-negative")
        vecs.flags.writeable = False
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def lookup(self, class_ids):
        """Rows for ``class_ids`` as float64."""
        index = {c: i for i, c in enumerate(self.class_ids)}
        try:
            rows = [index[int(c)] for c in class_ids]
        except KeyError as exc:
            raise MissingClass(f"no semantic vector for class {exc.args[0]}") from None
        return self.vectors[rows].astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, SemanticEmbedding):
            return NotImplemented
        return (
            self.class_ids == other.class_ids
            and self.stage == other.stage
            and self.vectors.dtype == other.vectors.dtype
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass(frozen=True, eq=False)
class VisualPivots:
    """Per-patch class centroids of the seen classes.

    ``centroids[p, j]`` is the mean of class ``class_ids[j]`` in patch ``p``.
    """

    class_ids: tuple
    centroids: np.ndarray
    counts: np.ndarray

    def index(self, class_id):
        try:
            return self.class_ids.index(int(class_id))
        except ValueError:
            raise MissingClass(f"no pivot for class {class_id}") from None

    def pivot(self, p, class_id):
        return self.centroids[p, self.index(class_id)]


def compute_visual_pivots(bank, split):
    """Class centroids of every seen class, per patch."""
    seen = split.seen
    counts = np.array([np.count_nonzero(bank.labels == c) for c in seen], dtype=np.int64)
    missing = [c for c, n in zip(seen, counts) if n == 0]
    if missing:
        raise MissingClass(f"seen classes without samples: {missing}")
    mask = np.isin(bank.labels, np.asarray(seen, dtype=np.int64))
    dense = {c: j for j, c in enumerate(seen)}
    labels = np.array([dense[c] for c in bank.labels[mask].tolist()], dtype=np.int64)
    feats = bank.features[mask].astype(np.float64)
    centroids = np.stack(
        [sorted_class_mean(feats[:, p, :], labels, len(seen)) for p in range(bank.n_patches)]
    )
    return VisualPivots(tuple(seen), centroids, counts)


@dataclass(frozen=True)
class SyntheticSpec:
    n_seen: int = 10
    n_unseen: int = 4
    n_patches: int = 3
    feat_dim: int = 16
    semantic_dim: int = 5
    samples_per_class: int = 50
    patch_separations: tuple = (8.0, 8.0, 8.0)
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        seps = tuple(float(s) for s in self.patch_separations)
        object.__setattr__(self, "patch_separations", seps)
        for name in ("n_seen", "n_unseen", "n_patches", "feat_dim", "semantic_dim", "samples_per_class"):
            if int(getattr(self, name)) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if len(seps) != self.n_patches:
            raise InvalidSpec(f"{len(seps)} separations for {self.n_patches} patches")
        if any(s < 0 or not np.isfinite(s) for s in seps):
            raise InvalidSpec("patch separations must be finite and >= 0")
        if not self.noise_sigma > 0:
            raise InvalidSpec("noise_sigma must be > 0")


def _mean_nearest_distance(points):
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1).mean()


def generate_synthetic_dataset(spec):
    """Draw a bank, embedding and split from ``spec``.

    Class centroids in patch p are a random linear image of the class's
    semantic vector, rescaled so the mean nearest-centroid distance equals
    ``patch_separations[p]``, then shifted per dimension so every centroid
    coordinate is at least four noise standard deviations above zero.
    Samples are clipped at zero, mimicking post-ReLU CNN features.
    """
    if not isinstance(spec, SyntheticSpec):
        raise InvalidSpec("expected a SyntheticSpec")
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.n_seen + spec.n_unseen
    semantic = rng.uniform(0.0, 1.0, size=(n_classes, spec.semantic_dim)).astype(np.float32)
    sem64 = semantic.astype(np.float64)

    n = n_classes * spec.samples_per_class
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), spec.samples_per_class)
    features = np.empty((n, spec.n_patches, spec.feat_dim), dtype=np.float32)
    floor = 4.0 * spec.noise_sigma
    for p, sep in enumerate(spec.patch_separations):
        mapping = rng.standard_normal((spec.feat_dim, spec.semantic_dim))
        centroids = sem64 @ mapping.T
        centroids -= centroids.mean(axis=0)
        spacing = _mean_nearest_distance(centroids)
        centroids *= sep / spacing if spacing > 0 else 0.0
        centroids += floor - centroids.min(axis=0)
        noise = rng.standard_normal((n, spec.feat_dim)) * spec.noise_sigma
        features[:, p, :] = np.maximum(centroids[labels] + noise, 0.0)

    split = ClassSplit(
        tuple(range(spec.n_seen)), tuple(range(spec.n_seen, n_classes)), "synthetic"
    )
    bank = PatchFeatureBank(labels, features, tuple(f"patch{p}" for p in range(spec.n_patches)))
    embedding = SemanticEmbedding(tuple(range(n_classes)), semantic, "raw_tfidf")
    return bank, embedding, split


# -- binary formats -------------------------------------------------------------

def _feature_dtype(n_patches, feat_dim):
    return np.dtype([("class_id", "<u4"), ("x", "<f4", (n_patches, feat_dim))])


def feature_bank_bytes(bank):
    rec = np.empty(bank.n_samples, dtype=_feature_dtype(bank.n_patches, bank.feat_dim))
    rec["class_id"] = bank.labels
    rec["x"] = bank.features
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FORMAT_VERSION, bank.n_patches, bank.feat_dim, bank.n_samples
    )
    return header + rec.tobytes()


def save_feature_bank(bank, path):
    atomic_write_bytes(path, feature_bank_bytes(bank))


def parse_feature_bank(buf, patch_names=(), n_patches=None, feat_dim=None):
    if len(buf) < _FEATURE_HEADER.size:
        raise FormatError("feature bank truncated inside header")
    magic, version, n_p, dim, n = _FEATURE_HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature bank magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported feature bank version {version}")
    if n_patches is not None and n_p != n_patches:
        raise DimensionMismatch(f"bank has {n_p} patches, expected {n_patches}")
    if feat_dim is not None and dim != feat_dim:
        raise DimensionMismatch(f"bank has feat_dim {dim}, expected {feat_dim}")
    dtype = _feature_dtype(n_p, dim)
    body = len(buf) - _FEATURE_HEADER.size
    if body != n * dtype.itemsize:
        raise FormatError(f"feature bank body is {body} bytes, expected {n * dtype.itemsize}")
    rec = np.frombuffer(buf, dtype=dtype, count=n, offset=_FEATURE_HEADER.size)
    return PatchFeatureBank(rec["class_id"].astype(np.int64), rec["x"].copy(), tuple(patch_names))


def load_feature_bank(path, patch_names=(), n_patches=None, feat_dim=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_feature_bank(buf, patch_names, n_patches, feat_dim)


def semantic_bytes(embedding):
    """Serialise ``embedding``. Vectors are written as float32."""
    n, dim = embedding.vectors.shape
    rec = np.empty(n, dtype=np.dtype([("class_id", "<u4"), ("v", "<f4", (dim,))]))
    rec["class_id"] = embedding.class_ids
    rec["v"] = embedding.vectors
    return _SEMANTIC_HEADER.pack(SEMANTIC_MAGIC, FORMAT_VERSION, n, dim) + rec.tobytes()


def save_semantic(embedding, path):
    atomic_write_bytes(path, semantic_bytes(embedding))


def parse_semantic(buf, stage="raw_tfidf"):
    if len(buf) < _SEMANTIC_HEADER.size:
        raise FormatError("semantic bank truncated inside header")
    magic, version, n, dim = _SEMANTIC_HEADER.unpack_from(buf, 0)
    if magic != SEMANTIC_MAGIC:
        raise FormatError(f"bad semantic bank magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported semantic bank version {version}")
    dtype = np.dtype([("class_id", "<u4"), ("v", "<f4", (dim,))])
    body = len(buf) - _SEMANTIC_HEADER.size
    if body != n * dtype.itemsize:
        raise FormatError(f"semantic bank body is {body} bytes, expected {n * dtype.itemsize}")
    rec = np.frombuffer(buf, dtype=dtype, count=n, offset=_SEMANTIC_HEADER.size)
    return SemanticEmbedding(tuple(rec["class_id"].tolist()), rec["v"].copy(), stage)


def load_semantic(path, stage="raw_tfidf"):
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_semantic(buf, stage)


# -- manifest ---------------------------------------------------------------------

@dataclass(frozen=True)
class Manifest:
    patch_names: tuple
    class_names: tuple
    split: ClassSplit
    extra: dict = field(default_factory=dict)

    def to_json(self):
        out = dict(self.extra)
        out.update(
            patch_names=list(self.patch_names),
            class_names=list(self.class_names),
            seen=list(self.split.seen),
            unseen=list(self.split.unseen),
            split_name=self.split.split_name,
        )
        out.setdefault("normalization", "none")
        return out

    @classmethod
    def from_json(cls, obj):
        try:
            split = ClassSplit(obj["seen"], obj["unseen"], obj.get("split_name", "synthetic"))
            patch_names = tuple(obj["patch_names"])
            class_names = tuple(obj["class_names"])
        except KeyError as exc:
            raise FormatError(f"manifest missing key {exc.args[0]!r}") from None
        n_classes = len(class_names)
        bad = [c for c in split.all_classes if not 0 <= c < n_classes]
        if bad:
            raise SplitError(f"class ids {bad} outside 0..{n_classes - 1}")
        known = ("patch_names", "class_names", "seen", "unseen", "split_name")
        extra = {k: v for k, v in obj.items() if k not in known}
        return cls(patch_names, class_names, split, extra)


def save_manifest(manifest, path):
    atomic_write_json(path, manifest.to_json())


def load_manifest(path):
    try:
        obj = read_json(path)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    return Manifest.from_json(obj)


DATASET_FILES = {
    "features": "features.mpfb",
    "semantics": "semantics.mpse",
    "manifest": "manifest.json",
}


def save_dataset(directory, bank, embedding, split, class_names=None):
    class_names = class_names or tuple(f"class{c}" for c in range(max(split.all_classes) + 1))
    save_feature_bank(bank, os.path.join(directory, DATASET_FILES["features"]))
    save_semantic(embedding, os.path.join(directory, DATASET_FILES["semantics"]))
    save_manifest(
        Manifest(bank.patch_names, tuple(class_names), split),
        os.path.join(directory, DATASET_FILES["manifest"]),
    )


def load_dataset(features_path, semantics_path, manifest_path):
    """Load and cross-check a bank, its embedding and the manifest."""
    manifest = load_manifest(manifest_path)
    bank = load_feature_bank(
        features_path, manifest.patch_names, n_patches=len(manifest.patch_names)
    )
    bank.check_split(manifest.split)
    embedding = load_semantic(semantics_path)
    missing = set(manifest.split.all_classes) - set(embedding.class_ids)
    if missing:
        raise MissingClass(f"semantic bank lacks classes {sorted(missing)}")
    return bank, embedding, manifest
