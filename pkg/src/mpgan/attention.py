"""Discrimination-based patch attention from class separability."""
from dataclasses import dataclass

import numpy as np

from mpgan._io import atomic_write_json, read_json
from mpgan._kernels import class_distance_tables
from mpgan.errors import MissingClass, NeedsTwoClasses

EPS = 1e-12
MODES = ("raw", "uniform")


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Per-patch weights plus the (P, Y) distance tables behind them."""

    weights: np.ndarray
    intra: np.ndarray
    inter: np.ndarray
    ratio: np.ndarray
    class_ids: tuple = ()
    patch_names: tuple = ()

    @property
    def n_patches(self):
        return len(self.weights)

    def to_json(self):
        return {
            "patch_names": list(self.patch_names),
            "class_ids": list(self.class_ids),
            "weights": self.weights.tolist(),
            "intra": self.intra.tolist(),
            "inter": self.inter.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        intra = np.asarray(obj["intra"], dtype=np.float64)
        inter = np.asarray(obj["inter"], dtype=np.float64)
        return cls(
            np.asarray(obj["weights"], dtype=np.float64),
            intra,
            inter,
            inter / (intra + EPS),
            tuple(obj.get("class_ids", ())),
            tuple(obj.get("patch_names", ())),
        )


def attention_weights(bank, split, pivots, nearest="centroid", use_jit=None):
    """A_p = mean over seen classes of inter / (intra + eps).

    intra is the mean distance of a class's samples to its centroid. inter
    is, by default, the distance to the nearest other centroid; with
    ``nearest="sample"`` it is the distance from the centroid to the
    nearest sample of any other class.
    """
    if nearest not in ("centroid", "sample"):
        raise ValueError("nearest must be 'centroid' or 'sample'")
    seen = tuple(split.seen)
    if len(seen) < 2:
        raise NeedsTwoClasses("inter-class distance needs at least two seen classes")
    if tuple(pivots.class_ids) != seen:
        raise MissingClass("pivots must cover the seen classes in split order")
    mask = np.isin(bank.labels, np.asarray(seen, dtype=np.int64))
    dense = {c: j for j, c in enumerate(seen)}
    labels = np.array([dense[c] for c in bank.labels[mask].tolist()], dtype=np.int64)
    if len(np.unique(labels)) != len(seen):
        raise MissingClass("every seen class needs at least one sample")
    feats = bank.features[mask]

    P = bank.n_patches
    intra = np.empty((P, len(seen)))
    inter = np.empty((P, len(seen)))
    for p in range(P):
        d_intra, d_cent, d_samp = class_distance_tables(
            feats[:, p, :], labels, pivots.centroids[p], use_jit=use_jit)
        intra[p] = d_intra
        inter[p] = d_cent if nearest == "centroid" else d_samp
    ratio = inter / (intra + EPS)
    return AttentionWeights(ratio.mean(axis=1), intra, inter, ratio, seen, bank.patch_names)


def apply_mode(weights, mode="raw"):
    if mode == "raw":
        return np.array(weights.weights, dtype=np.float64)
    if mode == "uniform":
        return np.ones(weights.n_patches)
    raise ValueError(f"attention mode must be one of {MODES}")


def save_attention(weights, path):
    atomic_write_json(path, weights.to_json())


def load_attention(path):
    return AttentionWeights.from_json(read_json(path))
