"""Distance kernels used by attention and retrieval.

Each kernel has a numba-compiled loop version and a vectorised numpy
version. The loop version is used when numba imports and the
``MPGAN_DISABLE_JIT`` environment variable is unset (or "0"). Both paths
return identical tables up to floating point summation order.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and os.environ.get("MPGAN_DISABLE_JIT", "0") in ("", "0")


# -- numpy path ---------------------------------------------------------------

def _class_tables_np(feats, labels, centroids):
    n_classes = centroids.shape[0]
    diffs = feats - centroids[labels]
    own = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))

    cc = centroids[:, None, :] - centroids[None, :, :]
    cdist = np.sqrt(np.einsum("ijk,ijk->ij", cc, cc))
    np.fill_diagonal(cdist, np.inf)
    inter = cdist.min(axis=1)

    inter_sample = np.empty(n_classes)
    for c in range(n_classes):
        other = feats[labels != c] - centroids[c]
        if len(other) == 0:
            inter_sample[c] = np.inf
        else:
            inter_sample[c] = np.sqrt(np.einsum("ij,ij->i", other, other)).min()
    return own, inter, inter_sample


def _weighted_scores_np(samples, centroids, weights):
    # samples (n, P, d), centroids (C, P, d) -> (n, C)
    out = np.empty((samples.shape[0], centroids.shape[0]))
    for c in range(centroids.shape[0]):
        diff = samples - centroids[c]
        out[:, c] = np.sqrt(np.einsum("npd,npd->np", diff, diff)) @ weights
    return out


# -- numba path ---------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _class_tables_jit(feats, labels, centroids):
        n, d = feats.shape
        n_classes = centroids.shape[0]
        own = np.zeros(n)
        inter = np.full(n_classes, np.inf)
        inter_sample = np.full(n_classes, np.inf)
        for i in range(n):
            y = labels[i]
            acc = 0.0
            for k in range(d):
                t = feats[i, k] - centroids[y, k]
                acc += t * t
            own[i] = np.sqrt(acc)
            for c in range(n_classes):
                if c == y:
                    continue
                acc = 0.0
                for k in range(d):
                    t = feats[i, k] - centroids[c, k]
                    acc += t * t
                acc = np.sqrt(acc)
                if acc < inter_sample[c]:
                    inter_sample[c] = acc
        for c in range(n_classes):
            for l in range(n_classes):
                if l == c:
                    continue
                acc = 0.0
                for k in range(d):
                    t = centroids[l, k] - centroids[c, k]
                    acc += t * t
                acc = np.sqrt(acc)
                if acc < inter[c]:
                    inter[c] = acc
        return own, inter, inter_sample

    @njit(cache=True)
    def _weighted_scores_jit(samples, centroids, weights):
        n, n_patches, d = samples.shape
        n_classes = centroids.shape[0]
        out = np.zeros((n, n_classes))
        for i in range(n):
            for c in range(n_classes):
                s = 0.0
                for p in range(n_patches):
                    acc = 0.0
                    for k in range(d):
                        t = samples[i, p, k] - centroids[c, p, k]
                        acc += t * t
                    s += weights[p] * np.sqrt(acc)
                out[i, c] = s
        return out


def sorted_class_mean(values, labels, n_classes):
    """Per-class mean of ``values`` summed in sorted order.

    Sorting first makes the result independent of sample order, bit for bit.
    Works on (n,) or (n, d) values.
    """
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((n_classes,) + values.shape[1:])
    for c in range(n_classes):
        block = values[labels == c]
        if len(block):
            out[c] = np.sort(block, axis=0).sum(axis=0) / len(block)
    return out


def class_distance_tables(feats, labels, centroids, use_jit=None):
    """Per-class intra distance, nearest-centroid distance and nearest-sample distance.

    ``feats`` is (n, d), ``labels`` dense ids into the rows of ``centroids``
    (C, d). Every class must own at least one sample.
    """
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if use_jit is None:
        use_jit = USE_JIT
    if use_jit and HAVE_NUMBA:
        own, inter, inter_sample = _class_tables_jit(feats, labels, centroids)
    else:
        own, inter, inter_sample = _class_tables_np(feats, labels, centroids)
    intra = sorted_class_mean(own, labels, centroids.shape[0])
    return intra, inter, inter_sample


def weighted_centroid_scores(samples, centroids, weights, use_jit=None):
    """score[i, c] = sum_p weights[p] * ||samples[i, p] - centroids[c, p]||."""
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if use_jit is None:
        use_jit = USE_JIT
    if use_jit and HAVE_NUMBA:
        return _weighted_scores_jit(samples, centroids, weights)
    return _weighted_scores_np(samples, centroids, weights)
