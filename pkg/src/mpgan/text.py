"""TF-IDF class embeddings and PCA denoising."""
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from mpgan.data import SemanticEmbedding
from mpgan.errors import DimensionMismatch, EmptyDocument, FormatError, RankError


@dataclass(frozen=True)
class Corpus:
    """Pre-tokenised class documents, keyed by class id in insertion order."""

    documents: dict

    def __post_init__(self):
        docs = {int(c): tuple(str(t) for t in toks) for c, toks in self.documents.items()}
        empty = [c for c, toks in docs.items() if not toks]
        if empty:
            raise EmptyDocument(f"classes with empty documents: {empty}")
        if not docs:
            raise EmptyDocument("corpus has no documents")
        object.__setattr__(self, "documents", docs)

    @property
    def class_ids(self):
        return tuple(self.documents)

    @property
    def vocabulary(self):
        return tuple(sorted({t for toks in self.documents.values() for t in toks}))


def load_corpus(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"corpus is not valid JSON: {exc}") from None
    try:
        return Corpus({int(c["id"]): list(c["tokens"]) for c in obj["classes"]})
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed corpus entry: {exc}") from None


def tfidf(corpus, fit_classes=None):
    """Smoothed-idf TF-IDF with L2-normalised rows.

    tf is the raw count over document length, idf = ln((1+N)/(1+df)) + 1.
    When ``fit_classes`` is given, vocabulary and idf come from those
    documents only; other documents are projected onto that vocabulary.
    """
    fit_ids = corpus.class_ids if fit_classes is None else tuple(int(c) for c in fit_classes)
    fit_docs = [corpus.documents[c] for c in fit_ids]
    vocab = sorted({t for toks in fit_docs for t in toks})
    col = {t: j for j, t in enumerate(vocab)}
    n_docs = len(fit_docs)
    df = Counter(t for toks in fit_docs for t in set(toks))
    idf = np.array([math.log((1 + n_docs) / (1 + df[t])) + 1.0 for t in vocab])

    ids = corpus.class_ids
    out = np.zeros((len(ids), len(vocab)))
    for i, c in enumerate(ids):
        toks = corpus.documents[c]
        for term, count in Counter(toks).items():
            j = col.get(term)
            if j is not None:
                out[i, j] = count / len(toks)
    out *= idf
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    np.divide(out, norms, out=out, where=norms > 0)
    return SemanticEmbedding(ids, out, "raw_tfidf")


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, dim), orthonormal rows
    eigenvalues: np.ndarray

    @property
    def k(self):
        return self.components.shape[0]

    @property
    def dim(self):
        return self.components.shape[1]

    def to_json(self):
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            np.asarray(obj["mean"], dtype=np.float64),
            np.asarray(obj["components"], dtype=np.float64),
            np.asarray(obj["eigenvalues"], dtype=np.float64),
        )


def _fix_signs(vectors):
    # rows; make the largest-magnitude entry of each row positive
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def _complete_basis(rows, k, dim):
    # extend orthonormal rows to k rows with Gram-Schmidt over the standard basis
    basis = list(rows)
    j = 0
    while len(basis) < k:
        v = np.zeros(dim)
        v[j] = 1.0
        for b in basis:
            v -= (b @ v) * b
        for b in basis:
            v -= (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            basis.append(v / norm)
        j += 1
    return np.array(basis).reshape(k, dim)


def pca_fit(embedding, k):
    """Top-``k`` principal axes of the class vectors.

    Exact eigendecomposition of the sample covariance. When dim exceeds the
    class count the same eigenvectors are recovered from the n x n Gram
    matrix; directions with zero variance are filled with an orthonormal
    completion.
    """
    x = np.asarray(embedding.vectors, dtype=np.float64)
    n, dim = x.shape
    k = int(k)
    if k < 1 or k > min(n, dim):
        raise RankError(f"k={k} outside 1..min(n_classes={n}, dim={dim})")
    mean = x.mean(axis=0)
    xc = x - mean
    denom = max(n - 1, 1)
    if dim <= n:
        evals, evecs = np.linalg.eigh(xc.T @ xc / denom)
        order = np.argsort(evals)[::-1][:k]
        comps = evecs[:, order].T
        evals = np.clip(evals[order], 0.0, None)
    else:
        gvals, gvecs = np.linalg.eigh(xc @ xc.T)
        order = np.argsort(gvals)[::-1]
        gvals, gvecs = gvals[order], gvecs[:, order]
        tol = max(gvals[0], 0.0) * 1e-12 * max(n, dim)
        keep = [i for i in range(min(k, n)) if gvals[i] > tol]
        comps = [(xc.T @ gvecs[:, i]) / math.sqrt(gvals[i]) for i in keep]
        comps = _complete_basis(comps, k, dim)
        evals = np.zeros(k)
        evals[: len(keep)] = gvals[keep] / denom
    return PcaModel(mean, _fix_signs(comps), evals)


def pca_transform(model, embedding):
    if embedding.dim != model.dim:
        raise DimensionMismatch(f"embedding dim {embedding.dim} != PCA dim {model.dim}")
    x = np.asarray(embedding.vectors, dtype=np.float64)
    return SemanticEmbedding(embedding.class_ids, (x - model.mean) @ model.components.T, "denoised")


def pca_reconstruct(model, z):
    return np.asarray(z) @ model.components + model.mean
