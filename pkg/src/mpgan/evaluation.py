"""Average per-class Top-1 accuracy and zero-shot retrieval precision."""
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from mpgan._io import atomic_write_json
from mpgan._kernels import weighted_centroid_scores
from mpgan.errors import EmptyClass, UnknownFraction

DEFAULT_FRACTIONS = (0.25, 0.5, 1.0)


@dataclass
class EvalReport:
    top1: float
    per_class: dict
    confusion: dict = field(default_factory=dict)
    map: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "top1": self.top1,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "confusion": {str(t): {str(p): n for p, n in sorted(row.items())}
                          for t, row in sorted(self.confusion.items())},
            "map": {_frac_key(f): v for f, v in sorted(self.map.items())},
        }


def _frac_key(f):
    return repr(float(f))


def top1(pairs, classes=None):
    """Mean over classes of per-class accuracy from (true, predicted) pairs.

    ``classes`` optionally lists the classes that must be represented.
    """
    pairs = [(int(t), int(p)) for t, p in pairs]
    totals = Counter(t for t, _ in pairs)
    if classes is not None:
        empty = [c for c in classes if totals[int(c)] == 0]
        if empty:
            raise EmptyClass(f"no test samples for classes {empty}")
    if not totals:
        raise EmptyClass("no predictions to score")
    correct = Counter(t for t, p in pairs if t == p)
    confusion = defaultdict(Counter)
    for t, p in pairs:
        confusion[t][p] += 1
    per_class = {c: correct[c] / totals[c] for c in sorted(totals)}
    # fsum is exactly rounded, so the mean does not depend on class order
    acc = math.fsum(per_class.values()) / len(per_class)
    return EvalReport(acc, per_class, {t: dict(row) for t, row in confusion.items()})


def retrieval_k(fraction, n_y):
    if not 0.0 < fraction <= 1.0:
        raise UnknownFraction(f"fraction {fraction} outside (0, 1]")
    # guard against 0.5 * 4 landing a hair above an integer
    return max(1, math.ceil(round(fraction * n_y, 9)))


def rank_precision(ranked_hits, k):
    """Fraction of hits among the first ``k`` ranked items."""
    return float(np.count_nonzero(np.asarray(ranked_hits[:k]))) / k


def retrieve(centroids, class_ids, weights, samples, labels, fraction, score_fn=None):
    """Per-class retrieval precision and its mean.

    For every class y the test samples are ranked by ascending
    ``score_fn(samples, centroids, weights)[:, y]`` (ties broken by sample
    order) and the top k = ceil(fraction * n_y) are retrieved, where n_y is
    the number of test samples of class y.
    """
    score_fn = score_fn or weighted_centroid_scores
    labels = np.asarray(labels, dtype=np.int64)
    scores = score_fn(np.asarray(samples, dtype=np.float64), np.asarray(centroids, dtype=np.float64),
                      np.asarray(weights, dtype=np.float64))
    per_class = {}
    for j, c in enumerate(class_ids):
        n_y = int(np.count_nonzero(labels == c))
        if n_y == 0:
            raise EmptyClass(f"no test samples for class {c}")
        k = retrieval_k(fraction, n_y)
        order = np.argsort(scores[:, j], kind="stable")
        per_class[int(c)] = rank_precision(labels[order] == c, k)
    return per_class, math.fsum(per_class.values()) / len(per_class)


def retrieval_report(centroids, class_ids, weights, samples, labels,
                     fractions=DEFAULT_FRACTIONS, score_fn=None):
    out = {"map": {}, "per_class": {}}
    for f in fractions:
        per_class, mean_ap = retrieve(centroids, class_ids, weights, samples, labels, f, score_fn)
        out["map"][_frac_key(f)] = mean_ap
        out["per_class"][_frac_key(f)] = {str(c): v for c, v in per_class.items()}
    return out


def save_report(report, path):
    atomic_write_json(path, report.to_json() if isinstance(report, EvalReport) else report)
