"""Per-patch softmax classifiers and attention-weighted probability fusion."""
from dataclasses import dataclass

import numpy as np

from mpgan.errors import DimensionMismatch, MissingClassSamples, PatchCountMismatch
from mpgan.nets import Adam, Mlp, backward, forward, softmax, softmax_xent


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-2
    betas: tuple = (0.9, 0.999)
    seed: int = 0


class PatchClassifier:
    """softmax(W x + b) over the unseen classes."""

    def __init__(self, net):
        if net.n_layers != 1 or net.output != "identity":
            raise DimensionMismatch("a patch classifier is a single affine layer")
        self.net = net

    @classmethod
    def zeros(cls, feat_dim, n_classes):
        return cls(Mlp([feat_dim, n_classes], [np.zeros((n_classes, feat_dim))], [np.zeros(n_classes)]))

    @property
    def W(self):
        return self.net.weights[0]

    @property
    def b(self):
        return self.net.biases[0]

    @property
    def feat_dim(self):
        return self.net.in_dim

    @property
    def n_classes(self):
        return self.net.out_dim


def patch_probabilities(classifier, x):
    """Class distribution(s) for one feature vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != classifier.feat_dim:
        raise DimensionMismatch(f"feature dim {x.shape[1]} != classifier dim {classifier.feat_dim}")
    probs = softmax(forward(classifier.net, x)[0])
    return probs[0] if single else probs


def single_patch_predict(v):
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(np.asarray(v)))


def train_classifier(features, labels, n_classes, config, seed=None):
    """Fit one softmax layer with minibatch Adam; ``labels`` are dense 0..n_classes-1."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    missing = sorted(set(range(n_classes)) - set(labels.tolist()))
    if missing:
        raise MissingClassSamples(f"no training samples for classes {missing}")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    net = Mlp.init([features.shape[1], n_classes], seed)
    opt = Adam(net.params(), config.lr, config.betas)
    n = len(labels)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            pick = order[start:start + config.batch_size]
            logits, cache = forward(net, features[pick])
            _, dlogits = softmax_xent(logits, labels[pick])
            grads, _ = backward(net, cache, dlogits)
            opt.step(net.params(), grads)
    return PatchClassifier(net)


def train_classifiers(synth, config, seed_for=None):
    """One classifier per patch.

    ``synth`` is a list over patches of (features, dense labels, n_classes).
    ``seed_for(p)`` picks the per-patch seed; default is config.seed + p.
    """
    out = []
    for p, (feats, labels, n_classes) in enumerate(synth):
        seed = seed_for(p) if seed_for else config.seed + p
        out.append(train_classifier(feats, labels, n_classes, config, seed))
    return out


@dataclass
class EnsembleModel:
    classifiers: list
    weights: np.ndarray
    labels: tuple  # unseen class ids in classifier output order

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.labels = tuple(int(c) for c in self.labels)
        if len(self.classifiers) != len(self.weights):
            raise PatchCountMismatch(f"{len(self.classifiers)} classifiers, {len(self.weights)} weights")
        for c in self.classifiers:
            if c.n_classes != len(self.labels):
                raise DimensionMismatch("classifier width must equal the number of unseen labels")

    @property
    def n_patches(self):
        return len(self.classifiers)


def ensemble_scores(model, samples):
    """M for a batch: samples (n, P, d) -> (n, Y) weighted probability sums."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[1] != model.n_patches:
        raise PatchCountMismatch(f"expected (n, {model.n_patches}, d) samples, got {samples.shape}")
    total = np.zeros((samples.shape[0], len(model.labels)))
    for p, clf in enumerate(model.classifiers):
        total += model.weights[p] * patch_probabilities(clf, samples[:, p, :])
    return total


def fuse(probs, weights):
    """M = sum_p A_p V_p for a (P, Y) table of patch distributions."""
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if probs.shape[0] != weights.shape[0]:
        raise PatchCountMismatch(f"{probs.shape[0]} distributions, {weights.shape[0]} weights")
    return weights @ probs


def ensemble_predict(model, sample):
    """Predicted class id and the fused vector M for one sample of P patch rows."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2 or sample.shape[0] != model.n_patches:
        raise PatchCountMismatch(f"expected {model.n_patches} patch vectors, got {sample.shape[0] if sample.ndim else 0}")
    m = ensemble_scores(model, sample[None])[0]
    return model.labels[single_patch_predict(m)], m


def predict_batch(model, samples):
    scores = ensemble_scores(model, samples)
    return np.asarray(model.labels)[np.argmax(scores, axis=1)], scores
