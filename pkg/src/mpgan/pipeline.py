"""End-to-end orchestration: training, synthesis, attention, ensemble, evaluation.

All artefacts of a run live in one output directory::

    pca.json                 PCA denoiser (pca runs only)
    gan_<p>.mpck, trace_<p>.csv
    synth.mpfb               synthesized unseen-class features
    attention.json
    classifiers.mpck, ensemble.json
    run.json                 config, versions and file hashes
    report.json, retrieval.json
"""
import dataclasses
import hashlib
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import mpgan
from mpgan._io import atomic_write_json, read_json, sha256_file
from mpgan.attention import apply_mode, attention_weights, save_attention
from mpgan.data import (
    DATASET_FILES,
    PatchFeatureBank,
    SemanticEmbedding,
    VisualPivots,
    compute_visual_pivots,
    load_dataset,
    load_feature_bank,
    save_feature_bank,
)
from mpgan.ensemble import ClassifierConfig, EnsembleModel, PatchClassifier, predict_batch, train_classifier
from mpgan.errors import ConfigError, MissingCheckpoint, MpganError
from mpgan.evaluation import DEFAULT_FRACTIONS, retrieval_report, top1
from mpgan.gan import GanConfig, PatchGan, load_patch_gan, save_patch_gan, save_trace, substream, synthesize, train_patch
from mpgan.nets import load_checkpoint, save_checkpoint
from mpgan.text import PcaModel, pca_fit, pca_transform

log = logging.getLogger("mpgan")

VARIANTS = ("mp_only", "mp_mc", "mp_mc_mcls", "full")


@dataclass(frozen=True)
class RunConfig:
    features: str = ""
    semantics: str = ""
    manifest: str = ""
    out_dir: str = "run"
    seed: int = 0
    gan: GanConfig = field(default_factory=GanConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    pca_k: int = None
    n_synth_per_class: int = 300
    attention_mode: str = "raw"
    attention_nearest: str = "centroid"
    variant: str = "full"
    fractions: tuple = DEFAULT_FRACTIONS
    jobs: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.attention_mode not in ("raw", "uniform"):
            raise ConfigError("attention_mode must be raw or uniform")
        if self.attention_nearest not in ("centroid", "sample"):
            raise ConfigError("attention_nearest must be centroid or sample")
        if self.n_synth_per_class < 1:
            raise ConfigError("n_synth_per_class must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("retrieval fractions must lie in (0, 1]")
        # the GAN always follows the run's root seed
        if self.gan.seed != self.seed:
            object.__setattr__(self, "gan", dataclasses.replace(self.gan, seed=self.seed))

    def to_json(self):
        out = dataclasses.asdict(self)
        out["gan"] = self.gan.to_json()
        out["classifier"]["betas"] = list(self.classifier.betas)
        out["fractions"] = list(self.fractions)
        return out

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        paths = obj.pop("paths", {})
        for key in ("features", "semantics", "manifest", "out_dir"):
            if key in paths:
                obj.setdefault(key, paths[key])
        if "data_dir" in obj:
            data_dir = obj.pop("data_dir")
            for key, name in DATASET_FILES.items():
                obj.setdefault(key, os.path.join(data_dir, name))
        try:
            if "gan" in obj:
                obj["gan"] = GanConfig(**obj["gan"])
            if "classifier" in obj:
                obj["classifier"] = ClassifierConfig(**obj["classifier"])
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    def hash(self):
        # jobs and out_dir do not affect results
        obj = self.to_json()
        for key in ("jobs", "out_dir"):
            obj.pop(key)
        text = json.dumps(obj, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_run_config(path=None, overrides=None):
    obj = {}
    if path:
        try:
            obj = read_json(path)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("gan."):
            obj.setdefault("gan", {})[key[4:]] = value
        elif key.startswith("classifier."):
            obj.setdefault("classifier", {})[key[11:]] = value
        else:
            obj[key] = value
    return RunConfig.from_json(obj)


def _out(cfg, name):
    return os.path.join(cfg.out_dir, name)


# -- stages -----------------------------------------------------------------------------

class Workspace:
    """Loaded inputs plus derived quantities shared by the stages."""

    def __init__(self, cfg):
        self.cfg = cfg
        for key in ("features", "semantics", "manifest"):
            if not getattr(cfg, key):
                raise ConfigError(f"no {key} path configured")
        try:
            self.bank, self.embedding, self.manifest = load_dataset(
                cfg.features, cfg.semantics, cfg.manifest)
        except FileNotFoundError as exc:
            raise MissingCheckpoint(f"missing input file: {exc.filename}") from None
        self.split = self.manifest.split

    def conditioning(self, fit=True):
        """Per-class conditioning vectors matching the GAN's denoiser."""
        classes = self.split.all_classes
        raw = self.embedding
        if self.cfg.gan.denoiser == "fc":
            return raw
        sub = SemanticEmbedding(classes, raw.lookup(classes), raw.stage)
        path = _out(self.cfg, "pca.json")
        if fit:
            k = self.cfg.pca_k or min(len(classes), sub.dim)
            model = pca_fit(sub, k)
            atomic_write_json(path, model.to_json())
        else:
            if not os.path.exists(path):
                raise MissingCheckpoint(f"{path} missing; run train first")
            model = PcaModel.from_json(read_json(path))
        return pca_transform(model, sub)

    def pivots(self):
        pivots = compute_visual_pivots(self.bank, self.split)
        if self.cfg.variant == "mp_only":
            shared = pivots.centroids.mean(axis=0, keepdims=True)
            shared = np.repeat(shared, self.bank.n_patches, axis=0)
            return VisualPivots(pivots.class_ids, shared, pivots.counts)
        return pivots

    def test_set(self):
        test = self.bank.select(self.split.unseen)
        return test.as_float64(), test.labels


def _train_one(args):
    p, cfg, bank, cond, split, pivots = args
    gan = PatchGan.create(p, cfg.gan, split.seen, cond.dim, bank.feat_dim)
    gan, trace = train_patch(gan, bank, cond, split, pivots)
    return p, gan, trace


def _map_patches(fn, jobs, items):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
            results = list(pool.map(fn, items))
    else:
        results = [fn(item) for item in items]
    return sorted(results, key=lambda r: r[0])


def train_gans(ws, cond):
    cfg = ws.cfg
    pivots = ws.pivots()
    items = [(p, cfg, ws.bank, cond, ws.split, pivots) for p in range(ws.bank.n_patches)]
    gans = []
    for p, gan, trace in _map_patches(_train_one, cfg.jobs, items):
        save_patch_gan(gan, _out(cfg, f"gan_{p}.mpck"))
        save_trace(trace, _out(cfg, f"trace_{p}.csv"))
        log.info("patch %d: trained %d steps", p, gan.step)
        gans.append(gan)
    return gans


def load_gans(cfg, n_patches):
    gans = []
    for p in range(n_patches):
        path = _out(cfg, f"gan_{p}.mpck")
        if not os.path.exists(path):
            raise MissingCheckpoint(f"{path} missing; run train first")
        gans.append(load_patch_gan(path))
    return gans


def synthesize_unseen(ws, gans, cond):
    """Synthesized bank: n_synth_per_class rows per unseen class, all patches."""
    cfg = ws.cfg
    n = cfg.n_synth_per_class
    unseen = ws.split.unseen
    phis = cond.lookup(unseen)
    feats = np.empty((n * len(unseen), len(gans), ws.bank.feat_dim))
    for p, gan in enumerate(gans):
        rng = np.random.default_rng(substream(cfg.seed, "synth", p))
        for j, phi in enumerate(phis):
            feats[j * n:(j + 1) * n, p, :] = synthesize(gan, phi, n, rng)
    labels = np.repeat(np.asarray(unseen, dtype=np.int64), n)
    bank = PatchFeatureBank(labels, feats, ws.bank.patch_names)
    save_feature_bank(bank, _out(cfg, "synth.mpfb"))
    return bank


def compute_attention(ws):
    weights = attention_weights(ws.bank, ws.split, compute_visual_pivots(ws.bank, ws.split),
                                nearest=ws.cfg.attention_nearest)
    save_attention(weights, _out(ws.cfg, "attention.json"))
    return weights


def _layout(cfg):
    return "concat" if cfg.variant == "mp_mc_mcls" else "per_patch"


def _mode(cfg):
    return cfg.attention_mode if cfg.variant == "full" else "uniform"


def _arrange(samples, layout):
    if layout == "concat":
        return samples.reshape(samples.shape[0], 1, -1)
    return samples


def train_ensemble(ws, synth, attention):
    cfg = ws.cfg
    unseen = ws.split.unseen
    dense = {c: j for j, c in enumerate(unseen)}
    y = np.array([dense[c] for c in synth.labels.tolist()], dtype=np.int64)
    layout = _layout(cfg)
    x = _arrange(synth.as_float64(), layout)
    classifiers = []
    for p in range(x.shape[1]):
        seed = int(substream(cfg.seed, "classifier", p).generate_state(1)[0])
        classifiers.append(train_classifier(x[:, p, :], y, len(unseen), cfg.classifier, seed))
    if layout == "concat":
        weights = np.ones(1)
    else:
        weights = apply_mode(attention, _mode(cfg))
    model = EnsembleModel(classifiers, weights, unseen)
    save_checkpoint(_out(cfg, "classifiers.mpck"),
                    {f"patch{p}": c.net for p, c in enumerate(classifiers)},
                    {"labels": list(unseen), "layout": layout})
    atomic_write_json(_out(cfg, "ensemble.json"), {
        "labels": list(unseen),
        "layout": layout,
        "variant": cfg.variant,
        "attention_mode": _mode(cfg),
        "weights": weights.tolist(),
    })
    return model


def load_ensemble(cfg):
    meta_path = _out(cfg, "ensemble.json")
    ckpt_path = _out(cfg, "classifiers.mpck")
    for path in (meta_path, ckpt_path):
        if not os.path.exists(path):
            raise MissingCheckpoint(f"{path} missing; run train first")
    meta = read_json(meta_path)
    nets, _ = load_checkpoint(ckpt_path)
    classifiers = [PatchClassifier(nets[f"patch{p}"]) for p in range(len(nets))]
    return EnsembleModel(classifiers, meta["weights"], meta["labels"]), meta["layout"]


def _versions():
    import numpy
    out = {"mpgan": mpgan.__version__, "numpy": numpy.__version__, "python": platform.python_version()}
    try:
        import numba
        out["numba"] = numba.__version__
    except ImportError:
        pass
    return out


def _hash_files(paths):
    return {os.path.basename(p): sha256_file(p) for p in sorted(paths) if os.path.exists(p)}


def write_run_manifest(cfg, stage, outputs):
    path = _out(cfg, "run.json")
    previous = read_json(path) if os.path.exists(path) else {}
    stages = previous.get("stages", {})
    stages[stage] = sorted(os.path.basename(p) for p in outputs)
    atomic_write_json(path, {
        "config": cfg.to_json(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": _versions(),
        "inputs": _hash_files([cfg.features, cfg.semantics, cfg.manifest]),
        "outputs": {**previous.get("outputs", {}), **_hash_files(outputs)},
        "stages": stages,
    })


def run_train(cfg):
    """GANs, synthesis, attention and the ensemble. Returns the output file list."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    ws = Workspace(cfg)
    cond = ws.conditioning(fit=True)
    gans = train_gans(ws, cond)
    synth = synthesize_unseen(ws, gans, cond)
    attention = compute_attention(ws)
    train_ensemble(ws, synth, attention)
    P = ws.bank.n_patches
    outputs = [_out(cfg, n) for n in
               ["synth.mpfb", "attention.json", "classifiers.mpck", "ensemble.json"]
               + [f"gan_{p}.mpck" for p in range(P)] + [f"trace_{p}.csv" for p in range(P)]]
    if cfg.gan.denoiser == "pca":
        outputs.append(_out(cfg, "pca.json"))
    write_run_manifest(cfg, "train", outputs)
    return outputs


def run_synthesize(cfg):
    ws = Workspace(cfg)
    cond = ws.conditioning(fit=False)
    gans = load_gans(cfg, ws.bank.n_patches)
    bank = synthesize_unseen(ws, gans, cond)
    write_run_manifest(cfg, "synthesize", [_out(cfg, "synth.mpfb")])
    return bank


def run_attention(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    ws = Workspace(cfg)
    weights = compute_attention(ws)
    write_run_manifest(cfg, "attention", [_out(cfg, "attention.json")])
    return weights


def _retrieval_inputs(cfg, ws, model, layout):
    path = _out(cfg, "synth.mpfb")
    if not os.path.exists(path):
        raise MissingCheckpoint(f"{path} missing; run train first")
    synth = load_feature_bank(path)
    unseen = ws.split.unseen
    feats = synth.as_float64()
    centroids = np.stack([feats[synth.labels == c].mean(axis=0) for c in unseen])
    if layout == "concat":
        weights = np.ones(ws.bank.n_patches)
    else:
        weights = model.weights
    return centroids, unseen, weights


def run_evaluate(cfg):
    ws = Workspace(cfg)
    model, layout = load_ensemble(cfg)
    x, y = ws.test_set()
    pred, _ = predict_batch(model, _arrange(x, layout))
    report = top1(zip(y.tolist(), pred.tolist()), classes=ws.split.unseen)
    centroids, classes, weights = _retrieval_inputs(cfg, ws, model, layout)
    retrieval = retrieval_report(centroids, classes, weights, x, y, cfg.fractions)
    report.map = {float(k): v for k, v in retrieval["map"].items()}
    out = _out(cfg, "report.json")
    atomic_write_json(out, report.to_json())
    write_run_manifest(cfg, "evaluate", [out])
    return report


def run_retrieve(cfg):
    ws = Workspace(cfg)
    model, layout = load_ensemble(cfg)
    x, y = ws.test_set()
    centroids, classes, weights = _retrieval_inputs(cfg, ws, model, layout)
    report = retrieval_report(centroids, classes, weights, x, y, cfg.fractions)
    out = _out(cfg, "retrieval.json")
    atomic_write_json(out, report)
    write_run_manifest(cfg, "retrieve", [out])
    return report


__all__ = [
    "RunConfig", "load_run_config", "run_train", "run_synthesize", "run_attention",
    "run_evaluate", "run_retrieve", "MpganError",
]
