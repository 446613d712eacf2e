"""Per-patch conditional WGAN-GP with an auxiliary classifier head and visual-pivot pull.

The discriminator is one network whose output unit 0 is the Wasserstein
critic and whose remaining units are seen-class logits, so the two heads
share the first (encoder) layer.
"""
import csv
import io
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from mpgan._io import atomic_write_text
from mpgan.errors import BatchMismatch, ConfigError, DimensionMismatch, MissingPivot, NonFiniteLoss
from mpgan.nets import (
    Adam,
    Mlp,
    backward,
    forward,
    input_gradient_with_param_grads,
    load_checkpoint,
    save_checkpoint,
    softmax_xent,
)

DENOISERS = ("pca", "fc")
TRACE_FIELDS = ("step", "d_loss", "g_loss", "gp", "pivot")


def substream(seed, *names):
    """A SeedSequence keyed by the root seed and a path of names or indices."""
    key = [int(seed)]
    for n in names:
        key.append(n if isinstance(n, int) else zlib.crc32(str(n).encode("utf-8")))
    return np.random.SeedSequence(key)


@dataclass(frozen=True)
class GanConfig:
    z_dim: int = 100
    denoiser: str = "pca"
    denoiser_dim: int = 1000  # fc output width; ignored for pca
    n_critic: int = 5
    batch_size: int = 64
    iterations: int = 1000
    lambda_pivot: float = 1.0
    beta_gp: float = 10.0
    g_hidden: int = 128
    d_hidden: int = 128
    lr: float = 3e-3
    betas: tuple = (0.5, 0.9)
    seed: int = 0
    # test-only switches scaling the adversarial and classification terms
    adversarial_weight: float = 1.0
    cls_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.denoiser not in DENOISERS:
            raise ConfigError(f"denoiser must be one of {DENOISERS}")
        if self.lambda_pivot < 0 or self.beta_gp < 0:
            raise ConfigError("lambda_pivot and beta_gp must be >= 0")
        if self.n_critic < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("n_critic and batch_size must be >= 1, iterations >= 0")
        if self.z_dim < 0:
            raise ConfigError("z_dim must be >= 0")

    def to_json(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass(eq=False)
class PatchGan:
    patch: int
    config: GanConfig
    seen: tuple
    generator: Mlp
    discriminator: Mlp
    denoiser: Mlp = None
    step: int = 0
    g_opt: Adam = field(default=None, repr=False)
    d_opt: Adam = field(default=None, repr=False)

    def __post_init__(self):
        self.seen = tuple(int(c) for c in self.seen)
        if self.discriminator.out_dim != 1 + len(self.seen):
            raise DimensionMismatch("discriminator needs one critic unit plus one logit per seen class")
        self._label_index = {c: i for i, c in enumerate(self.seen)}
        if self.g_opt is None:
            self.g_opt = Adam(self.generator_params(), self.config.lr, self.config.betas)
        if self.d_opt is None:
            self.d_opt = Adam(self.discriminator.params(), self.config.lr, self.config.betas)

    @classmethod
    def create(cls, patch, config, seen, semantic_dim, feat_dim):
        """Fresh networks. ``semantic_dim`` is the width of the conditioning vectors."""
        seed = config.seed
        denoiser = None
        cond_dim = semantic_dim
        if config.denoiser == "fc":
            denoiser = Mlp.init([semantic_dim, config.denoiser_dim],
                                _net_seed(seed, patch, "denoiser"), output="leaky_relu")
            cond_dim = config.denoiser_dim
        generator = Mlp.init([cond_dim + config.z_dim, config.g_hidden, feat_dim],
                             _net_seed(seed, patch, "generator"), output="relu")
        discriminator = Mlp.init([feat_dim, config.d_hidden, 1 + len(seen)],
                                 _net_seed(seed, patch, "discriminator"))
        return cls(patch, config, tuple(seen), generator, discriminator, denoiser)

    @property
    def feat_dim(self):
        return self.generator.out_dim

    @property
    def semantic_dim(self):
        if self.denoiser is not None:
            return self.denoiser.in_dim
        return self.generator.in_dim - self.config.z_dim

    def generator_params(self):
        params = self.generator.params()
        if self.denoiser is not None:
            params = self.denoiser.params() + params
        return params

    def label_indices(self, labels):
        try:
            return np.array([self._label_index[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise MissingPivot(f"class {exc.args[0]} is not a seen class of this GAN") from None

    def nets(self):
        out = {"generator": self.generator, "discriminator": self.discriminator}
        if self.denoiser is not None:
            out["denoiser"] = self.denoiser
        return out


def _net_seed(seed, patch, name):
    return int(substream(seed, "net", patch, name).generate_state(1)[0])


def _generate(gan, phi, z):
    """Forward through the optional denoiser and the generator."""
    cond, dcache = phi, None
    if gan.denoiser is not None:
        cond, dcache = forward(gan.denoiser, phi)
    fake, gcache = forward(gan.generator, np.hstack([cond, z]))
    return fake, cond.shape[1], dcache, gcache


def _pivot_rows(gan, pivots, labels):
    if isinstance(pivots, np.ndarray):
        return pivots[gan.label_indices(labels)]
    try:
        idx = [pivots.index(c) for c in labels]
    except Exception as exc:
        raise MissingPivot(str(exc)) from None
    return pivots.centroids[gan.patch][idx]


def generator_loss(gan, phi, labels, pivots, z=None, rng=None):
    """Adversarial + classification + pivot loss for a generator step.

    Returns (loss, grads aligned with ``gan.generator_params()``, parts).
    ``pivots`` is a VisualPivots or a (n_seen, feat_dim) array ordered like
    ``gan.seen``. The discriminator is read, never updated.
    """
    cfg = gan.config
    phi = np.asarray(phi, dtype=np.float64)
    labels = np.asarray(labels)
    batch = phi.shape[0]
    if labels.shape[0] != batch:
        raise BatchMismatch("one label per conditioning row")
    if z is None:
        z = (rng or np.random.default_rng()).standard_normal((batch, cfg.z_dim))
    idx = gan.label_indices(labels)
    centre = _pivot_rows(gan, pivots, labels)

    fake, cond_dim, dcache, gcache = _generate(gan, phi, z)
    out, ccache = forward(gan.discriminator, fake)
    critic = out[:, 0]
    xent, dlogits = softmax_xent(out[:, 1:], idx)
    resid = fake - centre
    pivot = float(np.mean(np.einsum("ij,ij->i", resid, resid)))
    adv = -float(critic.mean())
    loss = cfg.adversarial_weight * adv + cfg.cls_weight * xent + cfg.lambda_pivot * pivot

    dout = np.zeros_like(out)
    dout[:, 0] = -cfg.adversarial_weight / batch
    dout[:, 1:] = cfg.cls_weight * dlogits
    _, dfake = backward(gan.discriminator, ccache, dout)
    dfake = dfake + (2.0 * cfg.lambda_pivot / batch) * resid
    ggrads, dinput = backward(gan.generator, gcache, dfake)
    grads = ggrads
    if gan.denoiser is not None:
        dgrads, _ = backward(gan.denoiser, dcache, dinput[:, :cond_dim])
        grads = dgrads + ggrads
    parts = {"adv": adv, "cls": xent, "pivot": pivot}
    return loss, grads, parts


def discriminator_loss(gan, phi, real, labels, z=None, u=None, rng=None):
    """Critic + classification + gradient-penalty loss for a discriminator step.

    Interpolates x~ = u * fake + (1 - u) * real with one u per row.
    Returns (loss, grads aligned with ``gan.discriminator.params()``, parts).
    """
    cfg = gan.config
    phi = np.asarray(phi, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    labels = np.asarray(labels)
    batch = real.shape[0]
    if phi.shape[0] != batch or labels.shape[0] != batch:
        raise BatchMismatch("conditioning, real features and labels must share the batch size")
    if real.shape[1] != gan.feat_dim:
        raise DimensionMismatch(f"real features have dim {real.shape[1]}, expected {gan.feat_dim}")
    rng = rng or np.random.default_rng()
    if z is None:
        z = rng.standard_normal((batch, cfg.z_dim))
    if u is None:
        u = rng.uniform(0.0, 1.0, size=batch)
    idx = gan.label_indices(labels)

    fake, _, _, _ = _generate(gan, phi, z)
    D = gan.discriminator
    out_f, cache_f = forward(D, fake)
    out_r, cache_r = forward(D, real)
    xent_f, dlog_f = softmax_xent(out_f[:, 1:], idx)
    xent_r, dlog_r = softmax_xent(out_r[:, 1:], idx)
    wdist = float(out_f[:, 0].mean() - out_r[:, 0].mean())

    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    interp = u * fake + (1.0 - u) * real
    if cfg.beta_gp > 0:
        _, gp, gp_grads = input_gradient_with_param_grads(D, interp, head=0)
    else:
        gp, gp_grads = 0.0, [np.zeros_like(p) for p in D.params()]
    loss = 0.5 * cfg.cls_weight * (xent_f + xent_r) + cfg.beta_gp * gp \
        + cfg.adversarial_weight * wdist

    d_f = np.zeros_like(out_f)
    d_f[:, 0] = cfg.adversarial_weight / batch
    d_f[:, 1:] = 0.5 * cfg.cls_weight * dlog_f
    d_r = np.zeros_like(out_r)
    d_r[:, 0] = -cfg.adversarial_weight / batch
    d_r[:, 1:] = 0.5 * cfg.cls_weight * dlog_r
    grads_f, _ = backward(D, cache_f, d_f)
    grads_r, _ = backward(D, cache_r, d_r)
    grads = [a + b + cfg.beta_gp * c for a, b, c in zip(grads_f, grads_r, gp_grads)]
    parts = {"wdist": wdist, "cls_fake": xent_f, "cls_real": xent_r, "gp": float(gp)}
    return loss, grads, parts


def _check_finite(value, what, gan, step):
    if not np.isfinite(value):
        raise NonFiniteLoss(f"patch {gan.patch}: non-finite {what} at step {step}")


def train_patch(gan, bank, embedding, split, pivots, rng=None, log_every=0, log=None):
    """Alternate ``n_critic`` discriminator steps with one generator step.

    ``embedding`` must hold raw vectors for the fc denoiser and denoised
    vectors otherwise. Returns (gan, trace) where trace is a list of dicts
    with keys step, d_loss, g_loss, gp, pivot.
    """
    cfg = gan.config
    expected = "raw_tfidf" if cfg.denoiser == "fc" else "denoised"
    if embedding.stage != expected:
        raise ConfigError(f"{cfg.denoiser} denoiser needs a {expected} embedding, got {embedding.stage}")
    if embedding.dim != gan.semantic_dim:
        raise DimensionMismatch(f"embedding dim {embedding.dim} != GAN conditioning dim {gan.semantic_dim}")
    if rng is None:
        rng = np.random.default_rng(substream(cfg.seed, "train", gan.patch))

    seen = np.asarray(split.seen, dtype=np.int64)
    mask = np.isin(bank.labels, seen)
    real_all = bank.features[mask, gan.patch, :].astype(np.float64)
    lab_all = bank.labels[mask]
    if len(lab_all) == 0:
        raise MissingPivot("no seen-class samples for training")
    sem = {c: v for c, v in zip(split.seen, embedding.lookup(split.seen))}
    phi_all = np.stack([sem[c] for c in lab_all.tolist()])
    centres = pivots if isinstance(pivots, np.ndarray) else np.stack(
        [pivots.pivot(gan.patch, c) for c in gan.seen])

    n = len(lab_all)
    B = cfg.batch_size
    trace = []
    for it in range(cfg.iterations):
        for _ in range(cfg.n_critic):
            pick = rng.integers(0, n, size=B)
            z = rng.standard_normal((B, cfg.z_dim))
            u = rng.uniform(0.0, 1.0, size=B)
            d_loss, d_grads, d_parts = discriminator_loss(
                gan, phi_all[pick], real_all[pick], lab_all[pick], z=z, u=u)
            _check_finite(d_loss, "discriminator loss", gan, it)
            gan.d_opt.step(gan.discriminator.params(), d_grads)

        pick = rng.integers(0, n, size=B)
        z = rng.standard_normal((B, cfg.z_dim))
        g_loss, g_grads, g_parts = generator_loss(gan, phi_all[pick], lab_all[pick], centres, z=z)
        _check_finite(g_loss, "generator loss", gan, it)
        gan.g_opt.step(gan.generator_params(), g_grads)
        gan.step += 1
        row = {"step": gan.step, "d_loss": d_loss, "g_loss": g_loss,
               "gp": d_parts["gp"], "pivot": g_parts["pivot"]}
        trace.append(row)
        if log is not None and log_every and gan.step % log_every == 0:
            log(f"patch {gan.patch} step {gan.step}: d={d_loss:.4f} g={g_loss:.4f} "
                f"gp={d_parts['gp']:.4f} pivot={g_parts['pivot']:.4f}")
    return gan, trace


def synthesize(gan, phi_class, n, rng=None):
    """``n`` generated feature rows for one class conditioning vector."""
    if n == 0:
        return np.zeros((0, gan.feat_dim))
    rng = rng or np.random.default_rng()
    phi = np.tile(np.asarray(phi_class, dtype=np.float64).reshape(1, -1), (n, 1))
    z = rng.standard_normal((n, gan.config.z_dim))
    fake, _, _, _ = _generate(gan, phi, z)
    return fake


def trace_csv(trace):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in trace:
        writer.writerow({k: (repr(float(row[k])) if k != "step" else int(row[k])) for k in TRACE_FIELDS})
    return buf.getvalue()


def save_trace(trace, path):
    atomic_write_text(path, trace_csv(trace))


def load_trace(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def save_patch_gan(gan, path):
    meta = {"patch": gan.patch, "seen": list(gan.seen), "step": gan.step,
            "config": gan.config.to_json()}
    save_checkpoint(path, gan.nets(), meta)


def load_patch_gan(path):
    nets, meta = load_checkpoint(path)
    config = GanConfig.from_json(meta["config"])
    return PatchGan(meta["patch"], config, tuple(meta["seen"]), nets["generator"],
                    nets["discriminator"], nets.get("denoiser"), meta["step"])
