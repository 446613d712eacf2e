"""Dense networks with analytic gradients.

Hidden layers use leaky-ReLU, which keeps the input gradient of a network
piecewise linear in its parameters; that is what lets the gradient penalty
be differentiated exactly without a general autodiff graph.
"""
import json
import struct

import numpy as np

from mpgan._io import atomic_write_bytes
from mpgan.errors import DimensionMismatch, FormatError, LabelOutOfRange, NonScalarOutput

OUTPUT_ACTIVATIONS = ("identity", "relu", "leaky_relu")

CKPT_MAGIC = b"MPCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")


class Mlp:
    def __init__(self, sizes, weights, biases, slope=0.2, output="identity", seed=None):
        if output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output!r}")
        self.sizes = [int(s) for s in sizes]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.slope = float(slope)
        self.output = output
        self.seed = seed
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise DimensionMismatch("one weight matrix and bias per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[l + 1], self.sizes[l]) or b.shape != (self.sizes[l + 1],):
                raise DimensionMismatch(f"layer {l} parameter shapes {w.shape}, {b.shape}")

    @classmethod
    def init(cls, sizes, seed, slope=0.2, output="identity"):
        """Glorot-uniform weights, zero biases, one seed stream per layer."""
        weights, biases = [], []
        for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            rng = np.random.default_rng([int(seed), l])
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(sizes, weights, biases, slope, output, seed)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def params(self):
        """Parameter arrays in declaration order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return Mlp(self.sizes, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.slope, self.output, self.seed)

    def __call__(self, x):
        return forward(self, x)[0]

    def describe(self):
        return {
            "sizes": self.sizes,
            "hidden": "leaky_relu",
            "slope": self.slope,
            "output": self.output,
            "seed": self.seed,
        }


def _act(z, slope):
    return np.where(z > 0, z, slope * z)


def _act_grad(z, slope):
    return np.where(z > 0, 1.0, slope)


def _out_act_grad(net, z):
    if net.output == "relu":
        return (z > 0).astype(np.float64)
    if net.output == "leaky_relu":
        return _act_grad(z, net.slope)
    return np.ones_like(z)


def forward(net, x):
    """Returns (outputs, cache); the cache holds layer inputs and pre-activations."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.in_dim:
        raise DimensionMismatch(f"batch shape {a.shape} does not fit input dim {net.in_dim}")
    inputs, pre = [], []
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        if l < last or net.output == "leaky_relu":
            a = _act(z, net.slope)
        elif net.output == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z
    return a, (inputs, pre)


def backward(net, cache, out_grad):
    """Reverse-mode gradients. Returns (param grads in declaration order, input grad)."""
    inputs, pre = cache
    delta = np.asarray(out_grad, dtype=np.float64) * _out_act_grad(net, pre[-1])
    grads = [None] * (2 * net.n_layers)
    for l in range(net.n_layers - 1, -1, -1):
        grads[2 * l] = delta.T @ inputs[l]
        grads[2 * l + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[l]
        if l > 0:
            delta = delta * _act_grad(pre[l - 1], net.slope)
    return grads, delta


def input_gradient_with_param_grads(net, x, head=None):
    """Input gradient of a scalar output and the gradient-penalty parameter grads.

    For each row of ``x`` computes g = d out / d x and the penalty
    (||g|| - 1)^2. Returns (g, mean penalty, grads of the mean penalty in
    declaration order). ``head`` selects one output unit of a multi-output
    net; without it the net must have a single output.

    Within a linear region of the activations g is multilinear in the
    weight matrices and independent of the biases, so the exact parameter
    gradients are outer products of a top-down and a bottom-up pass.
    """
    if head is None:
        if net.out_dim != 1:
            raise NonScalarOutput(f"net has {net.out_dim} outputs; pass head=")
        head = 0
    _, (inputs, pre) = forward(net, x)
    batch = inputs[0].shape[0]
    L = net.n_layers
    slopes = [_act_grad(pre[l], net.slope) for l in range(L - 1)]

    # top-down: v[l] is d out / d z_l, shape (batch, n_l)
    v = [None] * L
    v[L - 1] = _out_act_grad(net, pre[L - 1][:, head:head + 1])
    u = v[L - 1] @ net.weights[L - 1][head:head + 1]
    for l in range(L - 2, -1, -1):
        v[l] = u * slopes[l]
        u = v[l] @ net.weights[l]
    g = u

    norm = np.sqrt(np.einsum("ij,ij->i", g, g))
    penalty = (norm - 1.0) ** 2
    safe = np.where(norm > 0, norm, 1.0)
    r = (2.0 * (norm - 1.0) / safe)[:, None] * g / batch

    # bottom-up: q[l] = d(g . r) / d(a_l), carried in the fixed linear region
    grads = []
    q = r
    for l in range(L):
        if l == L - 1:
            gw = np.zeros_like(net.weights[l])
            gw[head] = (v[l].T @ q)[0]
        else:
            gw = v[l].T @ q
            q = (q @ net.weights[l].T) * slopes[l]
        grads += [gw, np.zeros_like(net.biases[l])]
    return g, penalty.mean(), grads


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionMismatch("one label per logit row")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in 0..{k - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels])) if n else 0.0
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / max(n, 1)


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params, lr=1e-4, betas=(0.5, 0.9), eps=1e-8):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def numerical_gradient(loss_fn, params, eps=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. each array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = loss_fn()
            flat[i] = old - eps
            lo = loss_fn()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def relative_error(a, b, floor=1e-10):
    """||a - b|| / max(||a||, ||b||); zero when both are below ``floor``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# -- checkpoints ---------------------------------------------------------------------

def checkpoint_bytes(nets, meta=None):
    """Serialise named nets: JSON header, then float64 parameters in order."""
    header = {"nets": {name: net.describe() for name, net in nets.items()},
              "order": list(nets), "meta": meta or {}}
    blob = np.concatenate(
        [p.ravel() for net in nets.values() for p in net.params()] or [np.zeros(0)]
    ).astype("<f8")
    header["n_params"] = int(blob.size)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)) + hbytes + blob.tobytes()


def save_checkpoint(path, nets, meta=None):
    atomic_write_bytes(path, checkpoint_bytes(nets, meta))


def parse_checkpoint(buf):
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("checkpoint truncated inside header")
    magic, version, hlen = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size + hlen
    if len(buf) < start:
        raise FormatError("checkpoint truncated inside JSON header")
    try:
        header = json.loads(buf[_CKPT_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    n_params = header["n_params"]
    if len(buf) - start != 8 * n_params:
        raise FormatError(f"checkpoint body holds {len(buf) - start} bytes, expected {8 * n_params}")
    blob = np.frombuffer(buf, dtype="<f8", count=n_params, offset=start).astype(np.float64)
    nets, pos = {}, 0
    for name in header["order"]:
        desc = header["nets"][name]
        sizes = desc["sizes"]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(blob[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in).copy())
            pos += fan_in * fan_out
            biases.append(blob[pos:pos + fan_out].copy())
            pos += fan_out
        nets[name] = Mlp(sizes, weights, biases, desc["slope"], desc["output"], desc["seed"])
    if pos != n_params:
        raise FormatError("checkpoint parameter count disagrees with layer sizes")
    return nets, header["meta"]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
