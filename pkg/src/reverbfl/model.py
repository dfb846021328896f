"""Spectrogram CNN: three conv/batch-norm/ReLU/max-pool blocks, a dense layer with
dropout and a softmax head, plus the optimizers used by clients and server.

Parameters are kept in a plain ``dict`` of float64 arrays (insertion ordered).
Batches are arrays of shape ``[B, n_f, T, 2]``; labels are integer arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad

BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelArch:
    input_shape: tuple = (129, 16, 2)
    num_classes: int = 4
    conv_channels: tuple = (8, 16, 32)
    kernel: int = 3
    dense_units: int = 64
    dropout_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.conv_channels) != 3 or min(self.conv_channels) <= 0:
            raise ValueError(f"need three positive conv widths, got {self.conv_channels}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (n_f, T, channels), got {self.input_shape}")
        if self.num_classes < 1 or self.dense_units < 1:
            raise ValueError("num_classes and dense_units must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def pooled_shape(self):
        h, w, _ = self.input_shape
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(f"input {self.input_shape} too small for three 2x2 pools")
        return h, w, self.conv_channels[-1]


FULL_ARCH = ModelArch(input_shape=(513, 15, 2), num_classes=10,
                       conv_channels=(32, 64, 128), dense_units=128)
DESK_ARCH = ModelArch()


def param_shapes(arch):
    """Name -> shape for every tensor of the model, in canonical order."""
    shapes = {}
    cin = arch.input_shape[2]
    for i, cout in enumerate(arch.conv_channels, start=1):
        shapes[f"conv{i}.w"] = (arch.kernel, arch.kernel, cin, cout)
        shapes[f"conv{i}.b"] = (cout,)
        shapes[f"bn{i}.gamma"] = (cout,)
        shapes[f"bn{i}.beta"] = (cout,)
        shapes[f"bn{i}.running_mean"] = (cout,)
        shapes[f"bn{i}.running_var"] = (cout,)
        cin = cout
    flat = int(np.prod(arch.pooled_shape))
    shapes["dense.w"] = (flat, arch.dense_units)
    shapes["dense.b"] = (arch.dense_units,)
    shapes["out.w"] = (arch.dense_units, arch.num_classes)
    shapes["out.b"] = (arch.num_classes,)
    return shapes


def is_running_stat(name):
    return name.endswith(".running_mean") or name.endswith(".running_var")


def is_weight(name):
    return name.endswith(".w")


def trainable_names(arch):
    return [n for n in param_shapes(arch) if not is_running_stat(n)]


def count_params(params, trainable_only=True):
    return sum(v.size for k, v in params.items() if not (trainable_only and is_running_stat(k)))


def init_params(arch, seed):
    """He-uniform weights, zero biases, unit/zero batch-norm scale/shift."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if is_weight(name):
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


@lru_cache(maxsize=32)
def build_graph(arch, training, weight_decay=0.0):
    """Build the CNN graph.

    Node names: inputs ``x`` and ``y`` (one-hot), ``dropout_mask`` in training
    mode; outputs ``logits``, ``probs``, ``ce`` (mean cross-entropy) and
    ``loss`` (``ce`` plus ``weight_decay`` times the squared norm of weights).
    """
    g = ad.Graph()
    h = g.input("x")
    g.input("y")
    for name in param_shapes(arch):
        if training and is_running_stat(name):
            continue
        g.param(name)
    for i in range(1, len(arch.conv_channels) + 1):
        c = g.conv2d(f"conv{i}", h, f"conv{i}.w", padding="same")
        c = g.add(f"conv{i}_b", c, f"conv{i}.b")
        c = g.batchnorm(f"bn{i}", c, f"bn{i}.gamma", f"bn{i}.beta",
                        f"bn{i}.running_mean", f"bn{i}.running_var", training=training)
        c = g.relu(f"relu{i}", c)
        h = g.maxpool2x2(f"pool{i}", c)
    h = g.reshape("flat", h, ("batch", -1))
    h = g.affine("dense", h, "dense.w", "dense.b")
    h = g.relu("dense_relu", h)
    if training:
        g.input("dropout_mask")
        h = g.mul("dropout", h, "dropout_mask")
    g.affine("logits", h, "out.w", "out.b")
    g.softmax("probs", "logits")
    g.softmax_ll("ce", "logits", "y")
    loss = "ce"
    if weight_decay:
        for name in param_shapes(arch):
            if is_weight(name):
                penalty = g.sumsq(f"wd:{name}", name, scale=weight_decay)
                loss = g.add(f"loss+{name}", loss, penalty)
    g.scale("loss", loss, 1.0)
    return g


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_batch(arch, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != arch.input_shape:
        raise ad.ShapeError(f"batch shape {x.shape} does not match [B, *{arch.input_shape}]")
    return x


def _dropout_mask(arch, batch, rng):
    p = arch.dropout_p
    if p == 0.0:
        return np.ones((batch, arch.dense_units))
    keep = rng.random((batch, arch.dense_units)) >= p
    return keep / (1.0 - p)


def _bindings(arch, params, x, labels, training, rng):
    b = dict(params)
    b["x"] = _check_batch(arch, x)
    bsz = b["x"].shape[0]
    b["y"] = one_hot(labels, arch.num_classes) if labels is not None else np.zeros((bsz, arch.num_classes))
    if training:
        if rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        b["dropout_mask"] = _dropout_mask(arch, bsz, rng)
    return b


def forward(arch, params, x, mode="eval", rng=None):
    """Class probabilities ``[B, K]``. Dropout and batch statistics only in ``"train"`` mode."""
    training = mode == "train"
    g = build_graph(arch, training)
    return ad.evaluate(g, _bindings(arch, params, x, None, training, rng), ["probs"])["probs"]


def predict(arch, params, x, chunk=256):
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([forward(arch, params, x[i:i + chunk]) for i in range(0, len(x), chunk)])


def cross_entropy(probs, labels):
    """Mean of ``-log p_true`` with probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    p_true = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))


def loss_and_grads(arch, params, x, labels, mode="train", rng=None, weight_decay=0.0):
    """Loss, gradients of every trainable tensor, and (train mode) batch-norm statistics."""
    training = mode == "train"
    g = build_graph(arch, training, float(weight_decay))
    wrt = trainable_names(arch)
    extra = [f"bn{i}" for i in range(1, 4)] if training else []
    values, grads = ad.value_and_grad(g, _bindings(arch, params, x, labels, training, rng),
                                      "loss", wrt, outputs=extra)
    stats = {}
    if training:
        for i in range(1, 4):
            stats[f"bn{i}.running_mean"] = values[f"bn{i}/batch_mean"]
            stats[f"bn{i}.running_var"] = values[f"bn{i}/batch_var"]
    return float(values["loss"]), grads, stats


def grad_params(arch, params, x, labels, mode="train", rng=None, weight_decay=0.0):
    return loss_and_grads(arch, params, x, labels, mode, rng, weight_decay)[1]


def grad_input(arch, params, x, labels, scale=1.0):
    """d(scale * mean cross-entropy)/dx in eval mode (running stats, no dropout)."""
    g = build_graph(arch, False)
    b = _bindings(arch, params, x, labels, False, None)
    return scale * ad.gradients(g, b, "ce", ["x"])["x"]


def input_loss_and_grad(arch, params, x, labels):
    g = build_graph(arch, False)
    b = _bindings(arch, params, x, labels, False, None)
    values, grads = ad.value_and_grad(g, b, "ce", ["x"])
    return float(values["ce"]), grads["x"]


def update_running_stats(params, stats, momentum=BN_MOMENTUM):
    out = dict(params)
    for name, batch_val in stats.items():
        out[name] = momentum * params[name] + (1.0 - momentum) * batch_val
    return out


# --------------------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    decay_rate: float = 0.9
    decay_steps: float = 1000.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def current_lr(self):
        return self.lr * self.decay_rate ** (self.step / self.decay_steps)

    def fresh(self, step=0):
        """Same settings, empty moments."""
        return replace(self, step=step, m={}, v={})


def optimizer_step(state, params, grads):
    """One SGD or bias-corrected Adam step. Returns ``(state', params')``; inputs untouched."""
    lr = state.current_lr()
    new_params = dict(params)
    if state.kind == "sgd":
        for name, g in grads.items():
            new_params[name] = params[name] - lr * g
        return replace(state, step=state.step + 1), new_params
    t = state.step + 1
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m_prev = m.get(name, 0.0)
        v_prev = v.get(name, 0.0)
        m[name] = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1.0 - state.beta2) * g * g
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), new_params


def train_step(arch, params, state, x, labels, rng):
    """Forward/backward in train mode, optimizer update, running-stat update."""
    loss, grads, stats = loss_and_grads(arch, params, x, labels, "train", rng, state.weight_decay)
    state, params = optimizer_step(state, params, grads)
    return update_running_stats(params, stats), state, loss


def accuracy(arch, params, x, labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    probs = predict(arch, params, x)
    return float(np.mean(probs.argmax(axis=1) == labels))


def evaluate_model(arch, params, x, labels):
    """``(accuracy, mean cross-entropy)`` in eval mode."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict(arch, params, x)
    return float(np.mean(probs.argmax(axis=1) == labels)), cross_entropy(probs, labels)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(params, path):
    """Write ``<path>`` (npz of named tensors) and ``<path>.json`` (shape manifest)."""
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **params)
    manifest = {"tensors": [{"name": k, "shape": list(v.shape), "dtype": "float64"}
                            for k, v in params.items()]}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    with np.load(path) as data:
        params = {}
        for entry in manifest["tensors"]:
            arr = np.array(data[entry["name"]], dtype=np.float64)
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"tensor {entry['name']} shape {arr.shape} != manifest {entry['shape']}")
            params[entry["name"]] = arr
    return params
