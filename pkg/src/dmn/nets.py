"""Softmax head, cross-entropy and the backprop ConvNet baseline.

The baseline is ``(conv k x k valid, ReLU, maxpool2)`` blocks followed by a
dense softmax layer.  Gradients are the usual chain: the head gives
``(sigma - y) / N``, pooling routes each pooled gradient to its stored
argmax, ReLU masks by ``z > 0`` and each conv layer maps the gradient back to
its patch rows with the transpose of its filters.  Optimisation is plain
minibatch SGD.
"""
from dataclasses import dataclass, field
import copy
import math

import numpy as np

from .errors import DimensionError, DivergenceError
from .patching import col2im, im2col, maxpool2, maxpool2_backward, out_extent


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _targets(labels, n_classes):
    y = np.asarray(labels)
    if y.ndim == 1:
        return one_hot(y, n_classes)
    if y.shape[1] != n_classes:
        raise DimensionError(f"targets have {y.shape[1]} columns, logits {n_classes}")
    return y.astype(np.float64)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood ``-(1/N) sum y log softmax(logits)``.

    ``labels`` may be one-hot rows or integer class ids.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = _targets(labels, logits.shape[1])
    return float(-np.sum(y * log_softmax(logits)) / logits.shape[0])


def softmax_grad(logits, labels):
    """Gradient of :func:`cross_entropy_loss` with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    return (softmax(logits) - _targets(labels, logits.shape[1])) / logits.shape[0]


def glorot_limit(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    init_scale: float = 1.0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr >= 0.0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def streams(self):
        """Independent generators for initialisation and minibatch order."""
        init, order = np.random.SeedSequence(self.seed).spawn(2)
        return np.random.default_rng(init), np.random.default_rng(order)


# ---------------------------------------------------------------------------
# dense head


class DenseHead:
    """Affine layer followed by softmax; ``weights`` is ``d_in x n_classes``."""

    def __init__(self, weights, bias):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.bias.shape != (self.weights.shape[1],):
            raise DimensionError("one bias per class required")

    @classmethod
    def init(cls, d_in, n_classes, rng, scale=1.0):
        lim = scale * glorot_limit(d_in, n_classes)
        return cls(rng.uniform(-lim, lim, size=(d_in, n_classes)), np.zeros(n_classes))

    @property
    def n_classes(self):
        return self.weights.shape[1]

    def logits(self, features):
        x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
        if x.shape[1] != self.weights.shape[0]:
            raise DimensionError(f"features have {x.shape[1]} columns, head expects {self.weights.shape[0]}")
        return x @ self.weights + self.bias

    def probabilities(self, features):
        return softmax(self.logits(features))

    def predict(self, features):
        return np.argmax(self.logits(features), axis=1)

    def copy(self):
        return DenseHead(self.weights.copy(), self.bias.copy())


def _check_finite(loss, params, where):
    if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
        raise DivergenceError(f"non-finite loss or parameters at {where} (loss={loss})")


def _evaluate(logit_fn, features, labels, chunk=2048):
    loss, correct = 0.0, 0
    n = len(labels)
    for start in range(0, n, chunk):
        z = logit_fn(features[start : start + chunk])
        lab = labels[start : start + chunk]
        loss += cross_entropy_loss(z, lab) * len(lab)
        correct += int(np.sum(np.argmax(z, axis=1) == lab))
    return loss / n, 100.0 * correct / n


@dataclass
class TrainResult:
    """Best-validation model, final-epoch model and per-epoch metrics.

    ``history`` rows are ``{"epoch", "split", "loss", "accuracy"}`` with
    accuracy in percent; epoch 0 is the initial model.
    """

    model: object
    final_model: object
    history: list
    best_epoch: int
    snapshots: list = field(default_factory=list)

    def series(self, split, key="accuracy"):
        rows = [r for r in self.history if r["split"] == split]
        return np.array([r["epoch"] for r in rows]), np.array([r[key] for r in rows])

    def metric(self, split, epoch=None, key="accuracy"):
        ep = self.best_epoch if epoch is None else epoch
        for r in self.history:
            if r["split"] == split and r["epoch"] == ep:
                return r[key]
        raise KeyError((split, ep))


def _record(history, epoch, logit_fn, train, validation, chunk=2048):
    for split, data in (("train", train), ("validation", validation)):
        if data is None:
            continue
        loss, acc = _evaluate(logit_fn, *data, chunk=chunk)
        history.append({"epoch": epoch, "split": split, "loss": loss, "accuracy": acc})


def _best(history, epoch, best, split):
    acc = [r["accuracy"] for r in history if r["epoch"] == epoch and r["split"] == split][0]
    return best is None or acc > best[1], acc


def train_head(features, labels, cfg=TrainConfig(), n_classes=None, validation=None, head=None):
    """Minibatch SGD on a softmax head over fixed features.

    Parameters
    ----------
    features : ndarray, shape (N, ...)
        Flattened per sample.
    labels : ndarray of int, shape (N,)
    cfg : TrainConfig
    validation : tuple (features, labels), optional
        Used to pick the best epoch; without it the training accuracy is used.

    Returns
    -------
    TrainResult
    """
    x = np.asarray(features).reshape(len(features), -1)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(n_classes or labels.max() + 1)
    init_rng, order_rng = cfg.streams()
    head = head.copy() if head is not None else DenseHead.init(x.shape[1], n_classes, init_rng, cfg.init_scale)
    if validation is not None:
        vx, vy = validation
        validation = (np.asarray(vx).reshape(len(vx), -1), np.asarray(vy, dtype=np.int64))
    select = "validation" if validation is not None else "train"
    history = []
    _record(history, 0, head.logits, (x, labels), validation)
    best = (head.copy(), _best(history, 0, None, select)[1], 0)
    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x[idx].astype(np.float64)
            z = xb @ head.weights + head.bias
            g = softmax_grad(z, labels[idx])
            head.weights -= cfg.lr * (xb.T @ g)
            head.bias -= cfg.lr * g.sum(axis=0)
        _record(history, epoch, head.logits, (x, labels), validation)
        _check_finite(history[-1]["loss"], (head.weights, head.bias), f"epoch {epoch}")
        better, acc = _best(history, epoch, best, select)
        if better:
            best = (head.copy(), acc, epoch)
    return TrainResult(best[0], head, history, best[2])


# ---------------------------------------------------------------------------
# ConvNet baseline

#: images per forward pass when scoring a ConvNet
EVAL_CHUNK = 256


class ConvNetBaseline:
    """``len(conv_weights)`` conv/ReLU/maxpool blocks and a dense softmax head.

    ``conv_weights[i]`` is ``F_i x (C_i k k)`` in the patch-row layout of
    :mod:`dmn.patching`.
    """

    def __init__(self, conv_weights, conv_biases, head, input_shape, k=3):
        self.conv_weights = [np.asarray(w, dtype=np.float64) for w in conv_weights]
        self.conv_biases = [np.asarray(b, dtype=np.float64) for b in conv_biases]
        self.head = head
        self.input_shape = tuple(input_shape)
        self.k = k
        shape = self.input_shape
        for w in self.conv_weights:
            if w.shape[1] != shape[0] * k * k:
                raise DimensionError(f"conv weight {w.shape} does not fit input {shape}")
            shape = (w.shape[0], out_extent(shape[1], k) // 2, out_extent(shape[2], k) // 2)
            if min(shape[1:]) < 1:
                raise DimensionError("feature map vanished after pooling")
        if head.weights.shape[0] != int(np.prod(shape)):
            raise DimensionError("head input does not match the flattened feature map")
        self.feature_shape = shape

    @classmethod
    def init(cls, input_shape, filters, n_classes, rng, k=3, scale=1.0):
        ws, bs = [], []
        c, h, w = input_shape
        for f in filters:
            lim = scale * glorot_limit(c * k * k, f * k * k)
            ws.append(rng.uniform(-lim, lim, size=(f, c * k * k)))
            bs.append(np.zeros(f))
            c, h, w = f, out_extent(h, k) // 2, out_extent(w, k) // 2
        head = DenseHead.init(c * h * w, n_classes, rng, scale)
        return cls(ws, bs, head, input_shape, k)

    @property
    def n_conv(self):
        return len(self.conv_weights)

    def parameters(self):
        """Parameter arrays in the order w1, b1, ..., head weights, head bias."""
        out = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            out += [w, b]
        return out + [self.head.weights, self.head.bias]

    @property
    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def layer_weights(self):
        """Weight matrices per layer (convs then head), as used by the diagnostics."""
        return self.conv_weights + [self.head.weights]

    def copy(self):
        return copy.deepcopy(self)

    def forward(self, x, keep=False):
        """Logits for ``x``; with ``keep=True`` also the cache for :meth:`backward`."""
        a = np.asarray(getattr(x, "images", x), dtype=np.float64)
        cache = []
        k = self.k
        for w, b in zip(self.conv_weights, self.conv_biases):
            n, _, h, wd = a.shape
            ho, wo = out_extent(h, k), out_extent(wd, k)
            cols = im2col(a, k)
            z = (cols @ w.T + b).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
            r = np.maximum(z, 0.0)
            p, arg = maxpool2(r)
            if keep:
                cache.append((a.shape, cols, z, arg))
            a = p
        flat = a.reshape(a.shape[0], -1)
        logits = self.head.logits(flat)
        return (logits, (cache, flat)) if keep else logits

    def backward(self, cache, dlogits):
        """Parameter gradients, ordered like :meth:`parameters`."""
        layers, flat = cache
        grads_head = [flat.T @ dlogits, dlogits.sum(axis=0)]
        d = (dlogits @ self.head.weights.T).reshape((flat.shape[0],) + self.feature_shape)
        grads = []
        for i in range(self.n_conv - 1, -1, -1):
            in_shape, cols, z, arg = layers[i]
            w = self.conv_weights[i]
            dz = maxpool2_backward(d, arg, z.shape) * (z > 0.0)
            rows = dz.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
            grads = [rows.T @ cols, rows.sum(axis=0)] + grads
            if i > 0:
                d = col2im(rows @ w, in_shape, self.k)
        return grads + grads_head

    def loss_and_gradients(self, x, labels):
        logits, cache = self.forward(x, keep=True)
        loss = cross_entropy_loss(logits, labels)
        return loss, self.backward(cache, softmax_grad(logits, labels))

    def logits_batched(self, x, chunk=1000):
        return np.concatenate([self.forward(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def conv_backprop_step(net, x, labels, lr):
    """One SGD step on every parameter of ``net`` (updated in place); returns the loss."""
    loss, grads = net.loss_and_gradients(x, labels)
    _check_finite(loss, grads, "gradient step")
    for p, g in zip(net.parameters(), grads):
        p -= lr * g
    return loss


def train_convnet(batch, filters, cfg=TrainConfig(lr=0.01), validation=None, snapshots=True, k=3):
    """Train a baseline ConvNet with ``filters[i]`` filters in conv block ``i``.

    Returns a :class:`TrainResult` whose ``snapshots[t]`` holds copies of the
    per-layer weight matrices after epoch ``t`` (``t = 0`` is the
    initialisation).
    """
    x = np.asarray(batch.images)
    labels = np.asarray(batch.labels, dtype=np.int64)
    init_rng, order_rng = cfg.streams()
    net = ConvNetBaseline.init(x.shape[1:], list(filters), batch.n_classes, init_rng, k, cfg.init_scale)
    if validation is not None:
        validation = (np.asarray(validation.images), np.asarray(validation.labels, dtype=np.int64))
    select = "validation" if validation is not None else "train"
    history = []
    snaps = [[w.copy() for w in net.layer_weights()]] if snapshots else []
    _record(history, 0, net.forward, (x, labels), validation, EVAL_CHUNK)
    best = (net.copy(), _best(history, 0, None, select)[1], 0)
    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            conv_backprop_step(net, x[idx], labels[idx], cfg.lr)
        _record(history, epoch, net.forward, (x, labels), validation, EVAL_CHUNK)
        _check_finite(history[-1]["loss"], net.parameters(), f"epoch {epoch}")
        if snapshots:
            snaps.append([w.copy() for w in net.layer_weights()])
        better, acc = _best(history, epoch, best, select)
        if better:
            best = (net.copy(), acc, epoch)
    return TrainResult(best[0], net, history, best[2], snaps)
