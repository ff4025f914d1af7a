"""A minimal trainable CNN stack around the decomposed layer.

Hand-rolled backprop over a fixed menu of layers (dense conv, decomposed
conv, batch norm, ReLU, max-pool, flatten, linear, softmax cross-entropy)
with SGD + momentum and step learning-rate decay.  All verification paths
run in 64-bit and are bitwise deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .layer import TemplateConvLayer, conv_input_grad, conv_weight_grad
from .tensor import ConvGeometry, Tensor4, _pad_input
from .transforms import TransformFamily


def conv2d_fast(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Dense convolution via offset gathering + one matrix multiply."""
    b, c, h, w = x.shape
    n_out, _, kh, kw = weight.shape
    s, p = stride, padding
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    xp = _pad_input(x, p)
    cols = np.empty((b, kh * kw * c, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            k = ki * kw + kj
            cols[:, k * c:(k + 1) * c] = xp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
    w2 = weight.transpose(0, 2, 3, 1).reshape(n_out, kh * kw * c)
    out = np.matmul(w2[None], cols.reshape(b, kh * kw * c, ho * wo))
    return out.reshape(b, n_out, ho, wo)


class LayerBase:
    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class DenseConv(LayerBase):
    def __init__(self, weight, bias, stride=1, padding=1):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.stride = stride
        self.padding = padding
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.accum_weight_grad = np.zeros_like(self.weight)
        self._x = None

    @classmethod
    def init(cls, c_in, n_out, k, rng, stride=1, padding=1):
        bound = np.sqrt(1.0 / (c_in * k * k))  # fan-in uniform
        w = rng.uniform(-bound, bound, size=(n_out, c_in, k, k))
        return cls(w, np.zeros(n_out), stride, padding)

    def forward(self, x, train):
        self._x = x
        return conv2d_fast(x, self.weight, self.stride, self.padding) \
            + self.bias[None, :, None, None]

    def backward(self, grad):
        x = self._x
        self.grad_weight = conv_weight_grad(x, grad, self.weight.shape[2:],
                                            self.stride, self.padding)
        self.grad_bias = grad.sum(axis=(0, 2, 3))
        self.accum_weight_grad += self.grad_weight
        return conv_input_grad(self.weight, grad, self.stride, self.padding,
                               x.shape[2:])

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def grads(self):
        return [("weight", self.grad_weight), ("bias", self.grad_bias)]


class TemplateConv(LayerBase):
    """A decomposed convolution plus bias, as a trainable network layer."""

    def __init__(self, core: TemplateConvLayer, bias):
        self.core = core
        self.bias = np.asarray(bias, dtype=np.float64)
        self._x = None
        self._grad_templates = None
        self._grad_transforms = None
        self.grad_bias = np.zeros_like(self.bias)
        self.accum_weight_grad = np.zeros(
            (core.n_out, core.c_in) + tuple(core.geom.kernel))

    def forward(self, x, train):
        self._x = x
        core = self.core
        if core.family is TransformFamily.SCALAR:
            out = core.forward_two_stage(Tensor4(x)).data
        else:
            out = conv2d_fast(x, core.reconstructed_weight().data,
                              core.geom.stride, core.geom.padding)
        return out + self.bias[None, :, None, None]

    def backward(self, grad):
        gx, gt, gtf = self.core.backward(Tensor4(self._x), Tensor4(grad))
        self._grad_templates = gt
        self._grad_transforms = gtf
        self.grad_bias = grad.sum(axis=(0, 2, 3))
        self.accum_weight_grad += self.core.last_dense_weight_grad
        return gx.data

    def params(self):
        out = [("templates", self.core.templates), ("bias", self.bias)]
        for n, g, t in self.core.transform_params():
            out.append((f"transform:{n}:{g}", t.params))
        return out

    def grads(self):
        out = [("templates", self._grad_templates), ("bias", self.grad_bias)]
        for n in sorted(self.core.transforms):
            for g in range(self.core.groups):
                out.append((f"transform:{n}:{g}", self._grad_transforms[n][g]))
        return out


class BatchNorm(LayerBase):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.grad_gamma = np.zeros(channels)
        self.grad_beta = np.zeros(channels)
        self._cache = None

    def forward(self, x, train):
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = (1 - self.momentum) * self.running_mean \
                + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var \
                + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma[None, :, None, None] * xhat \
            + self.beta[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        self.grad_gamma = np.sum(grad * xhat, axis=(0, 2, 3))
        self.grad_beta = np.sum(grad, axis=(0, 2, 3))
        gxhat = grad * self.gamma[None, :, None, None]
        if not train:
            return gxhat * inv_std[None, :, None, None]
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        sum_g = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_gx = np.sum(gxhat * xhat, axis=(0, 2, 3))[None, :, None, None]
        return inv_std[None, :, None, None] / m * (m * gxhat - sum_g - xhat * sum_gx)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def grads(self):
        return [("gamma", self.grad_gamma), ("beta", self.grad_beta)]


class ReLU(LayerBase):
    def forward(self, x, train):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool(LayerBase):
    def __init__(self, k=2, stride=None):
        self.k = k
        self.stride = stride if stride is not None else k

    def forward(self, x, train):
        b, c, h, w = x.shape
        k, s = self.k, self.stride
        ho = (h - k) // s + 1
        wo = (w - k) // s + 1
        windows = np.stack([x[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
                            for ki in range(k) for kj in range(k)])
        self._argmax = windows.argmax(axis=0)
        self._in_shape = x.shape
        return windows.max(axis=0)

    def backward(self, grad):
        k, s = self.k, self.stride
        gx = np.zeros(self._in_shape)
        b, c, ho, wo = grad.shape
        for t in range(k * k):
            ki, kj = divmod(t, k)
            mask = self._argmax == t
            view = gx[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s]
            view += np.where(mask, grad, 0.0)
        return gx


class Flatten(LayerBase):
    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Linear(LayerBase):
    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def init(cls, n_in, n_out, rng):
        bound = np.sqrt(1.0 / n_in)
        return cls(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out))

    def forward(self, x, train):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad):
        self.grad_weight = grad.T @ self._x
        self.grad_bias = grad.sum(axis=0)
        return grad @ self.weight

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def grads(self):
        return [("weight", self.grad_weight), ("bias", self.grad_bias)]


class SoftmaxCrossEntropy(LayerBase):
    """Loss head: mean softmax cross-entropy over the batch."""

    def forward_loss(self, logits, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        log_probs = shifted - log_z
        self._probs = np.exp(log_probs)
        self._labels = labels
        return -float(np.mean(log_probs[np.arange(len(labels)), labels]))

    def backward_loss(self):
        b = len(self._labels)
        grad = self._probs.copy()
        grad[np.arange(b), self._labels] -= 1.0
        return grad / b


class Network:
    """Ordered layer list ending in exactly one loss head."""

    def __init__(self, layers):
        heads = [l for l in layers if isinstance(l, SoftmaxCrossEntropy)]
        if len(heads) != 1 or not isinstance(layers[-1], SoftmaxCrossEntropy):
            raise ShapeError("network requires exactly one trailing loss head")
        self.layers = list(layers)

    @property
    def body(self):
        return self.layers[:-1]

    @property
    def head(self) -> SoftmaxCrossEntropy:
        return self.layers[-1]

    def logits(self, x: np.ndarray, train: bool) -> np.ndarray:
        out = x
        for layer in self.body:
            out = layer.forward(out, train)
        return out

    def conv_layers(self):
        """(index, layer) pairs for every prunable convolution."""
        return [(i, l) for i, l in enumerate(self.layers)
                if isinstance(l, (DenseConv, TemplateConv))]


def forward_loss(net: Network, batch: Tensor4, labels, train_mode: bool):
    labels = np.asarray(labels)
    if len(labels) != batch.n:
        raise ShapeError(
            f"label count {len(labels)} does not match batch size {batch.n}")
    logits = net.logits(batch.data, train_mode)
    loss = net.head.forward_loss(logits, labels)
    return loss, logits


def backward(net: Network) -> None:
    grad = net.head.backward_loss()
    for layer in reversed(net.body):
        grad = layer.backward(grad)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    seed: int = 0
    augment_flip: bool = False
    augment_crop: bool = False
    augment_rotate: bool = False
    schedule: "object" = None          # PruneSchedule or None
    measure: "object" = None           # SaliencyMeasure
    family: TransformFamily = TransformFamily.SCALAR
    groups: int = 1


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for b in config.decay_epochs if epoch >= b)
    return config.lr * config.decay_factor ** passed


def sgd_step(net: Network, config: TrainConfig, epoch: int, momentum_state: dict) -> None:
    """v <- mu*v + g + wd*w; w <- w - lr*v, in place per parameter."""
    lr = lr_at_epoch(config, epoch)
    for li, layer in enumerate(net.layers):
        ps, gs = layer.params(), layer.grads()
        for (name, p), (_, g) in zip(ps, gs):
            key = (li, name)
            buf = momentum_state.get(key)
            if buf is None or buf.shape != p.shape:
                buf = np.zeros_like(p)
            buf = config.momentum * buf + g + config.weight_decay * p
            momentum_state[key] = buf
            p -= lr * buf
        if isinstance(layer, TemplateConv):
            layer.core.touch()


def make_small_cnn(rng, in_channels=3, classes=4, widths=(8, 16, 16),
                   spatial=32) -> Network:
    """3-conv CNN with BN/ReLU/pool blocks and a single linear classifier."""
    layers = []
    c = in_channels
    side = spatial
    for width in widths:
        layers.append(DenseConv.init(c, width, 3, rng, stride=1, padding=1))
        layers.append(BatchNorm(width))
        layers.append(ReLU())
        layers.append(MaxPool(2))
        c = width
        side //= 2
    layers.append(Flatten())
    layers.append(Linear.init(c * side * side, classes, rng))
    layers.append(SoftmaxCrossEntropy())
    return Network(layers)


def reset_grad_accumulators(net: Network) -> None:
    for _, layer in net.conv_layers():
        layer.accum_weight_grad[:] = 0.0


def train(net: Network, dataset, config: TrainConfig, val=None):
    """Minibatch SGD with the linear pruning ramp applied between epochs.

    Returns the (possibly converted) network and a per-epoch metrics
    history; see the pruning module for the conversion hooks.
    """
    from .data import augment
    from .cost import network_report
    from .pruning import SaliencyMeasure, apply_plan, build_plan, rate_at_epoch

    rng = np.random.default_rng(config.seed)
    images = dataset.images.data
    labels = np.asarray(dataset.labels)
    n = images.shape[0]
    momentum_state: dict = {}
    history = []
    prev_rate = 0.0

    for epoch in range(config.epochs):
        if config.schedule is not None and config.schedule.target_rate > 0:
            rate = rate_at_epoch(config.schedule, epoch)
            if rate > 0 and rate != prev_rate:
                measure = config.measure or SaliencyMeasure.MAGNITUDE
                plan = build_plan(net, measure, epoch, config.schedule)
                apply_plan(net, plan, config.family, config.groups)
            prev_rate = rate

        m_per_layer = [l.core.m_templates if isinstance(l, TemplateConv)
                       else l.weight.shape[0] for _, l in net.conv_layers()]

        reset_grad_accumulators(net)
        order = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = images[idx]
            yb = labels[idx]
            if config.augment_flip or config.augment_crop or config.augment_rotate:
                xb = augment(xb, flip=config.augment_flip,
                             crop=config.augment_crop,
                             rotate=config.augment_rotate, rng=rng)
            loss, logits = forward_loss(net, Tensor4(xb), yb, train_mode=True)
            backward(net)
            sgd_step(net, config, epoch, momentum_state)
            total_loss += loss * len(idx)
            total_correct += int(np.sum(logits.argmax(axis=1) == yb))

        report = network_report(net, (images.shape[1],) + images.shape[2:])
        row = {
            "epoch": epoch,
            "train_loss": total_loss / n,
            "train_acc": total_correct / n,
            "val_acc": evaluate(net, val) if val is not None else "",
            "total_params": sum(c.params for c in report.compressed),
            "total_macs": report.total_compressed_macs,
            "m_per_layer": list(m_per_layer),
        }
        history.append(row)
    return net, history


def evaluate(net: Network, dataset) -> float:
    logits = net.logits(dataset.images.data, train=False)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(dataset.labels)))
