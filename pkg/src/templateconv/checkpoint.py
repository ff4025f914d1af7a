"""Network checkpoints: a manifest plus per-layer binary files."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import CheckpointError
from .layer import TemplateConvLayer
from .nn import (
    BatchNorm,
    DenseConv,
    Flatten,
    Linear,
    MaxPool,
    Network,
    ReLU,
    SoftmaxCrossEntropy,
    TemplateConv,
)
from .tensor import Tensor4


def _save_array(arr: np.ndarray, path) -> None:
    flat = np.asarray(arr, dtype=np.float64)
    shape = list(flat.shape) + [1] * (4 - flat.ndim)
    Tensor4(flat.reshape(shape)).save(path)


def _load_array(path, ndim: int) -> np.ndarray:
    data = Tensor4.load(path).data
    return data.reshape(data.shape[:ndim])


def save_network(net: Network, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, DenseConv):
            wname, bname = f"layer{i}_weight.t4", f"layer{i}_bias.t4"
            Tensor4(layer.weight).save(os.path.join(directory, wname))
            _save_array(layer.bias, os.path.join(directory, bname))
            manifest.append({"kind": "dense_conv", "weight": wname,
                             "bias": bname, "stride": layer.stride,
                             "padding": layer.padding})
        elif isinstance(layer, TemplateConv):
            cname, bname = f"layer{i}.tcl", f"layer{i}_bias.t4"
            layer.core.save(os.path.join(directory, cname))
            _save_array(layer.bias, os.path.join(directory, bname))
            manifest.append({"kind": "template_conv", "core": cname,
                             "bias": bname})
        elif isinstance(layer, BatchNorm):
            sname = f"layer{i}_bn.t4"
            stacked = np.stack([layer.gamma, layer.beta, layer.running_mean,
                                layer.running_var])
            _save_array(stacked, os.path.join(directory, sname))
            manifest.append({"kind": "batchnorm", "stats": sname,
                             "eps": layer.eps, "momentum": layer.momentum})
        elif isinstance(layer, ReLU):
            manifest.append({"kind": "relu"})
        elif isinstance(layer, MaxPool):
            manifest.append({"kind": "maxpool", "k": layer.k,
                             "stride": layer.stride})
        elif isinstance(layer, Flatten):
            manifest.append({"kind": "flatten"})
        elif isinstance(layer, Linear):
            wname, bname = f"layer{i}_weight.t4", f"layer{i}_bias.t4"
            _save_array(layer.weight, os.path.join(directory, wname))
            _save_array(layer.bias, os.path.join(directory, bname))
            manifest.append({"kind": "linear", "weight": wname, "bias": bname})
        elif isinstance(layer, SoftmaxCrossEntropy):
            manifest.append({"kind": "softmax_ce"})
        else:
            raise CheckpointError(f"cannot serialize layer {type(layer).__name__}")
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump({"layers": manifest}, f, indent=2)


def load_network(directory) -> Network:
    mpath = os.path.join(directory, "manifest.json")
    if not os.path.exists(mpath):
        raise CheckpointError(f"{directory}: no manifest.json")
    with open(mpath) as f:
        manifest = json.load(f)
    layers = []
    for entry in manifest["layers"]:
        kind = entry["kind"]
        if kind == "dense_conv":
            weight = Tensor4.load(os.path.join(directory, entry["weight"])).data
            bias = _load_array(os.path.join(directory, entry["bias"]), 1)
            layers.append(DenseConv(weight, bias, entry["stride"],
                                    entry["padding"]))
        elif kind == "template_conv":
            core = TemplateConvLayer.load(os.path.join(directory, entry["core"]))
            bias = _load_array(os.path.join(directory, entry["bias"]), 1)
            layers.append(TemplateConv(core, bias))
        elif kind == "batchnorm":
            stats = _load_array(os.path.join(directory, entry["stats"]), 2)
            bn = BatchNorm(stats.shape[1], eps=entry["eps"],
                           momentum=entry["momentum"])
            bn.gamma, bn.beta = stats[0].copy(), stats[1].copy()
            bn.running_mean, bn.running_var = stats[2].copy(), stats[3].copy()
            layers.append(bn)
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool":
            layers.append(MaxPool(entry["k"], entry["stride"]))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "linear":
            weight = _load_array(os.path.join(directory, entry["weight"]), 2)
            bias = _load_array(os.path.join(directory, entry["bias"]), 1)
            layers.append(Linear(weight, bias))
        elif kind == "softmax_ce":
            layers.append(SoftmaxCrossEntropy())
        else:
            raise CheckpointError(f"unknown layer kind {kind!r}")
    return Network(layers)
