"""MLP model, classification losses, and parameter (de)serialization.

The network is a plain relu MLP: every layer but the last is followed by
relu, the last layer's outputs are the logits. Parameters are immutable;
updates always build new instances (or graph nodes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class MlpParams:
    """Per-layer (weight [out x in], bias [out]) float64 parameters."""

    __slots__ = ("layer_sizes", "layers")

    def __init__(self, layer_sizes, layers):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(s <= 0 for s in layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
        frozen = []
        for i, (w, b) in enumerate(layers):
            w = ad.as_tensor(w)
            b = ad.as_tensor(b)
            expect = (layer_sizes[i + 1], layer_sizes[i])
            if w.shape != expect:
                raise ValueError(f"layer {i} weight shape {w.shape} != {expect}")
            if b.shape != (layer_sizes[i + 1],):
                raise ValueError(f"layer {i} bias shape {b.shape} != "
                                 f"({layer_sizes[i + 1]},)")
            w.flags.writeable = False
            b.flags.writeable = False
            frozen.append((w, b))
        if len(frozen) != len(layer_sizes) - 1:
            raise ValueError("layer count does not match layer_sizes")
        self.layer_sizes = layer_sizes
        self.layers = tuple(frozen)

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self):
        """Concatenate all parameters (per layer: weight rows, then bias)."""
        return np.concatenate([a.ravel() for w, b in self.layers for a in (w, b)])

    @classmethod
    def unflatten(cls, flat, layer_sizes):
        flat = ad.as_tensor(flat).ravel()
        layers = []
        pos = 0
        for i, o in zip(layer_sizes[:-1], layer_sizes[1:]):
            w = flat[pos:pos + o * i].reshape(o, i).copy()
            pos += o * i
            b = flat[pos:pos + o].copy()
            pos += o
            layers.append((w, b))
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} values, "
                             f"expected {pos} for sizes {tuple(layer_sizes)}")
        return cls(layer_sizes, layers)


@dataclass
class LossValue:
    node: int
    n_samples: int


def init_mlp(layer_sizes, rng_seed):
    """Glorot-uniform weights from a seeded PCG64 stream; zero biases.

    Weights are drawn layer by layer in order, so a given seed always yields
    bitwise-identical parameters.
    """
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layer_sizes, layers)


def enter_params(graph, params):
    """Put MlpParams on a graph as differentiable leaves.

    Returns the node structure the other nn/meta functions consume:
    a list of (weight_id, bias_id) pairs.
    """
    return [(graph.input(w, requires_grad=True), graph.input(b, requires_grad=True))
            for w, b in params.layers]


def param_node_list(param_nodes):
    """Flatten [(w_id, b_id), ...] into the order used for grad calls."""
    return [nid for pair in param_nodes for nid in pair]


def forward(graph, param_nodes, x):
    """Logits node for a [batch x d] input.

    `x` may be an ndarray (added as a constant) or an existing node id.
    """
    h = x if isinstance(x, (int, np.integer)) else graph.constant(ad.as_tensor(x))
    batch = graph.shape(h)[0]
    n_layers = len(param_nodes)
    for i, (w, b) in enumerate(param_nodes):
        in_dim = graph.shape(w)[1]
        if graph.shape(h)[1] != in_dim:
            raise ad.ShapeMismatchError(
                "forward", (graph.shape(h), graph.shape(w)),
                f"feature dim {graph.shape(h)[1]} != layer input {in_dim}")
        h = ad.matmul(graph, h, w, tb=True)
        out_dim = graph.shape(h)[1]
        brow = ad.reshape(graph, b, (1, out_dim))
        h = ad.add(graph, h, ad.broadcast_to(graph, brow, (batch, out_dim)))
        if i < n_layers - 1:
            h = ad.relu(graph, h)
    return h


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise ValueError(f"label {bad} out of range [0, {n_classes})")
    return labels


def cross_entropy(graph, logits, labels):
    """Mean softmax cross-entropy of a logits node against integer labels."""
    batch, n_classes = graph.shape(logits)
    labels = _check_labels(labels, n_classes)
    if labels.size != batch:
        raise ValueError(f"{labels.size} labels for batch of {batch}")
    onehot = np.zeros((batch, n_classes))
    onehot[np.arange(batch), labels] = 1.0
    picked = ad.mul(graph, ad.log_softmax(graph, logits), graph.constant(onehot))
    loss = ad.smul(graph, ad.reduce_sum(graph, picked), -1.0 / batch)
    return LossValue(node=loss, n_samples=batch)


def accuracy(logits, labels):
    """Fraction of rows whose argmax matches the label.

    Argmax ties resolve to the lowest class index.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    labels = _check_labels(labels, logits.shape[1])
    if labels.size != logits.shape[0]:
        raise ValueError(f"{labels.size} labels for batch of {logits.shape[0]}")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# --- checkpoint format -------------------------------------------------------
# one ASCII header line, then the flattened parameters as little-endian f64

_CKPT_MAGIC = "metarobust-ckpt v1"


def save_checkpoint(params, path):
    header = f"{_CKPT_MAGIC} {','.join(str(s) for s in params.layer_sizes)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        blob = fh.read()
    parts = header.rsplit(" ", 1)
    if len(parts) != 2 or parts[0] != _CKPT_MAGIC:
        raise ValueError(f"not a metarobust checkpoint: bad header {header!r}")
    try:
        layer_sizes = tuple(int(s) for s in parts[1].split(","))
    except ValueError:
        raise ValueError(f"malformed layer sizes in checkpoint header {header!r}")
    flat = np.frombuffer(blob, dtype="<f8")
    return MlpParams.unflatten(flat, layer_sizes)
