"""Frozen tanh backbone with residual bottleneck adapters and a linear head.

Forward and backward passes are written out by hand so that gradients flow
only into the adapters and the head (the backbone arrays are marked
read-only). Activations use the row-vector convention: a batch is
(samples, features) and every layer computes ``x @ w + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .numerics import Rng, as_matrix, relu, sigmoid, softmax

__all__ = [
    "Backbone",
    "AdapterLayer",
    "AdapterStack",
    "ClassifierHead",
    "ActivationCache",
    "OptimizerState",
    "init_backbone",
    "init_adapters",
    "init_head",
    "init_model",
    "forward",
    "loss_and_backward",
    "trainable_params",
    "init_optimizer",
    "adamw_step",
    "lr_at",
    "save_checkpoint",
    "load_checkpoint",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass
class Backbone:
    """Stack of dense layers (tanh by default); weights are immutable after init."""

    weights: list[np.ndarray]  # layer i: (in_i, h)
    biases: list[np.ndarray]  # layer i: (h,)
    input_dim: int
    width: int
    activations: list[str] = field(default_factory=list)  # "tanh" | "linear"

    def __post_init__(self):
        if not self.activations:
            self.activations = ["tanh"] * len(self.weights)
        if len(self.activations) != len(self.weights):
            raise ShapeError("one activation marker per backbone layer required")
        for a in self.activations:
            if a not in ("tanh", "linear"):
                raise ShapeError(f"unknown backbone activation {a!r}")

    @property
    def depth(self) -> int:
        return len(self.weights)

    def thaw(self) -> "Backbone":
        """Writable deep copy, for the full fine-tuning baseline."""
        return Backbone(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            input_dim=self.input_dim,
            width=self.width,
            activations=list(self.activations),
        )


@dataclass
class AdapterLayer:
    """Residual bottleneck: x + relu(x @ w_down + b_down) @ w_up + b_up."""

    w_down: np.ndarray  # (h, b)
    b_down: np.ndarray  # (b,)
    w_up: np.ndarray  # (b, h)
    b_up: np.ndarray  # (h,)

    @property
    def hidden(self) -> int:
        return self.w_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]

    def copy(self) -> "AdapterLayer":
        return AdapterLayer(
            self.w_down.copy(), self.b_down.copy(), self.w_up.copy(), self.b_up.copy()
        )


@dataclass
class AdapterStack:
    """One adapter per backbone insertion point; the trainable, shared unit."""

    layers: list[AdapterLayer]

    def copy(self) -> "AdapterStack":
        return AdapterStack([l.copy() for l in self.layers])

    def flatten(self) -> np.ndarray:
        """All parameters concatenated in a fixed order, each exactly once."""
        parts = []
        for l in self.layers:
            parts.extend([l.w_down.ravel(), l.b_down, l.w_up.ravel(), l.b_up])
        return np.concatenate(parts)

    def param_count(self) -> int:
        return sum(
            l.w_down.size + l.b_down.size + l.w_up.size + l.b_up.size
            for l in self.layers
        )

    def same_shape(self, other: "AdapterStack") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.w_down.shape == b.w_down.shape and a.w_up.shape == b.w_up.shape
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class ClassifierHead:
    w: np.ndarray  # (h, num_classes)
    b: np.ndarray  # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.w.copy(), self.b.copy())


@dataclass
class LayerCache:
    backbone_in: np.ndarray  # input to backbone layer i
    adapter_in: np.ndarray  # backbone layer output = adapter input
    bottleneck_pre: np.ndarray  # pre-relu bottleneck activations
    layer_out: np.ndarray  # post-adapter residual output
    backbone_w: np.ndarray  # reference to the layer's backbone weight
    activation: str = "tanh"


@dataclass
class ActivationCache:
    x: np.ndarray
    layers: list[LayerCache] = field(default_factory=list)


def init_backbone(
    rng: Rng, input_dim: int, width: int, depth: int, activation: str = "tanh"
) -> Backbone:
    if depth < 1 or width < 1 or input_dim < 1:
        raise ShapeError("backbone dims must be >= 1")
    weights, biases = [], []
    d_in = input_dim
    for i in range(depth):
        w = rng.child(f"layer{i}").normal((d_in, width), std=1.0 / np.sqrt(d_in))
        weights.append(_freeze(w))
        biases.append(_freeze(np.zeros(width)))
        d_in = width
    return Backbone(
        weights=weights,
        biases=biases,
        input_dim=input_dim,
        width=width,
        activations=[activation] * depth,
    )


def init_adapters(
    rng: Rng, width: int, bottleneck: int, depth: int, std: float = 0.01
) -> AdapterStack:
    if not (width >= bottleneck >= 1):
        raise ShapeError("need width >= bottleneck >= 1")
    layers = []
    for i in range(depth):
        r = rng.child(f"adapter{i}")
        if std == 0.0:
            w_down = np.zeros((width, bottleneck))
            w_up = np.zeros((bottleneck, width))
        else:
            w_down = r.child("down").normal((width, bottleneck), std=std)
            w_up = r.child("up").normal((bottleneck, width), std=std)
        layers.append(
            AdapterLayer(
                w_down=w_down,
                b_down=np.zeros(bottleneck),
                w_up=w_up,
                b_up=np.zeros(width),
            )
        )
    return AdapterStack(layers)


def init_head(rng: Rng, width: int, num_classes: int) -> ClassifierHead:
    if num_classes < 1:
        raise ShapeError("head needs at least one class")
    w = rng.child("head_w").normal((width, num_classes), std=1.0 / np.sqrt(width))
    return ClassifierHead(w=w, b=np.zeros(num_classes))


def init_model(
    rng: Rng,
    width: int,
    bottleneck: int,
    depth: int,
    num_classes: int,
    input_dim: int | None = None,
    adapter_std: float = 0.01,
) -> tuple[Backbone, AdapterStack, ClassifierHead]:
    """Build backbone + adapters + head from labeled substreams of ``rng``.

    Clients sharing the same backbone substream get bitwise-identical frozen
    backbones; adapter and head substreams may differ per client.
    """
    input_dim = width if input_dim is None else input_dim
    backbone = init_backbone(rng.child("backbone"), input_dim, width, depth)
    adapters = init_adapters(rng.child("adapters"), width, bottleneck, depth, adapter_std)
    head = init_head(rng.child("head"), width, num_classes)
    return backbone, adapters, head


def forward(
    backbone: Backbone,
    adapters: AdapterStack,
    head: ClassifierHead,
    batch: np.ndarray,
) -> tuple[np.ndarray, ActivationCache]:
    """Run the network, caching per-layer activations for backward and for
    activation-based neuron supports."""
    x = as_matrix(batch, cols=backbone.input_dim)
    if len(adapters.layers) != backbone.depth:
        raise ShapeError("adapter count must match backbone depth")
    cache = ActivationCache(x=x)
    z = x
    for bw, bb, act, ad in zip(
        backbone.weights, backbone.biases, backbone.activations, adapters.layers
    ):
        backbone_in = z
        s = z @ bw + bb
        t = np.tanh(s) if act == "tanh" else s
        u = t @ ad.w_down + ad.b_down
        z = t + relu(u) @ ad.w_up + ad.b_up
        cache.layers.append(
            LayerCache(
                backbone_in=backbone_in,
                adapter_in=t,
                bottleneck_pre=u,
                layer_out=z,
                backbone_w=bw,
                activation=act,
            )
        )
    logits = z @ head.w + head.b
    return logits, cache


def _single_label_loss_grad(logits: np.ndarray, labels: np.ndarray, num_classes: int):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError("single-label targets must be a 1-D index vector")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"label index out of range [0, {num_classes}) (got {labels.max()})"
        )
    n = logits.shape[0]
    probs = softmax(logits)
    nll = -np.log(probs[np.arange(n), labels])
    loss = float(nll.mean())
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _multilabel_loss_grad(logits: np.ndarray, targets: np.ndarray):
    targets = as_matrix(targets)
    if targets.shape != logits.shape:
        raise DataError("multilabel targets must match logits shape")
    n, c = logits.shape
    # Stable BCE-with-logits, averaged over samples and classes.
    per = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    loss = float(per.mean())
    grad = (sigmoid(logits) - targets) / (n * c)
    return loss, grad


def loss_and_backward(
    logits: np.ndarray,
    labels: np.ndarray,
    cache: ActivationCache,
    adapters: AdapterStack,
    head: ClassifierHead,
    backbone: Backbone | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch plus gradients for every trainable parameter.

    1-D integer targets select softmax cross-entropy; a 2-D multi-hot matrix
    selects per-class sigmoid binary cross-entropy. Passing ``backbone`` also
    emits backbone gradients (full fine-tuning baseline); otherwise the
    backbone stays out of the gradient dict entirely.
    """
    labels_arr = np.asarray(labels)
    if labels_arr.ndim == 1:
        loss, dlogits = _single_label_loss_grad(logits, labels_arr, head.num_classes)
    else:
        loss, dlogits = _multilabel_loss_grad(logits, labels_arr)

    grads: dict[str, np.ndarray] = {}
    z_out = cache.layers[-1].layer_out
    grads["head.w"] = z_out.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dz = dlogits @ head.w.T

    for i in range(len(adapters.layers) - 1, -1, -1):
        ad = adapters.layers[i]
        lc = cache.layers[i]
        r = relu(lc.bottleneck_pre)
        grads[f"adapters.{i}.w_up"] = r.T @ dz
        grads[f"adapters.{i}.b_up"] = dz.sum(axis=0)
        dr = dz @ ad.w_up.T
        du = dr * (lc.bottleneck_pre > 0)
        grads[f"adapters.{i}.w_down"] = lc.adapter_in.T @ du
        grads[f"adapters.{i}.b_down"] = du.sum(axis=0)
        dt = dz + du @ ad.w_down.T  # residual branch + bottleneck branch
        if lc.activation == "tanh":
            ds = dt * (1.0 - lc.adapter_in**2)
        else:
            ds = dt
        if backbone is not None:
            grads[f"backbone.{i}.w"] = lc.backbone_in.T @ ds
            grads[f"backbone.{i}.b"] = ds.sum(axis=0)
        if i > 0 or backbone is not None:
            dz = ds @ lc.backbone_w.T
    return loss, grads


def trainable_params(
    adapters: AdapterStack,
    head: ClassifierHead,
    backbone: Backbone | None = None,
) -> dict[str, np.ndarray]:
    """Name -> array views of everything the optimizer may update in place."""
    params: dict[str, np.ndarray] = {}
    for i, l in enumerate(adapters.layers):
        params[f"adapters.{i}.w_down"] = l.w_down
        params[f"adapters.{i}.b_down"] = l.b_down
        params[f"adapters.{i}.w_up"] = l.w_up
        params[f"adapters.{i}.b_up"] = l.b_up
    params["head.w"] = head.w
    params["head.b"] = head.b
    if backbone is not None:
        for i in range(backbone.depth):
            params[f"backbone.{i}.w"] = backbone.weights[i]
            params[f"backbone.{i}.b"] = backbone.biases[i]
    return params


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_optimizer(params: dict[str, np.ndarray], weight_decay: float = 0.01) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        weight_decay=weight_decay,
    )


def adamw_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= lr * (update + state.weight_decay * p)
    return state


def lr_at(global_step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero."""
    if not (0 <= global_step <= total_steps):
        raise ValueError("global_step out of range")
    if not (0.0 <= warmup_frac < 1.0):
        raise ValueError("warmup_frac must be in [0, 1)")
    warmup_steps = warmup_frac * total_steps
    if warmup_steps > 0 and global_step < warmup_steps:
        return base_lr * global_step / warmup_steps
    if total_steps == warmup_steps:
        return 0.0
    return base_lr * (total_steps - global_step) / (total_steps - warmup_steps)


_MAGIC = b"FPCK"
_VERSION = 1


def _param_list(adapters: AdapterStack, head: ClassifierHead) -> list[np.ndarray]:
    arrays = []
    for l in adapters.layers:
        arrays.extend([l.w_down, l.b_down, l.w_up, l.b_up])
    arrays.extend([head.w, head.b])
    return arrays


def save_checkpoint(
    path, adapters: AdapterStack, head: ClassifierHead, seed: int, step: int
) -> None:
    """Flat binary checkpoint: manifest header + row-major float64 payload."""
    manifest = {
        "seed": int(seed),
        "step": int(step),
        "adapters": [
            {
                "w_down": list(l.w_down.shape),
                "b_down": list(l.b_down.shape),
                "w_up": list(l.w_up.shape),
                "b_up": list(l.b_up.shape),
            }
            for l in adapters.layers
        ],
        "head": {"w": list(head.w.shape), "b": list(head.b.shape)},
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        for a in _param_list(adapters, head):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[AdapterStack, ClassifierHead, int, int]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise DataError(f"not a checkpoint file (magic {magic!r})")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        manifest = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()

    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=offset
        ).astype(np.float64)
        offset += count * 8
        return arr.reshape(shape)

    layers = []
    for spec in manifest["adapters"]:
        layers.append(
            AdapterLayer(
                w_down=take(spec["w_down"]),
                b_down=take(spec["b_down"]),
                w_up=take(spec["w_up"]),
                b_up=take(spec["b_up"]),
            )
        )
    head = ClassifierHead(w=take(manifest["head"]["w"]), b=take(manifest["head"]["b"]))
    if offset != len(payload):
        raise DataError("checkpoint payload size does not match manifest")
    return AdapterStack(layers), head, manifest["seed"], manifest["step"]
