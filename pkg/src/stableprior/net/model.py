"""Model container: spec-driven graph build, gradients, checkpoints.

A model is an ordered list of layer specs.  Shape resolution walks the
specs once at build time and fails before any arithmetic if something
cannot line up; skip connections reference earlier layers by index, so
the graph stays a flat list with gradient accumulation handled during
the backward sweep.

Initialization draws Dense and Conv2D weights from the uniform Xavier
window +-sqrt(6 / (fan_in + fan_out)) (kernels count their receptive
field in both fans), zeroes all biases, and leaves batchnorm at
gamma = 1, beta = 0.  Everything is float64.

Checkpoints are a structured binary: magic, version, a JSON block with
the specs and array manifest, raw little-endian float64 tensors, and a
trailing CRC-32.  Round-trips are bit exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    MaxPool,
    ReLU,
    ResidualAdd,
    ShapeMismatch,
    Softmax,
)

__all__ = [
    "LayerSpec",
    "Model",
    "ParamRef",
    "micro_resnet",
    "mean_log_likelihood",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

_PROB_FLOOR = 1e-300


def mean_log_likelihood(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of ln p(correct class)."""
    picked = np.sum(probs * targets, axis=1)
    return float(np.mean(np.log(np.maximum(picked, _PROB_FLOOR))))


def accuracy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the one-hot target."""
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(targets, axis=1)))

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"SDNC"

KINDS = ("dense", "conv2d", "batchnorm", "relu", "maxpool", "residual_add",
         "flatten", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; unused fields stay at defaults."""

    kind: str
    out_features: int = 0    # dense
    out_channels: int = 0    # conv2d
    kernel: int = 3          # conv2d
    stride: int = 1          # conv2d
    padding: int = 0         # conv2d
    pool: int = 2            # maxpool
    momentum: float = 0.1    # batchnorm
    eps: float = 1e-5        # batchnorm
    skip_from: int = -1      # residual_add: index of the source layer

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}, expected one of {KINDS}")


@dataclass(frozen=True)
class ParamRef:
    """Stable handle to one parameter tensor inside a model."""

    key: str          # e.g. "3.W"
    layer_index: int
    layer_kind: str
    name: str         # "W", "b", "gamma", "beta"
    prior_mask: bool  # True for tensors the weight prior acts on


def _xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class Model:
    """Ordered layers with resolved shapes and seeded initialization."""

    def __init__(self, specs: list[LayerSpec], input_shape: tuple[int, ...], seed: int = 0):
        if any(d < 1 for d in input_shape):
            raise ShapeMismatch(f"input shape extents must be >= 1, got {input_shape}")
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.layers = []
        self.out_shapes = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            layer, shape = self._build_layer(i, spec, shape)
            self.layers.append(layer)
            self.out_shapes.append(shape)
        self.init_parameters(seed)

    def _build_layer(self, i, spec, shape):
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ShapeMismatch(f"layer {i}: dense needs flat input, got {shape}")
            if spec.out_features < 1:
                raise ShapeMismatch(f"layer {i}: dense out_features must be >= 1")
            return Dense(shape[0], spec.out_features), (spec.out_features,)
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeMismatch(f"layer {i}: conv2d needs (c, h, w) input, got {shape}")
            if spec.out_channels < 1:
                raise ShapeMismatch(f"layer {i}: conv2d out_channels must be >= 1")
            c, h, w = shape
            oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeMismatch(f"layer {i}: conv2d output collapsed to {oh}x{ow}")
            layer = Conv2D(c, spec.out_channels, spec.kernel, spec.stride, spec.padding)
            return layer, (spec.out_channels, oh, ow)
        if spec.kind == "batchnorm":
            if len(shape) not in (1, 3):
                raise ShapeMismatch(f"layer {i}: batchnorm needs 1-D or 3-D input, got {shape}")
            return BatchNorm(shape[0], spec.momentum, spec.eps), shape
        if spec.kind == "relu":
            return ReLU(), shape
        if spec.kind == "maxpool":
            if len(shape) != 3:
                raise ShapeMismatch(f"layer {i}: maxpool needs (c, h, w) input, got {shape}")
            c, h, w = shape
            oh = (h - spec.pool) // spec.pool + 1
            ow = (w - spec.pool) // spec.pool + 1
            if oh < 1 or ow < 1:
                raise ShapeMismatch(f"layer {i}: maxpool output collapsed to {oh}x{ow}")
            return MaxPool(spec.pool), (c, oh, ow)
        if spec.kind == "residual_add":
            j = spec.skip_from
            if not (0 <= j < i):
                raise ShapeMismatch(f"layer {i}: skip_from must name an earlier layer, got {j}")
            if self.out_shapes[j] != shape:
                raise ShapeMismatch(
                    f"layer {i}: residual add shapes differ: {shape} vs {self.out_shapes[j]}"
                )
            return ResidualAdd(j), shape
        if spec.kind == "flatten":
            return Flatten(), (int(np.prod(shape)),)
        if spec.kind == "softmax":
            if len(shape) != 1:
                raise ShapeMismatch(f"layer {i}: softmax needs flat input, got {shape}")
            return Softmax(), shape
        raise ShapeMismatch(f"layer {i}: unhandled kind {spec.kind!r}")

    def init_parameters(self, seed: int):
        """Deterministic re-initialization of every parameter tensor."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, Dense):
                b = _xavier_bound(layer.in_features, layer.out_features)
                layer.params["W"][...] = rng.uniform(-b, b, layer.params["W"].shape)
                layer.params["b"][...] = 0.0
            elif isinstance(layer, Conv2D):
                rf = layer.kernel * layer.kernel
                b = _xavier_bound(layer.in_channels * rf, layer.out_channels * rf)
                layer.params["W"][...] = rng.uniform(-b, b, layer.params["W"].shape)
                layer.params["b"][...] = 0.0
            elif isinstance(layer, BatchNorm):
                layer.params["gamma"][...] = 1.0
                layer.params["beta"][...] = 0.0
                layer.running_mean[...] = 0.0
                layer.running_var[...] = 1.0

    def forward(self, x, training: bool = False, dropout_masks: dict[int, np.ndarray] | None = None):
        """Run the graph, returning the list of per-layer activations."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeMismatch(
                f"expected batch of shape (n, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        acts = []
        cur = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                cur = layer.forward(cur, skip=acts[layer.skip_from], training=training)
            else:
                cur = layer.forward(cur, training=training)
            if dropout_masks and i in dropout_masks:
                cur = cur * dropout_masks[i]
            acts.append(cur)
        return acts

    def backward(self, acts, targets, dropout_masks: dict[int, np.ndarray] | None = None):
        """Gradient of the mean log-likelihood for every parameter.

        ``targets`` is a one-hot array matching the softmax output.  The
        sweep starts from the fused softmax/log-likelihood identity
        (target - prob) / n at the softmax input, so the final layer
        must be softmax.  Parameter gradients land in layer.grads.
        """
        if not isinstance(self.layers[-1], Softmax):
            raise ShapeMismatch("backward assumes a softmax output layer")
        probs = acts[-1]
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != probs.shape:
            raise ShapeMismatch(f"targets shape {targets.shape} != output {probs.shape}")
        n = probs.shape[0]
        # Fused softmax/log-likelihood seed at the logits; the softmax
        # layer itself is skipped.
        grad = (targets - probs) / n
        pending: dict[int, np.ndarray] = {}
        for j in range(len(self.layers) - 2, -1, -1):
            # grad holds d(objective)/d acts[j]; skip contributions from
            # residual adds downstream join here, before the dropout mask.
            if j in pending:
                grad = grad + pending.pop(j)
            if dropout_masks and j in dropout_masks:
                grad = grad * dropout_masks[j]
            layer = self.layers[j]
            if isinstance(layer, ResidualAdd):
                share = layer.backward(grad)
                pending[layer.skip_from] = pending.get(layer.skip_from, 0.0) + share
                grad = share
            else:
                grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[ParamRef]:
        refs = []
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                mask = layer.kind in ("dense", "conv2d") and name == "W"
                refs.append(ParamRef(f"{i}.{name}", i, layer.kind, name, mask))
        return refs

    def get_param(self, ref: ParamRef) -> np.ndarray:
        return self.layers[ref.layer_index].params[ref.name]

    def get_grad(self, ref: ParamRef) -> np.ndarray:
        return self.layers[ref.layer_index].grads[ref.name]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every tensor a checkpoint must carry, in deterministic order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((f"{i}.{name}", layer.params[name]))
            if isinstance(layer, BatchNorm):
                out.append((f"{i}.running_mean", layer.running_mean))
                out.append((f"{i}.running_var", layer.running_var))
        return out


def micro_resnet(input_shape=(3, 32, 32), classes: int = 10, hidden: int = 64) -> list[LayerSpec]:
    """Reference conv net: input module (to 16 channels), conv module
    (to 32, pooled), one residual module at 32 channels, dense head."""
    return [
        LayerSpec("conv2d", out_channels=16, kernel=3, padding=1),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("conv2d", out_channels=32, kernel=3, padding=1),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("maxpool", pool=2),
        LayerSpec("conv2d", out_channels=32, kernel=3, padding=1),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("conv2d", out_channels=32, kernel=3, padding=1),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("residual_add", skip_from=6),
        LayerSpec("maxpool", pool=2),
        LayerSpec("flatten"),
        LayerSpec("dense", out_features=hidden),
        LayerSpec("relu"),
        LayerSpec("dense", out_features=classes),
        LayerSpec("softmax"),
    ]


def save_checkpoint(model: Model) -> bytes:
    """Serialize specs, parameters and running statistics; CRC-32 sealed."""
    arrays = model.state_arrays()
    header = {
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "seed": model.seed,
        "specs": [asdict(s) for s in model.specs],
        "arrays": [[key, list(a.shape)] for key, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = _CKPT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes
    blob += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return blob + struct.pack("<I", zlib.crc32(blob))


def load_checkpoint(data: bytes) -> Model:
    """Rebuild a model bit-exactly from ``save_checkpoint`` output."""
    from ..table import ChecksumMismatch, VersionMismatch  # shared error taxonomy

    if len(data) < 12:
        raise ValueError("buffer too short for a checkpoint")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumMismatch("checkpoint bytes fail CRC-32 verification")
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, supported: {CHECKPOINT_VERSION}")
    header = json.loads(data[12:12 + hlen].decode())
    specs = [LayerSpec(**d) for d in header["specs"]]
    model = Model(specs, tuple(header["input_shape"]), seed=header["seed"])
    offset = 12 + hlen
    arrays = model.state_arrays()
    manifest = header["arrays"]
    if [k for k, _ in manifest] != [k for k, _ in arrays]:
        raise ValueError("checkpoint manifest does not match the rebuilt graph")
    for (key, shape), (_, arr) in zip(manifest, arrays):
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        arr[...] = vals
        offset += 8 * count
    if offset != len(data) - 4:
        raise ValueError("checkpoint has trailing or missing tensor bytes")
    return model
