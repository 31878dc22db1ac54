"""TC-ResNet and 2D-ResNet construction, forward/backward passes, folding and checkpoints.

A model is described by a :class:`ModelSpec`; :func:`layer_table` expands it
into an ordered list of layers with their output shapes, and
:func:`build_model` materializes the parameters for that table. Shapes are
per example as ``(H, W, C)``: the temporal family reads MFCCs as
``(t, 1, f)``, the 2D families as ``(t, f, 1)``.
"""

from __future__ import annotations

import io
import json
import math
import os
import re
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn_core as nn
from .errors import CheckpointError, ShapeError

FAMILIES = ("tc_resnet", "2d_resnet", "2d_resnet_pool")
BASE_CHANNELS = (16, 24, 32, 48)
DROPOUT_P = 0.5
# Scales the classifier's He-normal draw so untrained logits stay near zero
# and the initial loss sits at ln(n_classes).
FC_INIT_GAIN = 0.1

CHECKPOINT_MAGIC = b"TCRN"
CHECKPOINT_VERSION = 1

MODEL_NAMES = (
    "tc-resnet8",
    "tc-resnet8-1.5",
    "tc-resnet14",
    "tc-resnet14-1.5",
    "2d-resnet8",
    "2d-resnet8-pool",
)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class ModelSpec:
    family: str = "tc_resnet"
    depth: int = 8
    width_multiplier: float = 1.0
    n_classes: int = 12
    t: int = 98
    f: int = 40

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.depth not in (8, 14):
            raise ValueError(f"depth must be 8 or 14, got {self.depth}")
        if not self.width_multiplier > 0:
            raise ValueError("width_multiplier must be positive")
        if self.n_classes < 2 or self.t < 1 or self.f < 1:
            raise ValueError("n_classes >= 2 and positive input dims required")
        if min(self.channels) < 1:
            raise ValueError(f"width multiplier {self.width_multiplier} leaves a layer without channels")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(round_half_up(self.width_multiplier * c) for c in BASE_CHANNELS)

    @property
    def temporal(self) -> bool:
        return self.family == "tc_resnet"

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.t, 1, self.f) if self.temporal else (self.t, self.f, 1)

    @property
    def blocks(self) -> list[tuple[int, int, int]]:
        """``(stride, c_in, c_out)`` for every residual block."""
        c0, c1, c2, c3 = self.channels
        if self.depth == 8:
            plan = [(2, c1), (2, c2), (2, c3)]
        else:
            plan = [(2, c1), (1, c1), (2, c2), (1, c2), (2, c3), (1, c3)]
        out, cin = [], c0
        for stride, cout in plan:
            out.append((stride, cin, cout))
            cin = cout
        return out

    @property
    def name(self) -> str:
        prefix = "tc-resnet" if self.temporal else "2d-resnet"
        name = f"{prefix}{self.depth}"
        if self.width_multiplier != 1.0:
            name += f"-{self.width_multiplier:g}"
        if self.family == "2d_resnet_pool":
            name += "-pool"
        return name

    @classmethod
    def from_name(cls, name: str) -> "ModelSpec":
        """Parse names such as ``tc-resnet8``, ``tc-resnet14-1.5`` or ``2d-resnet8-pool``."""
        m = re.fullmatch(r"(tc|2d)-resnet(\d+)(?:-([0-9]*\.?[0-9]+))?(-pool)?", name.strip().lower())
        if not m or (m.group(4) and m.group(1) != "2d"):
            raise ValueError(f"unrecognized model name {name!r}")
        family = "tc_resnet" if m.group(1) == "tc" else ("2d_resnet_pool" if m.group(4) else "2d_resnet")
        k = float(m.group(3)) if m.group(3) else 1.0
        return cls(family=family, depth=int(m.group(2)), width_multiplier=k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: d[k] for k in ("family", "depth", "width_multiplier", "n_classes", "t", "f")})


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv | bn | relu | avgpool | gap | dropout | fc | add
    out_shape: tuple[int, ...]
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    c_in: int = 0
    c_out: int = 0


def layer_table(spec: ModelSpec) -> list[Layer]:
    """Ordered layers of the network, in the order parameters are stored."""
    temporal = spec.temporal
    stem_k, block_k = ((3, 1), (9, 1)) if temporal else ((3, 3), (3, 3))

    def strided(shape, s):
        h, w, _ = shape
        return (math.ceil(h / s[0]), math.ceil(w / s[1]))

    layers: list[Layer] = []
    shape = spec.input_shape

    def conv(name, shape, k, s, cout):
        h, w = strided(shape, s)
        layers.append(Layer(name, "conv", (h, w, cout), k, s, shape[2], cout))
        layers.append(Layer(name.rsplit("/", 1)[0] + "/" + _bn_name(name), "bn", (h, w, cout), c_in=cout, c_out=cout))
        return (h, w, cout)

    c0 = spec.channels[0]
    shape = conv("stem/conv", shape, stem_k, (1, 1), c0)
    layers.append(Layer("stem/relu", "relu", shape))
    if spec.family == "2d_resnet_pool":
        shape = (math.ceil(shape[0] / 4), math.ceil(shape[1] / 4), shape[2])
        layers.append(Layer("stem/pool", "avgpool", shape, (4, 4), (4, 4)))

    for i, (s, cin, cout) in enumerate(spec.blocks, 1):
        st = (s, 1) if temporal else (s, s)
        b = f"block{i}"
        block_in = shape
        shape = conv(f"{b}/conv1", block_in, block_k, st, cout)
        layers.append(Layer(f"{b}/relu1", "relu", shape))
        shape = conv(f"{b}/conv2", shape, block_k, (1, 1), cout)
        if s != 1 or cin != cout:
            sc = conv(f"{b}/shortcut/conv", block_in, (1, 1), st, cout)
            layers.append(Layer(f"{b}/shortcut/relu", "relu", sc))
        layers.append(Layer(f"{b}/add", "add", shape))
        layers.append(Layer(f"{b}/relu", "relu", shape))

    c_last = shape[2]
    layers.append(Layer("head/pool", "gap", (1, 1, c_last)))
    layers.append(Layer("head/dropout", "dropout", (1, 1, c_last)))
    layers.append(Layer("fc", "fc", (spec.n_classes,), c_in=c_last, c_out=spec.n_classes))
    return layers


def _bn_name(conv_name: str) -> str:
    # stem/conv -> stem/bn, block1/conv1 -> block1/bn1, block1/shortcut/conv -> block1/shortcut/bn
    return conv_name.rsplit("/", 1)[1].replace("conv", "bn")


BN_FIELDS = ("gamma", "beta", "moving_mean", "moving_var")


def param_shapes(spec: ModelSpec, folded: bool = False) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every stored tensor, in storage order."""
    out: dict[str, tuple[int, ...]] = {}
    for layer in layer_table(spec):
        if layer.kind == "conv":
            out[f"{layer.name}/weight"] = (*layer.kernel, layer.c_in, layer.c_out)
            if folded:
                out[f"{layer.name}/bias"] = (layer.c_out,)
        elif layer.kind == "bn" and not folded:
            for fld in BN_FIELDS:
                out[f"{layer.name}/{fld}"] = (layer.c_out,)
        elif layer.kind == "fc":
            out["fc/weight"] = (layer.c_in, layer.c_out)
    return out


@dataclass
class ModelInstance:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    mode: str = "train"
    folded: bool = False
    dropout_p: float = DROPOUT_P

    def bn(self, name: str) -> nn.BatchNormParams:
        p = self.params
        return nn.BatchNormParams(*(p[f"{name}/{fld}"] for fld in BN_FIELDS))

    @property
    def n_scalars(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if not k.endswith(("/moving_mean", "/moving_var"))]

    def copy(self) -> "ModelInstance":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def eval(self) -> "ModelInstance":
        self.mode = "infer"
        return self

    def train(self) -> "ModelInstance":
        if self.folded:
            raise ValueError("folded models are inference-only")
        self.mode = "train"
        return self


def build_model(spec: ModelSpec, rng_seed: int = 0) -> ModelInstance:
    """Materialize parameters: He-normal convs/FC, identity batch norm."""
    rng = np.random.default_rng(rng_seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("/weight"):
            fan_in = int(np.prod(shape[:-1]))
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            if name == "fc/weight":
                w *= FC_INIT_GAIN
            params[name] = w.astype(np.float32)
        elif name.endswith(("/gamma", "/moving_var")):
            params[name] = np.ones(shape, np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    return ModelInstance(spec, params, mode="train")



# ---------------------------------------------------------------------------
# Forward / backward


def prepare_input(spec: ModelSpec, features) -> np.ndarray:
    """Reshape MFCCs ``(t, f)`` or ``(N, t, f)`` into the family's NHWC layout."""
    x = np.asarray(features, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (spec.t, spec.f):
        raise ShapeError(f"expected MFCC input ({spec.t}, {spec.f}), got {np.shape(features)}")
    return x[:, :, None, :] if spec.temporal else x[:, :, :, None]


def forward(instance: ModelInstance, features, rng: np.random.Generator | None = None, cache: dict | None = None):
    """Logits for one MFCC matrix ``(t, f)`` -> ``(n_classes,)`` or a batch -> ``(N, n_classes)``.

    In train mode batch norm uses batch statistics (updating the moving
    averages) and dropout draws from ``rng``. Passing ``cache`` records the
    intermediate activations :func:`backward` needs.
    """
    single = np.ndim(features) == 2
    x = prepare_input(instance.spec, features)
    logits = _run(instance, x, rng, cache)
    return logits[0] if single else logits


def _run(inst: ModelInstance, x, rng, cache):
    spec, p = inst.spec, inst.params
    train = inst.mode == "train"
    if train and inst.folded:
        raise ValueError("folded models are inference-only")
    tape = cache if cache is not None else {}

    def conv(name, h, stride):
        tape[name] = h
        w, b = p[f"{name}/weight"], p.get(f"{name}/bias")
        if spec.temporal:
            return nn.conv_temporal_forward(h, w, stride[0], bias=b)
        return nn.conv2d_forward(h, w, stride, bias=b)

    def bn(name, h):
        if inst.folded:
            return h
        tape[name] = h
        return nn.batchnorm_forward(h, inst.bn(name), "train" if train else "infer")

    def relu(name, h):
        if cache is None and not train:
            # inference owns every intermediate buffer
            return np.maximum(h, 0, out=h)
        tape[name] = h
        return nn.relu(h)

    h = relu("stem/relu", bn("stem/bn", conv("stem/conv", x, (1, 1))))
    if spec.family == "2d_resnet_pool":
        tape["stem/pool"] = h.shape
        h = nn.avg_pool2d(h, 4, 4)
    for i, (s, cin, cout) in enumerate(spec.blocks, 1):
        b = f"block{i}"
        st = (s, 1) if spec.temporal else (s, s)
        main = relu(f"{b}/relu1", bn(f"{b}/bn1", conv(f"{b}/conv1", h, st)))
        main = bn(f"{b}/bn2", conv(f"{b}/conv2", main, (1, 1)))
        if s != 1 or cin != cout:
            short = relu(f"{b}/shortcut/relu", bn(f"{b}/shortcut/bn", conv(f"{b}/shortcut/conv", h, st)))
        else:
            short = h
        h = relu(f"{b}/relu", main + short)
    tape["head/pool"] = h.shape
    pooled = nn.global_avg_pool(h).reshape(h.shape[0], -1)
    if train and inst.dropout_p > 0:
        if rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        mask = nn.dropout_mask(pooled.shape, inst.dropout_p, rng, pooled.dtype)
        tape["head/dropout"] = mask
        pooled = pooled * mask
    tape["fc"] = pooled
    return nn.fully_connected(pooled, p["fc/weight"])


def backward(instance: ModelInstance, cache: dict, grad_logits) -> dict[str, np.ndarray]:
    """Gradients of every trainable parameter given dLoss/dlogits for the cached batch."""
    spec, p = instance.spec, instance.params
    if instance.folded:
        raise ValueError("folded models are inference-only")
    grads: dict[str, np.ndarray] = {}
    g = np.atleast_2d(grad_logits).astype(cache["fc"].dtype)

    def conv_b(name, g, stride):
        gx, gw = nn.conv_backward(cache[name], p[f"{name}/weight"], g, stride)
        grads[f"{name}/weight"] = gw
        return gx

    def bn_b(name, g):
        gx, gg, gb = nn.batchnorm_backward(cache[name], instance.bn(name), g)
        grads[f"{name}/gamma"] = gg
        grads[f"{name}/beta"] = gb
        return gx

    def relu_b(name, g):
        return nn.relu_backward(cache[name], g)

    g, grads["fc/weight"] = nn.fully_connected_backward(cache["fc"], p["fc/weight"], g)
    if "head/dropout" in cache:
        g = g * cache["head/dropout"]
    shape = cache["head/pool"]
    g = nn.global_avg_pool_backward(shape, g.reshape(shape[0], 1, 1, shape[3]))
    for i in range(len(spec.blocks), 0, -1):
        s, cin, cout = spec.blocks[i - 1]
        b = f"block{i}"
        st = (s, 1) if spec.temporal else (s, s)
        g = relu_b(f"{b}/relu", g)
        gm = bn_b(f"{b}/bn2", g)
        gm = conv_b(f"{b}/conv2", gm, (1, 1))
        gm = relu_b(f"{b}/relu1", gm)
        gm = bn_b(f"{b}/bn1", gm)
        gm = conv_b(f"{b}/conv1", gm, st)
        if s != 1 or cin != cout:
            gs = relu_b(f"{b}/shortcut/relu", g)
            gs = bn_b(f"{b}/shortcut/bn", gs)
            gs = conv_b(f"{b}/shortcut/conv", gs, st)
        else:
            gs = g
        g = gm + gs
    if spec.family == "2d_resnet_pool":
        g = nn.avg_pool2d_backward(cache["stem/pool"], g, 4, 4)
    g = relu_b("stem/relu", g)
    g = bn_b("stem/bn", g)
    conv_b("stem/conv", g, (1, 1))
    return {k: grads[k] for k in instance.trainable_names()}


# ---------------------------------------------------------------------------
# Batch-norm folding


def fold_batchnorm(instance: ModelInstance) -> ModelInstance:
    """Absorb every inference-mode batch norm into the convolution feeding it."""
    if instance.mode != "infer":
        raise ValueError("fold_batchnorm requires an infer-mode instance")
    if instance.folded:
        return instance.copy()
    p = instance.params
    folded: dict[str, np.ndarray] = {}
    for name in param_shapes(instance.spec, folded=True):
        if name.endswith("/bias"):
            continue
        if name == "fc/weight":
            folded[name] = p[name].copy()
            continue
        conv = name[: -len("/weight")]
        bn = conv.rsplit("/", 1)[0] + "/" + _bn_name(conv)
        gamma, beta, mean, var = (p[f"{bn}/{f}"].astype(np.float64) for f in BN_FIELDS)
        scale = gamma / np.sqrt(var + nn.BN_EPSILON)
        folded[name] = (p[name].astype(np.float64) * scale).astype(np.float32)
        folded[f"{conv}/bias"] = (beta - mean * scale).astype(np.float32)
    order = param_shapes(instance.spec, folded=True)
    return ModelInstance(instance.spec, {k: folded[k] for k in order}, mode="infer", folded=True)


# ---------------------------------------------------------------------------
# Checkpoints


def _spec_json(instance: ModelInstance) -> bytes:
    meta = dict(instance.spec.to_dict(), folded=instance.folded)
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(instance: ModelInstance, sink) -> None:
    """Write ``TCRN`` | u32 version | spec JSON | (name, rank, dims, float32 data)*."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            save_checkpoint(instance, fh)
        return
    spec_blob = _spec_json(instance)
    sink.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
    sink.write(struct.pack("<I", len(spec_blob)) + spec_blob)
    for name, value in instance.params.items():
        raw = name.encode("utf-8")
        sink.write(struct.pack("<I", len(raw)) + raw)
        sink.write(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        sink.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def checkpoint_bytes(instance: ModelInstance) -> bytes:
    buf = io.BytesIO()
    save_checkpoint(instance, buf)
    return buf.getvalue()


def load_checkpoint(source) -> ModelInstance:
    """Read a checkpoint from a path, bytes, or binary stream; the result is in infer mode."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return load_checkpoint(fh)
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a TCRN checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(n)).decode("utf-8"))
        spec = ModelSpec.from_dict(meta)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad spec block: {exc}") from exc
    folded = bool(meta.get("folded", False))
    expected = param_shapes(spec, folded=folded)
    params: dict[str, np.ndarray] = {}
    while pos < len(view):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    if list(params) != list(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"parameter table disagrees with spec (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name}: shape {params[name].shape}, spec expects {shape}")
    return ModelInstance(spec, params, mode="infer", folded=folded)
