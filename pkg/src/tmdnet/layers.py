"""Network building blocks, declarative model specs and checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError, ValidationError

GEM_EPSILON = 5e-5
POOLING_KINDS = ("flatten", "global_avg", "global_max", "gem")


# pooling --------------------------------------------------------------------

def gem_pool(x: Tensor, alpha: Tensor, epsilon: float = GEM_EPSILON) -> Tensor:
    """Generalized-mean pooling over time with one learnable exponent per channel.

    ``x`` is [B, C, T] and non-negative; the result is [B, C]. Evaluated in the
    log domain so large exponents neither overflow nor underflow.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"gem_pool: expected [B, C, T] input, got {x.shape}")
    if alpha.shape != (x.shape[1],):
        raise ShapeError(f"gem_pool: alpha shape {alpha.shape} does not match input {x.shape}")
    if np.any(x.data < 0):
        raise NumericError("gem_pool: negative input")
    a = alpha.data
    if np.any(a == 0):
        raise NumericError("gem_pool: alpha must be non-zero")
    t = x.shape[2]
    xe = x.data + epsilon
    logx = np.log(xe)
    z = a[None, :, None] * logx
    zmax = z.max(axis=2, keepdims=True)
    ez = np.exp(z - zmax)
    s = ez.sum(axis=2, keepdims=True)
    weights = ez / s
    log_mean = (zmax + np.log(s))[..., 0] - np.log(t)
    out = np.exp(log_mean / a)

    def backward(g):
        gx = ga = None
        if x.requires_grad:
            gx = (g * out)[..., None] * weights / xe
        if alpha.requires_grad:
            inner = (weights * logx).sum(axis=2) - log_mean / a
            ga = (g * out * inner / a).sum(axis=0)
        return gx, ga

    return ad.record("gem_pool", out, (x, alpha), backward)


def global_pool(x: Tensor, kind: str, fixed_length: int | None = None) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"global_pool: expected [B, C, T] input, got {x.shape}")
    if kind == "global_avg":
        return ad.reduce_mean(x, axis=2)
    if kind == "global_max":
        return ad.reduce_max(x, axis=2)
    if kind == "flatten":
        if fixed_length is not None and x.shape[2] != fixed_length:
            raise ShapeError(
                f"flatten head built for {fixed_length} time steps, got feature map {x.shape}")
        return ad.reshape(x, (x.shape[0], x.shape[1] * x.shape[2]))
    raise ValidationError(f"unknown pooling kind {kind!r}")


# layer descriptors ----------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: str = "same"
    relu: bool = True


@dataclass(frozen=True)
class ResidualBlock:
    channels: int
    k: int
    depth: int = 2


@dataclass(frozen=True)
class MaxPool:
    window: int


@dataclass(frozen=True)
class PoolingHead:
    kind: str
    epsilon: float = GEM_EPSILON


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    relu: bool = False


Layer = Union[Conv, ResidualBlock, MaxPool, PoolingHead, Dense]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, ResidualBlock, MaxPool, PoolingHead, Dense)}


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    n_classes: int
    input_channels: int
    fixed_length: int | None = None
    name: str = "custom"

    @property
    def head(self) -> PoolingHead:
        return next(layer for layer in self.layers if isinstance(layer, PoolingHead))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_classes": self.n_classes,
            "input_channels": self.input_channels,
            "fixed_length": self.fixed_length,
            "layers": [{"type": type(layer).__name__, **asdict(layer)} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for item in d["layers"]:
            item = dict(item)
            kind = item.pop("type")
            if kind not in _LAYER_TYPES:
                raise ValidationError(f"unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**item))
        return cls(tuple(layers), int(d["n_classes"]), int(d["input_channels"]),
                   d.get("fixed_length"), d.get("name", "custom"))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def trace_shapes(spec: ModelSpec, length: int | None = None) -> list[tuple[str, Layer, tuple, tuple]]:
    """Walk the spec and return (name, layer, in_shape, out_shape) per layer.

    Shapes are per-sample: (C, T) before the head, (F,) after it. Raises
    ShapeError when adjacent layers do not compose.
    """
    if length is None:
        length = spec.fixed_length
    if length is None:
        raise ValidationError("an input length is required to trace a variable-length spec")
    heads = [i for i, layer in enumerate(spec.layers) if isinstance(layer, PoolingHead)]
    if len(heads) != 1:
        raise ShapeError(f"spec must contain exactly one pooling head, found {len(heads)}")
    if any(not isinstance(layer, Dense) for layer in spec.layers[heads[0] + 1:]):
        raise ShapeError("only dense layers may follow the pooling head")
    shape: tuple = (spec.input_channels, length)
    out = []
    for i, layer in enumerate(spec.layers):
        name = layer_name(i, layer)
        before = shape
        if isinstance(layer, Conv):
            if shape[0] != layer.c_in:
                raise ShapeError(f"{name}: expects {layer.c_in} channels, receives {shape[0]}")
            t_out = ad.conv_output_length(shape[1], layer.k, layer.stride, layer.padding)
            if t_out < 1:
                raise ShapeError(f"{name}: input of length {shape[1]} too short for kernel {layer.k}")
            shape = (layer.c_out, t_out)
        elif isinstance(layer, ResidualBlock):
            if shape[0] != layer.channels:
                raise ShapeError(f"{name}: expects {layer.channels} channels, receives {shape[0]}")
        elif isinstance(layer, MaxPool):
            if shape[1] // layer.window < 1:
                raise ShapeError(f"{name}: input of length {shape[1]} shorter than window {layer.window}")
            shape = (shape[0], shape[1] // layer.window)
        elif isinstance(layer, PoolingHead):
            if layer.kind not in POOLING_KINDS:
                raise ValidationError(f"unknown pooling kind {layer.kind!r}")
            shape = (shape[0] * shape[1],) if layer.kind == "flatten" else (shape[0],)
        elif isinstance(layer, Dense):
            if shape != (layer.n_in,):
                raise ShapeError(f"{name}: expects {layer.n_in} features, receives {shape}")
            shape = (layer.n_out,)
        out.append((name, layer, before, shape))
    if shape != (spec.n_classes,):
        raise ShapeError(f"spec produces {shape} outputs for {spec.n_classes} classes")
    return out


def layer_name(i: int, layer: Layer) -> str:
    prefix = {Conv: "conv", ResidualBlock: "block", MaxPool: "pool",
              PoolingHead: "head", Dense: "dense"}[type(layer)]
    return f"{prefix}{i}"


def min_input_length(spec: ModelSpec) -> int:
    if spec.head.kind == "flatten":
        return spec.fixed_length
    for t in range(1, 1 << 16):
        try:
            trace_shapes(spec, t)
            return t
        except ShapeError:
            continue
    raise ShapeError("spec does not accept any input length")


# default architectures ------------------------------------------------------

def geolife_spec(pooling: str = "gem", n_classes: int = 6, fixed_length: int = 1024,
                 channels: int = 22, k: int = 5, n_blocks: int = 2) -> ModelSpec:
    """Speed/acceleration network: stem conv, residual blocks, head, one dense layer."""
    layers: list = [Conv(2, channels, k)]
    layers += [ResidualBlock(channels, k) for _ in range(n_blocks)]
    layers.append(PoolingHead(pooling))
    n_feat = channels * fixed_length if pooling == "flatten" else channels
    layers.append(Dense(n_feat, n_classes))
    return ModelSpec(tuple(layers), n_classes, 2,
                     fixed_length if pooling == "flatten" else None, f"geolife-{pooling}")


def shl_spec(pooling: str = "gem", n_classes: int = 8, fixed_length: int = 6000,
             hidden: int = 500) -> ModelSpec:
    """Accelerometer-norm network: two conv/max-pool stages, head, two dense layers."""
    layers: list = [Conv(1, 16, 8, padding="valid"), MaxPool(4),
                    Conv(16, 32, 8, padding="valid"), MaxPool(4), PoolingHead(pooling)]
    if pooling == "flatten":
        t = fixed_length
        for layer in layers[:4]:
            t = ad.conv_output_length(t, layer.k, 1, layer.padding) if isinstance(layer, Conv) \
                else t // layer.window
        n_feat = 32 * t
    else:
        n_feat = 32
    layers += [Dense(n_feat, hidden, relu=True), Dense(hidden, n_classes)]
    return ModelSpec(tuple(layers), n_classes, 1,
                     fixed_length if pooling == "flatten" else None, f"shl-{pooling}")


def default_spec(name: str, pooling: str = "gem", **kw) -> ModelSpec:
    if name == "geolife":
        return geolife_spec(pooling, **kw)
    if name == "shl":
        return shl_spec(pooling, **kw)
    raise ValidationError(f"unknown default architecture {name!r}")


# model ----------------------------------------------------------------------

@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)
    seed: int = 0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = v.copy()

    def n_scalars(self) -> int:
        return sum(p.size for p in self.params.values())


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> Model:
    """Instantiate parameters: uniform +-1/sqrt(fan_in) weights, N(5, 1) GeM exponents."""
    trace_shapes(spec, spec.fixed_length or min_input_length(spec))
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv_params(prefix, c_in, c_out, k):
        fan_in = c_in * k
        params[f"{prefix}.weight"] = Tensor(_uniform(rng, (c_out, c_in, k), fan_in, dtype), True)
        params[f"{prefix}.bias"] = Tensor(_uniform(rng, (c_out,), fan_in, dtype), True)

    for i, layer in enumerate(spec.layers):
        name = layer_name(i, layer)
        if isinstance(layer, Conv):
            conv_params(name, layer.c_in, layer.c_out, layer.k)
        elif isinstance(layer, ResidualBlock):
            for j in range(layer.depth):
                conv_params(f"{name}.conv{j}", layer.channels, layer.channels, layer.k)
        elif isinstance(layer, PoolingHead) and layer.kind == "gem":
            channels = _head_channels(spec, i)
            params[f"{name}.alpha"] = Tensor(rng.normal(5.0, 1.0, size=channels).astype(dtype), True)
        elif isinstance(layer, Dense):
            params[f"{name}.weight"] = Tensor(_uniform(rng, (layer.n_out, layer.n_in), layer.n_in, dtype), True)
            params[f"{name}.bias"] = Tensor(_uniform(rng, (layer.n_out,), layer.n_in, dtype), True)
    for k, p in params.items():
        p.name = k
    return Model(spec, params, seed)


def _head_channels(spec: ModelSpec, head_index: int) -> int:
    c = spec.input_channels
    for layer in spec.layers[:head_index]:
        if isinstance(layer, Conv):
            c = layer.c_out
        elif isinstance(layer, ResidualBlock):
            c = layer.channels
    return c


def residual_block_forward(x: Tensor, weights: list[tuple[Tensor, Tensor]]) -> Tensor:
    """relu(conv_n(...relu(conv_1(x))...) + x) with stride-1 'same' convolutions."""
    h = x
    for j, (w, b) in enumerate(weights):
        if w.shape[0] != x.shape[1] or w.shape[1] != x.shape[1]:
            raise ShapeError(f"residual block kernels {w.shape} do not preserve channels of {x.shape}")
        h = ad.conv1d(h, w, b, padding="same")
        if j < len(weights) - 1:
            h = ad.relu(h)
    return ad.relu(ad.add(h, x))


def forward(model: Model, batch) -> Tensor:
    """Logits [B, K] for a [B, C, T] batch."""
    spec = model.spec
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    if x.data.ndim != 3 or x.shape[1] != spec.input_channels:
        raise ShapeError(f"model expects [B, {spec.input_channels}, T] input, got {x.shape}")
    if spec.head.kind == "flatten" and x.shape[2] != spec.fixed_length:
        raise ShapeError(f"flatten-head model requires T = {spec.fixed_length}, got T = {x.shape[2]}")
    p = model.params
    for i, layer in enumerate(spec.layers):
        name = layer_name(i, layer)
        if isinstance(layer, Conv):
            x = ad.conv1d(x, p[f"{name}.weight"], p[f"{name}.bias"], layer.stride, layer.padding)
            if layer.relu:
                x = ad.relu(x)
        elif isinstance(layer, ResidualBlock):
            x = residual_block_forward(
                x, [(p[f"{name}.conv{j}.weight"], p[f"{name}.conv{j}.bias"]) for j in range(layer.depth)])
        elif isinstance(layer, MaxPool):
            x = ad.max_pool1d(x, layer.window)
        elif isinstance(layer, PoolingHead):
            if layer.kind == "gem":
                x = gem_pool(x, p[f"{name}.alpha"], layer.epsilon)
            else:
                x = global_pool(x, layer.kind, _flat_steps(spec, x))
        elif isinstance(layer, Dense):
            x = ad.add(ad.matmul(x, _transpose(p[f"{name}.weight"])), p[f"{name}.bias"])
            if layer.relu:
                x = ad.relu(x)
    return x


def _flat_steps(spec: ModelSpec, x: Tensor) -> int | None:
    if spec.head.kind != "flatten":
        return None
    for _, layer, before, _ in trace_shapes(spec):
        if isinstance(layer, PoolingHead):
            return before[1]
    return None


def _transpose(w: Tensor) -> Tensor:
    out = np.ascontiguousarray(w.data.T)
    return ad.record("transpose", out, (w,), lambda g: (g.T,))


# loss -----------------------------------------------------------------------

def weighted_cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Class-weighted cross-entropy, normalized by the sum of sample weights."""
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.dtype)
    bsz, k = logits.shape
    if targets.shape != (bsz,):
        raise ValidationError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if np.any((targets < 0) | (targets >= k)):
        raise ValidationError(f"targets must lie in [0, {k})")
    if weights.shape != (k,) or np.any(weights <= 0):
        raise ValidationError("weights must be a positive vector with one entry per class")
    shifted = ad.sub(logits, ad.stop_gradient(ad.reduce_max(logits, axis=1, keepdims=True)))
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=1, keepdims=True))
    logp = ad.sub(shifted, lse)
    onehot = np.zeros((bsz, k), dtype=logits.dtype)
    onehot[np.arange(bsz), targets] = 1.0
    sample_w = weights[targets]
    coef = onehot * sample_w[:, None] / sample_w.sum()
    return ad.neg(ad.reduce_sum(ad.mul(logp, Tensor(coef))))


# checkpoints ----------------------------------------------------------------

MAGIC = b"TMDCKPT1"


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """Write manifest + parameters in the flat binary layout.

    Layout (little-endian): MAGIC, u32 manifest length, manifest JSON (utf-8),
    u32 array count, then per array: u16 name length, name, u8 dtype length,
    dtype string (numpy ``str``), u8 ndim, ndim x u64 dims, row-major data.
    """
    manifest = {"spec": model.spec.to_dict(), "seed": model.seed, **(extra or {})}
    blob = json.dumps(manifest, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        nb, dt = name.encode(), arr.dtype.str.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", len(dt)), dt,
                  struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    (mlen,) = take("<I")
    manifest = json.loads(raw[pos:pos + mlen])
    pos += mlen
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (dlen,) = take("<B")
        dtype = np.dtype(raw[pos:pos + dlen].decode())
        pos += dlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        params[name] = Tensor(arr.astype(dtype.newbyteorder("="), copy=True), True, name)
    spec = ModelSpec.from_dict(manifest["spec"])
    return Model(spec, params, manifest.get("seed", 0)), manifest
