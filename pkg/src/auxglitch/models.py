"""Model zoo: declarative architecture specs and hand-wired passes.

Seven architectures form a ladder from a fixed-feature logistic regression
to deep VGG-style conv nets:

  fixed_feature    sigmoid(sum_kp omega[k,p] * (bank_k corr x_p)[center] + b)
  learned_filter   one full-length filter per channel, single output scalar
  one_hidden       conv-to-scalar with hidden_maps feature maps, then linear
  one_hidden_relu  same with a ReLU before the linear combination
  vgg6             5 conv layers (128,128,256,256,256), pools after 2 and 5
  vgg13            11 conv layers (+512x6), 4 pools, two linear layers
  vgg13_bn         vgg13 with batchnorm before each conv ReLU

All convolutions are valid-mode (no padding), kernels length 3 in the VGG
models, and backprop is wired explicitly from the layer vjps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .layers import (
    DTYPE,
    ShapeError,
    batchnorm_forward,
    batchnorm_vjp,
    correlate,
    correlate_vjp,
    linear_forward,
    linear_vjp,
    maxpool,
    maxpool_vjp,
    relu,
    relu_vjp,
    sigmoid,
)

KINDS = (
    "fixed_feature",
    "learned_filter",
    "one_hidden",
    "one_hidden_relu",
    "vgg6",
    "vgg13",
    "vgg13_bn",
)

VGG6_WIDTHS = (128, 128, 256, 256, 256)
VGG13_WIDTHS = (128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG6_POOL_AFTER = (1, 4)            # 0-based conv indices followed by a pool
VGG13_POOL_AFTER = (1, 4, 7, 10)
VGG13_FC1_WIDTH = 4096
VGG_KERNEL = 3
VGG6_INPUT_LEN = 80                 # 5 s at 16 Hz
VGG13_INPUT_LEN = 200               # 12.5 s at 16 Hz

FIXED_BANK_NAMES = ("spike", "step", "ramp", "boxcar", "center_diff")
FIXED_BANK_SIZE = len(FIXED_BANK_NAMES)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of one model; serializes losslessly."""

    kind: str
    n_channels: int
    input_len: int
    hidden_maps: int = 100
    fixed_len: Optional[int] = None     # fixed_feature bank length, default input_len
    width_factor: float = 1.0           # scales VGG map counts for desk-scale tests

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.input_len < 1:
            raise ValueError("input_len must be >= 1")
        if self.hidden_maps < 1:
            raise ValueError("hidden_maps must be >= 1")
        if self.width_factor <= 0:
            raise ValueError("width_factor must be > 0")
        if self.kind == "vgg6" and self.input_len != VGG6_INPUT_LEN:
            raise ValueError(f"vgg6 requires input_len == {VGG6_INPUT_LEN}")
        if self.kind in ("vgg13", "vgg13_bn") and self.input_len != VGG13_INPUT_LEN:
            raise ValueError(f"{self.kind} requires input_len == {VGG13_INPUT_LEN}")
        if self.kind == "fixed_feature":
            d = self.bank_len
            if d < 4:
                raise ValueError("fixed filter length must be >= 4")
            if d > self.input_len:
                raise ValueError("fixed filter length cannot exceed input_len")

    @property
    def bank_len(self) -> int:
        return self.input_len if self.fixed_len is None else self.fixed_len

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_channels": self.n_channels,
            "input_len": self.input_len,
            "hidden_maps": self.hidden_maps,
            "fixed_len": self.fixed_len,
            "width_factor": self.width_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            kind=d["kind"],
            n_channels=int(d["n_channels"]),
            input_len=int(d["input_len"]),
            hidden_maps=int(d.get("hidden_maps", 100)),
            fixed_len=None if d.get("fixed_len") is None else int(d["fixed_len"]),
            width_factor=float(d.get("width_factor", 1.0)),
        )


def fixed_filter_bank(length: int) -> np.ndarray:
    """The five hand-chosen unit-norm filters, shape [5, length].

    Row order follows FIXED_BANK_NAMES: a centered impulse (spike detector),
    a -1/+1 step (level change), a linear ramp, a boxcar mean, and a first
    difference at the center.
    """
    if length < 4:
        raise ValueError(f"filter length must be >= 4, got {length}")
    bank = np.zeros((FIXED_BANK_SIZE, length), dtype=DTYPE)
    center = length // 2
    bank[0, center] = 1.0
    bank[1, : length // 2] = -1.0
    bank[1, length // 2:] = 1.0
    bank[2] = np.linspace(-1.0, 1.0, length)
    bank[3] = 1.0
    bank[4, center - 1] = -1.0
    bank[4, center] = 1.0
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    return bank


# ---------------------------------------------------------------------------
# layer tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvDef:
    out_maps: int
    kernel: int
    use_relu: bool
    use_bn: bool


@dataclass(frozen=True)
class PoolDef:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class FlattenDef:
    pass


@dataclass(frozen=True)
class LinearDef:
    out_features: int


LayerDef = Union[ConvDef, PoolDef, FlattenDef, LinearDef]


def _scaled(width: int, factor: float) -> int:
    return max(1, round(width * factor))


def layer_table(spec: ArchitectureSpec) -> list:
    """Layer sequence for every conv-stack architecture.

    fixed_feature is not a generic stack (fixed bank + center-index readout)
    and is handled separately by forward/backward.
    """
    if spec.kind == "fixed_feature":
        raise ValueError("fixed_feature has no generic layer table")
    if spec.kind == "learned_filter":
        return [ConvDef(1, spec.input_len, use_relu=False, use_bn=False), FlattenDef()]
    if spec.kind in ("one_hidden", "one_hidden_relu"):
        return [
            ConvDef(spec.hidden_maps, spec.input_len,
                    use_relu=spec.kind == "one_hidden_relu", use_bn=False),
            FlattenDef(),
            LinearDef(1),
        ]
    use_bn = spec.kind == "vgg13_bn"
    widths = VGG6_WIDTHS if spec.kind == "vgg6" else VGG13_WIDTHS
    pools = VGG6_POOL_AFTER if spec.kind == "vgg6" else VGG13_POOL_AFTER
    table: list = []
    for i, width in enumerate(widths):
        table.append(ConvDef(_scaled(width, spec.width_factor), VGG_KERNEL,
                             use_relu=True, use_bn=use_bn))
        if i in pools:
            table.append(PoolDef())
    table.append(FlattenDef())
    if spec.kind != "vgg6":
        table.append(LinearDef(_scaled(VGG13_FC1_WIDTH, spec.width_factor)))
    table.append(LinearDef(1))
    return table


@dataclass(frozen=True)
class LayerShape:
    label: str
    maps: int
    length: int


def output_shape(spec: ArchitectureSpec) -> list:
    """Per-layer (maps, length) trace, including flatten and linear widths."""
    rows = [LayerShape("input", spec.n_channels, spec.input_len)]
    if spec.kind == "fixed_feature":
        rows.append(LayerShape("fixed_features",
                               FIXED_BANK_SIZE * spec.n_channels, 1))
        rows.append(LayerShape("output", 1, 1))
        return rows
    maps, length = spec.n_channels, spec.input_len
    n_conv = n_pool = n_fc = 0
    for entry in layer_table(spec):
        if isinstance(entry, ConvDef):
            n_conv += 1
            maps, length = entry.out_maps, length - entry.kernel + 1
            rows.append(LayerShape(f"conv{n_conv}", maps, length))
        elif isinstance(entry, PoolDef):
            n_pool += 1
            length = (length - entry.kernel) // entry.stride + 1
            rows.append(LayerShape(f"pool{n_pool}", maps, length))
        elif isinstance(entry, FlattenDef):
            maps, length = 1, maps * length
            rows.append(LayerShape("flatten", 1, length))
        else:
            n_fc += 1
            maps, length = 1, entry.out_features
            rows.append(LayerShape(f"fc{n_fc}", 1, length))
    return rows


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    w: np.ndarray                       # [out_maps, in_maps, kernel]
    b: np.ndarray                       # [out_maps]
    bn_scale: Optional[np.ndarray] = None
    bn_shift: Optional[np.ndarray] = None
    bn_mean: Optional[np.ndarray] = None    # running stats, not trained
    bn_var: Optional[np.ndarray] = None
    bn_ready: bool = False              # a train step has populated the stats

    def copy(self) -> "ConvParams":
        return ConvParams(
            self.w.copy(), self.b.copy(),
            None if self.bn_scale is None else self.bn_scale.copy(),
            None if self.bn_shift is None else self.bn_shift.copy(),
            None if self.bn_mean is None else self.bn_mean.copy(),
            None if self.bn_var is None else self.bn_var.copy(),
            self.bn_ready,
        )


@dataclass
class LinearParams:
    w: np.ndarray                       # [out, in]
    b: np.ndarray                       # [out]

    def copy(self) -> "LinearParams":
        return LinearParams(self.w.copy(), self.b.copy())


@dataclass
class FixedFeatureParams:
    omega: np.ndarray                   # [bank, channels]
    b: np.ndarray                       # scalar, shape (1,)

    def copy(self) -> "FixedFeatureParams":
        return FixedFeatureParams(self.omega.copy(), self.b.copy())


LayerParams = Union[ConvParams, LinearParams, FixedFeatureParams]


@dataclass
class ModelParams:
    layers: list

    def copy(self) -> "ModelParams":
        return ModelParams([layer.copy() for layer in self.layers])

    def n_parameters(self) -> int:
        return sum(arr.size for _, arr in trainable_arrays(self))


def trainable_arrays(params: ModelParams) -> list:
    """(name, array) pairs for every trained tensor, in declaration order."""
    out = []
    for i, layer in enumerate(params.layers):
        if isinstance(layer, ConvParams):
            out.append((f"layer{i}.w", layer.w))
            out.append((f"layer{i}.b", layer.b))
            if layer.bn_scale is not None:
                out.append((f"layer{i}.bn_scale", layer.bn_scale))
                out.append((f"layer{i}.bn_shift", layer.bn_shift))
        elif isinstance(layer, LinearParams):
            out.append((f"layer{i}.w", layer.w))
            out.append((f"layer{i}.b", layer.b))
        else:
            out.append((f"layer{i}.omega", layer.omega))
            out.append((f"layer{i}.b", layer.b))
    return out


def zero_grads_like(params: ModelParams) -> ModelParams:
    """Gradient container mirroring the trainable structure of ``params``."""
    layers = []
    for layer in params.layers:
        if isinstance(layer, ConvParams):
            layers.append(ConvParams(
                np.zeros_like(layer.w), np.zeros_like(layer.b),
                None if layer.bn_scale is None else np.zeros_like(layer.bn_scale),
                None if layer.bn_shift is None else np.zeros_like(layer.bn_shift),
            ))
        elif isinstance(layer, LinearParams):
            layers.append(LinearParams(np.zeros_like(layer.w), np.zeros_like(layer.b)))
        else:
            layers.append(FixedFeatureParams(np.zeros_like(layer.omega),
                                             np.zeros_like(layer.b)))
    return ModelParams(layers)


def build(spec: ArchitectureSpec, seed) -> ModelParams:
    """Kaiming-uniform initialization, deterministic given the seed.

    Weights draw from U[-sqrt(6/fan_in), +sqrt(6/fan_in)] with
    fan_in = in_maps*kernel for convolutions and the input width for linear
    layers; biases from U[-1/sqrt(fan_in), +1/sqrt(fan_in)]. Batchnorm scale
    starts at 1 and shift at 0. ``seed`` may be an int or a Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def bias(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if spec.kind == "fixed_feature":
        fan_in = FIXED_BANK_SIZE * spec.n_channels
        omega = kaiming((FIXED_BANK_SIZE, spec.n_channels), fan_in)
        b = bias((1,), fan_in)
        return ModelParams([FixedFeatureParams(omega, b)])

    layers = []
    maps, length = spec.n_channels, spec.input_len
    for entry in layer_table(spec):
        if isinstance(entry, ConvDef):
            fan_in = maps * entry.kernel
            conv = ConvParams(
                kaiming((entry.out_maps, maps, entry.kernel), fan_in),
                bias((entry.out_maps,), fan_in),
            )
            if entry.use_bn:
                conv.bn_scale = np.ones(entry.out_maps, dtype=DTYPE)
                conv.bn_shift = np.zeros(entry.out_maps, dtype=DTYPE)
                conv.bn_mean = np.zeros(entry.out_maps, dtype=DTYPE)
                conv.bn_var = np.ones(entry.out_maps, dtype=DTYPE)
            layers.append(conv)
            maps, length = entry.out_maps, length - entry.kernel + 1
        elif isinstance(entry, PoolDef):
            length = (length - entry.kernel) // entry.stride + 1
        elif isinstance(entry, FlattenDef):
            maps, length = 1, maps * length
        else:
            fan_in = length
            layers.append(LinearParams(
                kaiming((entry.out_features, length), fan_in),
                bias((entry.out_features,), fan_in),
            ))
            length = entry.out_features
    return ModelParams(layers)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class FixedFeatureCache:
    window: np.ndarray                  # [B, P, d] centered slice of the input
    features: np.ndarray                # [B, K, P]


@dataclass
class ConvBlockCache:
    corr: object
    bn: object = None
    act: object = None


@dataclass
class ForwardCaches:
    kind: str
    blocks: list
    logits: np.ndarray
    bn_updates: list = field(default_factory=list)  # (param_index, mean, var)


def _check_batch(spec: ArchitectureSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != 3 or batch.shape[1:] != (spec.n_channels, spec.input_len):
        raise ShapeError(
            f"batch shape {batch.shape} does not match spec "
            f"[B, {spec.n_channels}, {spec.input_len}]"
        )
    return batch


def center_output_index(input_len: int, kernel: int) -> int:
    """Retained output index of a valid correlation, left-biased for even counts."""
    return (input_len - kernel) // 2


def forward_logits(spec: ArchitectureSpec, params: ModelParams,
                   batch: np.ndarray, train: bool = False):
    """Pre-sigmoid logits [B] plus the caches the backward pass needs."""
    batch = _check_batch(spec, batch)
    if spec.kind == "fixed_feature":
        (ff,) = params.layers
        bank = fixed_filter_bank(spec.bank_len)
        c = center_output_index(spec.input_len, spec.bank_len)
        window = batch[:, :, c:c + spec.bank_len]
        features = np.einsum("bpm,km->bkp", window, bank, optimize=True)
        logits = np.einsum("bkp,kp->b", features, ff.omega, optimize=True) + ff.b[0]
        return logits, ForwardCaches(spec.kind, [FixedFeatureCache(window, features)],
                                     logits)

    x = batch
    blocks = []
    bn_updates = []
    param_idx = 0
    for entry in layer_table(spec):
        if isinstance(entry, ConvDef):
            layer = params.layers[param_idx]
            x, corr_cache = correlate(x, layer.w, layer.b)
            block = ConvBlockCache(corr_cache)
            if entry.use_bn:
                x, bn_cache, (new_mean, new_var) = batchnorm_forward(
                    x, layer.bn_scale, layer.bn_shift,
                    layer.bn_mean, layer.bn_var, train,
                    initialized=layer.bn_ready,
                )
                block.bn = bn_cache
                if train:
                    bn_updates.append((param_idx, new_mean, new_var))
            if entry.use_relu:
                x, act_cache = relu(x)
                block.act = act_cache
            blocks.append(block)
            param_idx += 1
        elif isinstance(entry, PoolDef):
            x, pool_cache = maxpool(x, entry.kernel, entry.stride)
            blocks.append(pool_cache)
        elif isinstance(entry, FlattenDef):
            blocks.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        else:
            layer = params.layers[param_idx]
            x, lin_cache = linear_forward(x, layer.w, layer.b)
            blocks.append(lin_cache)
            param_idx += 1
    logits = x[:, 0]
    return logits, ForwardCaches(spec.kind, blocks, logits, bn_updates)


def forward(spec: ArchitectureSpec, params: ModelParams,
            batch: np.ndarray, train: bool = False):
    """Class probabilities [B] in (0,1) plus caches."""
    logits, caches = forward_logits(spec, params, batch, train)
    return sigmoid(logits), caches


def apply_bn_updates(params: ModelParams, caches: ForwardCaches) -> None:
    """Install the running-stat updates a train-mode forward returned."""
    for idx, mean, var in caches.bn_updates:
        layer = params.layers[idx]
        layer.bn_mean = mean
        layer.bn_var = var
        layer.bn_ready = True


def backward(spec: ArchitectureSpec, params: ModelParams,
             caches: ForwardCaches, grad_logits: np.ndarray) -> ModelParams:
    """Parameter gradients for d(loss)/d(logits); structure mirrors params."""
    if caches.kind != spec.kind:
        raise ValueError(
            f"caches built for {caches.kind!r} cannot drive a {spec.kind!r} backward"
        )
    grad_logits = np.asarray(grad_logits, dtype=DTYPE)
    if grad_logits.shape != caches.logits.shape:
        raise ShapeError(
            f"grad_logits shape {grad_logits.shape} does not match logits "
            f"{caches.logits.shape}"
        )
    grads = zero_grads_like(params)

    if spec.kind == "fixed_feature":
        (cache,) = caches.blocks
        grads.layers[0].omega[:] = np.einsum(
            "b,bkp->kp", grad_logits, cache.features, optimize=True
        )
        grads.layers[0].b[0] = grad_logits.sum()
        return grads

    gx = grad_logits[:, None]
    param_idx = len(params.layers)
    for entry, block in zip(reversed(layer_table(spec)), reversed(caches.blocks)):
        if isinstance(entry, ConvDef):
            param_idx -= 1
            if entry.use_relu:
                gx = relu_vjp(block.act, gx)
            if entry.use_bn:
                gx, g_scale, g_shift = batchnorm_vjp(block.bn, gx)
                grads.layers[param_idx].bn_scale[:] = g_scale
                grads.layers[param_idx].bn_shift[:] = g_shift
            gx, gw, gb = correlate_vjp(block.corr, gx)
            grads.layers[param_idx].w[:] = gw
            grads.layers[param_idx].b[:] = gb
        elif isinstance(entry, PoolDef):
            gx = maxpool_vjp(block, gx)
        elif isinstance(entry, FlattenDef):
            gx = gx.reshape(block)
        else:
            param_idx -= 1
            gx, gw, gb = linear_vjp(block, gx)
            grads.layers[param_idx].w[:] = gw
            grads.layers[param_idx].b[:] = gb
    return grads


def first_layer_activations(spec: ArchitectureSpec, params: ModelParams,
                            batch: np.ndarray) -> Optional[np.ndarray]:
    """Post-activation output of the first feature-map layer, eval mode.

    Shape [B, maps] for the flat models and [B, maps, L] for VGG stacks;
    None for fixed_feature, which has no learned feature maps.
    """
    if spec.kind == "fixed_feature":
        return None
    batch = _check_batch(spec, batch)
    entry = layer_table(spec)[0]
    layer = params.layers[0]
    x, _ = correlate(batch, layer.w, layer.b)
    if entry.use_bn:
        x, _, _ = batchnorm_forward(x, layer.bn_scale, layer.bn_shift,
                                    layer.bn_mean, layer.bn_var, train=False,
                                    initialized=layer.bn_ready)
    if entry.use_relu:
        x, _ = relu(x)
    return x[:, :, 0] if x.shape[2] == 1 else x


def equivalent_learned_filters(spec: ArchitectureSpec,
                               ff_params: ModelParams) -> tuple:
    """Embed a fixed_feature model into learned_filter weights.

    Returns (w0, b) with w0[0, p, c+m] = sum_k omega[k, p] * bank[k, m], where
    c is the retained center index; a learned_filter model with these weights
    reproduces the fixed_feature outputs exactly.
    """
    if spec.kind != "fixed_feature":
        raise ValueError("expects a fixed_feature spec")
    (ff,) = ff_params.layers
    bank = fixed_filter_bank(spec.bank_len)
    c = center_output_index(spec.input_len, spec.bank_len)
    w0 = np.zeros((1, spec.n_channels, spec.input_len), dtype=DTYPE)
    w0[0, :, c:c + spec.bank_len] = np.einsum("kp,km->pm", ff.omega, bank)
    return w0, ff.b.copy()
