"""SPAN network: parameter-free attention blocks, tape-based backward pass,
structural re-parameterization and initialization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .ops import Activation, ConvKernel, PaddingMode
from .tensor import ShapeError, Xoshiro256, as_tensor4, concat_channels

SCALES = (2, 3, 4)

# bit layout of the rep-branch mask stored in weight files
BRANCH_3X3 = 1
BRANCH_1X1 = 2
BRANCH_IDENTITY = 4


@dataclass(frozen=True)
class SpanConfig:
    scale: int = 4
    channels: int = 48
    blocks: int = 6
    image_channels: int = 3
    use_residual: bool = True
    use_attention: bool = True
    activation: Activation = Activation.SILU
    padding: PaddingMode = PaddingMode.ZERO
    rep_1x1: bool = True
    rep_identity: bool = True
    learn_a: bool = False
    learn_b: bool = False

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.channels < 1 or self.blocks < 1 or self.image_channels < 1:
            raise ValueError("channels, blocks and image_channels must be positive")
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "padding", PaddingMode(self.padding))

    @property
    def variant(self) -> str:
        return {
            (True, True): "span",
            (False, True): "nores",
            (True, False): "noatt",
            (False, False): "empty",
        }[(self.use_residual, self.use_attention)]

    @property
    def branch_mask(self) -> int:
        mask = BRANCH_3X3
        if self.rep_1x1:
            mask |= BRANCH_1X1
        if self.rep_identity:
            mask |= BRANCH_IDENTITY
        return mask


PRESETS = {
    "span-x2": SpanConfig(scale=2),
    "span-x4": SpanConfig(scale=4),
    # channel count is an estimate tuned to land near the published 426K
    "span-s-x4": SpanConfig(scale=4, channels=45),
    "desk": SpanConfig(scale=2, channels=16),
}


def with_variant(cfg: SpanConfig, variant: str) -> SpanConfig:
    flags = {"span": (True, True), "nores": (False, True),
             "noatt": (True, False), "empty": (False, False)}
    if variant not in flags:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(flags)}")
    res, att = flags[variant]
    return replace(cfg, use_residual=res, use_attention=att)


@dataclass
class RepConvBranchSet:
    main: ConvKernel
    side: ConvKernel | None = None
    identity: bool = False

    def __post_init__(self):
        m = self.main
        if m.size != 3:
            raise ShapeError("rep main branch must be 3x3")
        if self.side is not None:
            if self.side.size != 1 or self.side.weight.shape[:2] != m.weight.shape[:2]:
                raise ShapeError("rep side branch must be 1x1 with matching channels")
        if self.identity and m.in_c != m.out_c:
            raise ShapeError(f"identity branch needs in_c == out_c, got {m.in_c} -> {m.out_c}")

    def forward(self, x, padding=PaddingMode.ZERO, cache: dict | None = None) -> np.ndarray:
        out = ops.conv2d_forward(x, self.main, padding=padding, cache=cache)
        if self.side is not None:
            out += ops.conv2d_forward(x, self.side)
        if self.identity:
            out += x
        return out

    def backward(self, x, d_out, padding=PaddingMode.ZERO, cache: dict | None = None):
        """Return (d_input, [(d_weight, d_bias) per present conv branch])."""
        g = ops.conv2d_backward(x, self.main, d_out, padding=padding, cache=cache)
        d_input, grads = g.d_input, [(g.d_weight, g.d_bias)]
        if self.side is not None:
            gs = ops.conv2d_backward(x, self.side, d_out)
            d_input += gs.d_input
            grads.append((gs.d_weight, gs.d_bias))
        if self.identity:
            d_input += d_out
        return d_input, grads


def fuse_rep(branches: RepConvBranchSet) -> ConvKernel:
    m = branches.main
    if branches.identity and m.in_c != m.out_c:
        raise ShapeError("identity branch needs in_c == out_c")
    weight = m.weight.copy()
    bias = m.bias.copy()
    if branches.side is not None:
        weight[:, :, 1, 1] += branches.side.weight[:, :, 0, 0]
        bias += branches.side.bias
    if branches.identity:
        idx = np.arange(m.out_c)
        weight[idx, idx, 1, 1] += 1
    return ConvKernel(weight, bias)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def layer_prefix(block: int, layer: int) -> str:
    return f"blocks.{block}.conv{layer + 1}"


def parameter_shapes(cfg: SpanConfig, fused: bool) -> dict[str, tuple[int, ...]]:
    """Canonical ordered mapping from parameter name to shape."""
    c, f, r = cfg.image_channels, cfg.channels, cfg.scale
    shapes: dict[str, tuple[int, ...]] = {
        "conv_first.weight": (f, c, 3, 3),
        "conv_first.bias": (f,),
    }
    for i in range(cfg.blocks):
        for j in range(3):
            p = layer_prefix(i, j)
            if fused or not cfg.rep_1x1:
                key = p if fused else f"{p}.k3"
                shapes[f"{key}.weight"] = (f, f, 3, 3)
                shapes[f"{key}.bias"] = (f,)
            else:
                shapes[f"{p}.k3.weight"] = (f, f, 3, 3)
                shapes[f"{p}.k3.bias"] = (f,)
                shapes[f"{p}.k1.weight"] = (f, f, 1, 1)
                shapes[f"{p}.k1.bias"] = (f,)
    shapes["conv_cat.weight"] = (f, f, 3, 3)
    shapes["conv_cat.bias"] = (f,)
    shapes["conv_out.weight"] = (r * r * c, 4 * f, 3, 3)
    shapes["conv_out.bias"] = (r * r * c,)
    return shapes


ATTENTION_KEYS = ("attention.a", "attention.b")


def parameter_count(cfg: SpanConfig, fused: bool) -> int:
    """Closed-form count of trainable scalars."""
    c, f, r, nb = cfg.image_channels, cfg.channels, cfg.scale, cfg.blocks
    conv3 = f * f * 9 + f
    per_layer = conv3 if fused or not cfg.rep_1x1 else conv3 + f * f + f
    count = (c * f * 9 + f) + 3 * nb * per_layer + conv3 + (4 * f * r * r * c * 9 + r * r * c)
    return count + int(cfg.learn_a) + int(cfg.learn_b)


@dataclass
class SpanModel:
    config: SpanConfig
    params: dict[str, np.ndarray]
    fused: bool = False

    @property
    def dtype(self):
        return self.params["conv_first.weight"].dtype

    @property
    def a(self):
        return self.params["attention.a"][0]

    @property
    def b(self):
        return self.params["attention.b"][0]

    def trainable_names(self) -> list[str]:
        names = [k for k in self.params if k not in ATTENTION_KEYS]
        if self.config.learn_a:
            names.append("attention.a")
        if self.config.learn_b:
            names.append("attention.b")
        return names

    def num_params(self) -> int:
        return sum(self.params[k].size for k in self.trainable_names())

    def astype(self, dtype) -> "SpanModel":
        return SpanModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                         self.fused)

    def copy(self) -> "SpanModel":
        return SpanModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.fused)

    def kernel(self, prefix: str) -> ConvKernel:
        return ConvKernel(self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def layer(self, block: int, j: int) -> RepConvBranchSet:
        p = layer_prefix(block, j)
        if self.fused:
            return RepConvBranchSet(self.kernel(p))
        side = self.kernel(f"{p}.k1") if self.config.rep_1x1 else None
        return RepConvBranchSet(self.kernel(f"{p}.k3"), side, self.config.rep_identity)

    def layer_param_names(self, block: int, j: int) -> list[tuple[str, str]]:
        p = layer_prefix(block, j)
        if self.fused:
            return [(f"{p}.weight", f"{p}.bias")]
        names = [(f"{p}.k3.weight", f"{p}.k3.bias")]
        if self.config.rep_1x1:
            names.append((f"{p}.k1.weight", f"{p}.k1.bias"))
        return names


# Block convs draw He-normal scaled by this factor. With plain He std the
# multiplicative attention makes fresh activations grow ~3x per block.
BLOCK_INIT_GAIN = 1.0 / math.sqrt(3.0)


def init_model(cfg: SpanConfig, seed: int, dtype=np.float32) -> SpanModel:
    """He-normal (fan-in) weights drawn in canonical order, zero biases.

    Weights inside the attention blocks use ``BLOCK_INIT_GAIN`` times the
    He std.
    """
    rng = Xoshiro256(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg, fused=False).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = math.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
            if name.startswith("blocks."):
                std *= BLOCK_INIT_GAIN
            params[name] = (std * rng.normal_array(int(np.prod(shape)))).reshape(shape).astype(dtype)
    params["attention.a"] = np.ones(1, dtype=dtype)
    params["attention.b"] = np.ones(1, dtype=dtype)
    return SpanModel(cfg, params, fused=False)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class BlockTape:
    o_prev: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    h: np.ndarray
    u: np.ndarray
    v: np.ndarray
    caches: list[dict] = field(default_factory=lambda: [{}, {}, {}])


@dataclass
class Tape:
    x: np.ndarray
    z0: np.ndarray
    outputs: list[np.ndarray]
    blocks: list[BlockTape]
    cat: np.ndarray
    caches: dict[str, dict] = field(default_factory=dict)


def attention_map(h: np.ndarray, cfg: SpanConfig, a=1.0, b=1.0) -> np.ndarray:
    if cfg.use_attention:
        return ops.act_attention(h, a, b)
    return np.ones_like(h)


def attention_grad_factor(h, o_prev, cfg: SpanConfig, a=1.0, b=1.0) -> np.ndarray:
    """Elementwise factor mapping dL/dO_i to dL/dH_i inside one block.

    With attention it is ``(H [+ O_prev]) * sigma_a'(H) + sigma_a(H)``;
    without attention the map is constant and the factor is one.
    """
    h = np.asarray(h)
    if h.shape != np.shape(o_prev):
        raise ShapeError(f"attention_grad_factor: {h.shape} vs {np.shape(o_prev)}")
    if not cfg.use_attention:
        return np.ones_like(h)
    base = h + o_prev if cfg.use_residual else h
    return base * ops.attention_derivative(h, a, b) + ops.act_attention(h, a, b)


def spab_forward(o_prev, layers: list[RepConvBranchSet], cfg: SpanConfig,
                 train: bool = False, a=1.0, b=1.0):
    """One attention block. Returns (O_i, BlockTape or None)."""
    o_prev = as_tensor4(o_prev)
    if o_prev.shape[1] != cfg.channels:
        raise ShapeError(f"block input has {o_prev.shape[1]} channels, expected {cfg.channels}")
    caches = [{}, {}, {}] if train else [None, None, None]
    z1 = layers[0].forward(o_prev, cfg.padding, caches[0])
    a1 = ops.activation(z1, cfg.activation)
    z2 = layers[1].forward(a1, cfg.padding, caches[1])
    a2 = ops.activation(z2, cfg.activation)
    h = layers[2].forward(a2, cfg.padding, caches[2])
    u = o_prev + h if cfg.use_residual else h
    v = attention_map(h, cfg, a, b)
    out = u * v
    if not train:
        return out, None
    return out, BlockTape(o_prev, z1, a1, z2, a2, h, u, v, caches)


def spab_backward(tape: BlockTape, d_out, layers: list[RepConvBranchSet], cfg: SpanConfig,
                  a=1.0, b=1.0):
    """Reverse pass of one block.

    Returns (d_o_prev, per-layer branch grads, d_attention[a, b]).
    """
    d_u = d_out * tape.v
    d_att = np.zeros(2, dtype=tape.h.dtype)
    if cfg.use_attention:
        g = ops.act_attention_backward(tape.h, d_out * tape.u, a, b)
        d_h = d_u + g.d_input
        d_att += g.d_weight
    else:
        d_h = d_u
    d_prev = d_u.copy() if cfg.use_residual else np.zeros_like(tape.o_prev)

    grads = [None, None, None]
    c = tape.caches
    d_a2, grads[2] = layers[2].backward(tape.a2, d_h, cfg.padding, c[2])
    d_z2 = ops.activation_backward(tape.z2, d_a2, cfg.activation)
    d_a1, grads[1] = layers[1].backward(tape.a1, d_z2, cfg.padding, c[1])
    d_z1 = ops.activation_backward(tape.z1, d_a1, cfg.activation)
    d_x, grads[0] = layers[0].backward(tape.o_prev, d_z1, cfg.padding, c[0])
    d_prev += d_x
    return d_prev, grads, d_att


def concat_taps(blocks: int) -> tuple[int, int, int]:
    """Indices of the block outputs fed straight into the concat."""
    return (0, 1, blocks - 1)


def span_forward(x, model: SpanModel, train: bool = False):
    """Full network. Returns (I_hr, Tape or None); output is not clamped."""
    cfg = model.config
    x = as_tensor4(x, dtype=model.dtype)
    if x.shape[1] != cfg.image_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, model expects {cfg.image_channels}")
    a, b = model.a, model.b
    caches = {"conv_first": {}, "conv_cat": {}, "conv_out": {}} if train else {}
    z0 = ops.conv2d_forward(x, model.kernel("conv_first"), padding=cfg.padding,
                            cache=caches.get("conv_first"))
    outputs = [ops.activation(z0, cfg.activation)]
    tapes = []
    for i in range(cfg.blocks):
        layers = [model.layer(i, j) for j in range(3)]
        o, bt = spab_forward(outputs[-1], layers, cfg, train, a, b)
        outputs.append(o)
        tapes.append(bt)
    cat_out = ops.conv2d_forward(outputs[-1], model.kernel("conv_cat"), padding=cfg.padding,
                                 cache=caches.get("conv_cat"))
    i0, i1, i2 = concat_taps(cfg.blocks)
    cat = concat_channels([outputs[i0], outputs[i1], outputs[i2], cat_out])
    y = ops.conv2d_forward(cat, model.kernel("conv_out"), padding=cfg.padding,
                           cache=caches.get("conv_out"))
    hr = ops.pixel_shuffle(y, cfg.scale)
    if not train:
        return hr, None
    return hr, Tape(x, z0, outputs, tapes, cat, caches)


def span_backward(tape: Tape | None, d_hr, model: SpanModel) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every entry of ``model.params``."""
    if tape is None:
        raise ValueError("span_backward needs the tape from a train-mode forward pass")
    cfg = model.config
    f = cfg.channels
    d_hr = as_tensor4(d_hr, dtype=model.dtype)
    grads: dict[str, np.ndarray] = {}

    d_y = ops.pixel_unshuffle(d_hr, cfg.scale)
    g = ops.conv2d_backward(tape.cat, model.kernel("conv_out"), d_y, padding=cfg.padding,
                            cache=tape.caches.get("conv_out"))
    grads["conv_out.weight"], grads["conv_out.bias"] = g.d_weight, g.d_bias
    d_cat = g.d_input

    d_o = [np.zeros_like(o) for o in tape.outputs]
    for slot, idx in enumerate(concat_taps(cfg.blocks)):
        d_o[idx] += d_cat[:, slot * f:(slot + 1) * f]
    g = ops.conv2d_backward(tape.outputs[-1], model.kernel("conv_cat"), d_cat[:, 3 * f:],
                            padding=cfg.padding, cache=tape.caches.get("conv_cat"))
    grads["conv_cat.weight"], grads["conv_cat.bias"] = g.d_weight, g.d_bias
    d_o[-1] += g.d_input

    d_att = np.zeros(2, dtype=model.dtype)
    for i in reversed(range(cfg.blocks)):
        layers = [model.layer(i, j) for j in range(3)]
        d_prev, layer_grads, da = spab_backward(tape.blocks[i], d_o[i + 1], layers, cfg,
                                                model.a, model.b)
        d_o[i] += d_prev
        d_att += da
        for j in range(3):
            for (wn, bn), (dw, db) in zip(model.layer_param_names(i, j), layer_grads[j]):
                grads[wn], grads[bn] = dw, db

    d_z0 = ops.activation_backward(tape.z0, d_o[0], cfg.activation)
    g = ops.conv2d_backward(tape.x, model.kernel("conv_first"), d_z0, padding=cfg.padding,
                            cache=tape.caches.get("conv_first"))
    grads["conv_first.weight"], grads["conv_first.bias"] = g.d_weight, g.d_bias
    grads["attention.a"] = d_att[:1].copy()
    grads["attention.b"] = d_att[1:].copy()
    return {k: grads[k] for k in model.params}


# ---------------------------------------------------------------------------
# re-parameterization
# ---------------------------------------------------------------------------


def fuse_model(model: SpanModel) -> SpanModel:
    if model.fused:
        raise ValueError("model is already fused")
    params: dict[str, np.ndarray] = {}
    for name in ("conv_first.weight", "conv_first.bias"):
        params[name] = model.params[name].copy()
    for i in range(model.config.blocks):
        for j in range(3):
            k = fuse_rep(model.layer(i, j))
            p = layer_prefix(i, j)
            params[f"{p}.weight"], params[f"{p}.bias"] = k.weight, k.bias
    for name in ("conv_cat.weight", "conv_cat.bias", "conv_out.weight", "conv_out.bias",
                 *ATTENTION_KEYS):
        params[name] = model.params[name].copy()
    return SpanModel(model.config, params, fused=True)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def conv_layers(cfg: SpanConfig, fused: bool) -> list[tuple[int, int, int]]:
    """(in_c, out_c, k) of every convolution run at inference, in order."""
    c, f, r = cfg.image_channels, cfg.channels, cfg.scale
    convs = [(c, f, 3)]
    per_layer = [(f, f, 3)] if fused or not cfg.rep_1x1 else [(f, f, 3), (f, f, 1)]
    convs += per_layer * (3 * cfg.blocks)
    convs += [(f, f, 3), (4 * f, r * r * c, 3)]
    return convs


def flop_estimate(cfg: SpanConfig, fused: bool, height: int, width: int) -> int:
    """Convolution FLOPs for one LR image, counting a multiply-add as 2.

    Every conv runs at LR resolution, so each contributes
    ``2 * (out_c * H * W) * in_c * k * k``. Elementwise work is ignored.
    """
    pixels = height * width
    return sum(2 * out_c * pixels * in_c * k * k for in_c, out_c, k in conv_layers(cfg, fused))
