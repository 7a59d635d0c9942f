"""Finite-difference verification of every hand-written backward pass.

Each check contracts the op's output with a fixed random projection P, so
the scalar loss is ``sum(out * P)`` and its analytic gradient comes from
the backward pass seeded with P. Analytic gradients are computed at 64-bit.
The central-difference reference re-runs the same forward code on
extended-precision copies (``np.longdouble``), which keeps its round-off
well below the 1e-5 tolerance even for small gradient components; on
platforms where long double is plain 64-bit it degrades gracefully.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import ops
from .model import (SpanConfig, SpanModel, attention_grad_factor, init_model, span_backward,
                    span_forward, spab_backward, spab_forward, with_variant, RepConvBranchSet)
from .ops import ConvKernel, PaddingMode
from .tensor import REFERENCE_DTYPE, Xoshiro256, mix_seed
from .train import l1_loss, l2_loss

FD_STEP = 1e-6
REL_TOL = 1e-5
REL_FLOOR = 1e-8
IDENTITY_TOL = 1e-10

TINY = SpanConfig(scale=2, channels=4, blocks=2)
TINY_INPUT = (1, 3, 8, 8)


@dataclass
class CheckResult:
    name: str
    max_error: float
    count: int
    tolerance: float
    seconds: float = 0.0
    kind: str = "rel"  # "rel" for FD checks, "abs" for identities

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_error) and self.max_error <= self.tolerance


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> CheckResult:
        return max(self.results, key=lambda r: r.max_error / r.tolerance)

    def table(self) -> str:
        width = max(len(r.name) for r in self.results)
        lines = [f"{'check':<{width}}  {'max err':>10}  {'kind':>4}  {'tol':>7}  {'n':>6}  status"]
        for r in self.results:
            lines.append(f"{r.name:<{width}}  {r.max_error:10.3e}  {r.kind:>4}  {r.tolerance:7.0e}"
                         f"  {r.count:6d}  {'ok' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn: Callable[[], np.ndarray], x: np.ndarray, proj: np.ndarray,
                     h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of ``sum(fn() * proj)`` w.r.t. ``x``.

    ``x`` is perturbed in place and restored; ``fn`` must read it.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    p = proj.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn().reshape(-1)
        flat[i] = old - h
        down = fn().reshape(-1)
        flat[i] = old
        gflat[i] = float(np.sum((up - down) * p) / (2.0 * h))
    return grad


def _compare(name: str, fn: Callable[[dict], np.ndarray], inputs: dict[str, np.ndarray],
             analytic: dict[str, np.ndarray], proj: np.ndarray, check: list[str] | None = None,
             h: float = FD_STEP) -> CheckResult:
    """FD-check ``analytic`` against ``fn(values)`` for every key in ``check``.

    ``fn`` receives a dict of extended-precision copies of ``inputs``.
    """
    t0 = time.perf_counter()
    ref = {k: np.array(v, dtype=REFERENCE_DTYPE) for k, v in inputs.items()}
    ref_proj = np.asarray(proj, dtype=REFERENCE_DTYPE)
    worst, count = 0.0, 0
    for key in (check if check is not None else list(inputs)):
        fd = numeric_gradient(lambda: fn(ref), ref[key], ref_proj, h)
        err = rel_error(analytic[key], fd)
        worst = max(worst, float(err.max(initial=0.0)))
        count += err.size
    return CheckResult(name, worst, count, REL_TOL, time.perf_counter() - t0)


class _Rand:
    def __init__(self, seed: int, salt: int):
        self.rng = Xoshiro256(mix_seed(seed, salt))

    def normal(self, *shape, std=1.0) -> np.ndarray:
        n = int(np.prod(shape))
        return (std * self.rng.normal_array(n)).reshape(shape)

    def away_from_zero(self, *shape, margin=0.1) -> np.ndarray:
        x = self.normal(*shape)
        return np.where(x >= 0, x + margin, x - margin)


# ---------------------------------------------------------------------------
# op checks
# ---------------------------------------------------------------------------


def check_conv(seed: int, padding: PaddingMode, k: int = 3) -> CheckResult:
    r = _Rand(seed, 10 + k + (padding is PaddingMode.REPLICATE))
    vals = {"x": r.normal(2, 3, 5, 6), "w": r.normal(4, 3, k, k, std=0.5), "b": r.normal(4)}
    proj = r.normal(2, 4, 5, 6)
    g = ops.conv2d_backward(vals["x"], ConvKernel(vals["w"], vals["b"]), proj, padding=padding)

    def fn(v):
        return ops.conv2d_forward(v["x"], ConvKernel(v["w"], v["b"]), padding=padding)

    return _compare(f"conv2d {k}x{k} {padding.value}", fn, vals,
                    {"x": g.d_input, "w": g.d_weight, "b": g.d_bias}, proj)


def check_activation(seed: int, kind: ops.Activation) -> CheckResult:
    r = _Rand(seed, 20)
    # leaky relu has a kink at zero, keep samples clear of it
    if kind is ops.Activation.LEAKY_RELU:
        x = r.away_from_zero(2, 3, 4, 5)
    else:
        x = r.normal(2, 3, 4, 5, std=2.0)
    proj = r.normal(*x.shape)
    return _compare(f"activation {kind.value}", lambda v: ops.activation(v["x"], kind), {"x": x},
                    {"x": ops.activation_backward(x, proj, kind)}, proj)


def check_attention(seed: int) -> CheckResult:
    r = _Rand(seed, 30)
    vals = {"x": r.normal(2, 3, 4, 5, std=2.0), "ab": np.array([1.3, 0.8])}
    proj = r.normal(*vals["x"].shape)
    g = ops.act_attention_backward(vals["x"], proj, 1.3, 0.8)
    return _compare("attention sigma_a (x, a, b)",
                    lambda v: ops.act_attention(v["x"], v["ab"][0], v["ab"][1]), vals,
                    {"x": g.d_input, "ab": g.d_weight}, proj)


def check_pixel_shuffle(seed: int, scale: int) -> CheckResult:
    r = _Rand(seed, 40 + scale)
    x = r.normal(2, 2 * scale * scale, 3, 4)
    proj = r.normal(2, 2, 3 * scale, 4 * scale)
    return _compare(f"pixel_shuffle r={scale}", lambda v: ops.pixel_shuffle(v["x"], scale),
                    {"x": x}, {"x": ops.pixel_unshuffle(proj, scale)}, proj)


def _rep(v: dict) -> RepConvBranchSet:
    return RepConvBranchSet(ConvKernel(v["w3"], v["b3"]), ConvKernel(v["w1"], v["b1"]), True)


def check_rep_branches(seed: int) -> CheckResult:
    r = _Rand(seed, 50)
    vals = {"x": r.normal(1, 3, 5, 5), "w3": r.normal(3, 3, 3, 3, std=0.5), "b3": r.normal(3),
            "w1": r.normal(3, 3, 1, 1, std=0.5), "b1": r.normal(3)}
    proj = r.normal(1, 3, 5, 5)
    d_x, grads = _rep(vals).backward(vals["x"], proj)
    return _compare("rep branch set 3x3+1x1+id", lambda v: _rep(v).forward(v["x"]), vals,
                    {"x": d_x, "w3": grads[0][0], "b3": grads[0][1],
                     "w1": grads[1][0], "b1": grads[1][1]}, proj)


def check_loss(seed: int, kind: str) -> CheckResult:
    """Loss gradients with prediction and target kept apart (L1 has a kink)."""
    r = _Rand(seed, 60)
    target = r.normal(2, 3, 4, 4)
    pred = target + r.away_from_zero(2, 3, 4, 4, margin=0.1)
    loss = l1_loss if kind == "l1" else l2_loss
    _, g = loss(pred, target)

    def fn(v):
        diff = v["pred"] - target
        # the loss value is recomputed at the reference precision
        return np.array([np.mean(np.abs(diff)) if kind == "l1" else np.mean(diff * diff)])

    return _compare(f"{kind} loss", fn, {"pred": pred}, {"pred": g}, np.ones(1))


def _random_model(cfg: SpanConfig, seed: int, salt: int) -> SpanModel:
    """Tiny 64-bit model with non-zero biases."""
    model = init_model(cfg, mix_seed(seed, salt), dtype=np.float64)
    r = _Rand(seed, salt + 1)
    for k, v in model.params.items():
        if k.endswith(".bias"):
            v[...] = r.normal(*v.shape, std=0.1)
    return model


def _block_layers(model: SpanModel, i: int) -> list[RepConvBranchSet]:
    return [model.layer(i, j) for j in range(3)]


def check_spab(seed: int, variant: str) -> CheckResult:
    cfg = with_variant(TINY, variant)
    model = _random_model(cfg, seed, 70)
    r = _Rand(seed, 72)
    o_prev = r.normal(1, cfg.channels, 6, 6)
    layers = _block_layers(model, 0)
    a, b = model.a, model.b
    out, tape = spab_forward(o_prev, layers, cfg, True, a, b)
    proj = r.normal(*out.shape)
    d_prev, grads, _ = spab_backward(tape, proj, layers, cfg, a, b)
    vals, analytic = {"o_prev": o_prev}, {"o_prev": d_prev}
    for j in range(3):
        for (wn, bn), (dw, db) in zip(model.layer_param_names(0, j), grads[j]):
            vals[wn], vals[bn] = model.params[wn], model.params[bn]
            analytic[wn], analytic[bn] = dw, db
    vals.update({k: model.params[k] for k in ("attention.a", "attention.b")})

    def fn(v):
        m = SpanModel(cfg, v, model.fused)
        return spab_forward(v["o_prev"], _block_layers(m, 0), cfg, False, m.a, m.b)[0]

    return _compare(f"spab block ({variant})", fn, vals, analytic, proj, check=list(analytic))


def check_model(seed: int, variant: str = "span", cfg: SpanConfig | None = None,
                name: str | None = None) -> CheckResult:
    """Every parameter (and a, b) of a tiny model."""
    cfg = with_variant(cfg or TINY, variant)
    model = _random_model(cfg, seed, 80)
    r = _Rand(seed, 82)
    x = r.rng.uniform_array(int(np.prod(TINY_INPUT))).reshape(TINY_INPUT)
    out, tape = span_forward(x, model, train=True)
    proj = r.normal(*out.shape)
    grads = span_backward(tape, proj, model)
    keys = list(model.params)
    if not cfg.use_attention:
        # a and b are inert without attention; their gradient is exactly zero
        keys = [k for k in keys if not k.startswith("attention.")]
    ref_x = x.astype(REFERENCE_DTYPE)
    return _compare(name or f"span model ({variant})",
                    lambda v: span_forward(ref_x, SpanModel(cfg, v, model.fused))[0],
                    model.params, grads, proj, check=keys)


def check_factor_identity(seed: int, residual: bool) -> CheckResult:
    """Block parameter gradients equal the conv-chain gradients seeded with
    ``d_out * attention_grad_factor(H, O_prev)``."""
    t0 = time.perf_counter()
    cfg = with_variant(TINY, "span" if residual else "nores")
    model = _random_model(cfg, seed, 90)
    r = _Rand(seed, 92)
    o_prev = r.normal(1, cfg.channels, 6, 6)
    layers = _block_layers(model, 0)
    out, tape = spab_forward(o_prev, layers, cfg, True, model.a, model.b)
    d_out = r.normal(*out.shape)
    _, grads, _ = spab_backward(tape, d_out, layers, cfg, model.a, model.b)

    d_h = d_out * attention_grad_factor(tape.h, tape.o_prev, cfg, model.a, model.b)
    # plain chain rule through the three convs, written out independently
    z1 = ops.conv2d_forward(o_prev, layers[0].main) + ops.conv2d_forward(o_prev, layers[0].side) + o_prev
    s1 = ops.activation(z1, cfg.activation)
    z2 = ops.conv2d_forward(s1, layers[1].main) + ops.conv2d_forward(s1, layers[1].side) + s1
    s2 = ops.activation(z2, cfg.activation)
    chain = [None, None, None]
    g3 = ops.conv2d_backward(s2, layers[2].main, d_h)
    g3s = ops.conv2d_backward(s2, layers[2].side, d_h)
    chain[2] = [(g3.d_weight, g3.d_bias), (g3s.d_weight, g3s.d_bias)]
    d_z2 = ops.activation_backward(z2, g3.d_input + g3s.d_input + d_h, cfg.activation)
    g2 = ops.conv2d_backward(s1, layers[1].main, d_z2)
    g2s = ops.conv2d_backward(s1, layers[1].side, d_z2)
    chain[1] = [(g2.d_weight, g2.d_bias), (g2s.d_weight, g2s.d_bias)]
    d_z1 = ops.activation_backward(z1, g2.d_input + g2s.d_input + d_z2, cfg.activation)
    g1 = ops.conv2d_backward(o_prev, layers[0].main, d_z1)
    g1s = ops.conv2d_backward(o_prev, layers[0].side, d_z1)
    chain[0] = [(g1.d_weight, g1.d_bias), (g1s.d_weight, g1s.d_bias)]

    worst, count = 0.0, 0
    for j in range(3):
        for got, want in zip(grads[j], chain[j]):
            for g, w in zip(got, want):
                worst = max(worst, float(np.max(np.abs(g - w))))
                count += g.size
    label = "factor identity (H+O)s'+s" if residual else "factor identity H*s'+s"
    return CheckResult(label, worst, count, IDENTITY_TOL, time.perf_counter() - t0, kind="abs")


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


def run_suite(seed: int = 0, quick: bool = False,
              on_result: Callable[[CheckResult], None] | None = None) -> GradcheckReport:
    """The full FD suite. ``quick`` skips the model variants other than SPAN."""
    checks: list[Callable[[], CheckResult]] = [
        lambda: check_conv(seed, PaddingMode.ZERO),
        lambda: check_conv(seed, PaddingMode.REPLICATE),
        lambda: check_conv(seed, PaddingMode.ZERO, k=1),
        lambda: check_activation(seed, ops.Activation.SILU),
        lambda: check_activation(seed, ops.Activation.LEAKY_RELU),
        lambda: check_attention(seed),
        lambda: check_pixel_shuffle(seed, 2),
        lambda: check_pixel_shuffle(seed, 3),
        lambda: check_rep_branches(seed),
        lambda: check_loss(seed, "l1"),
        lambda: check_loss(seed, "l2"),
        lambda: check_spab(seed, "span"),
        lambda: check_spab(seed, "nores"),
        lambda: check_spab(seed, "noatt"),
        lambda: check_spab(seed, "empty"),
        lambda: check_factor_identity(seed, residual=False),
        lambda: check_factor_identity(seed, residual=True),
        lambda: check_model(seed, "span"),
    ]
    if not quick:
        checks += [
            lambda: check_model(seed, "noatt"),
            lambda: check_model(seed, "nores"),
            lambda: check_model(seed, "empty"),
            lambda: check_model(seed, cfg=replace(TINY, padding=PaddingMode.REPLICATE),
                                name="span model (replicate pad)"),
        ]
    report = GradcheckReport()
    for check in checks:
        res = check()
        report.results.append(res)
        if on_result:
            on_result(res)
    return report


@contextlib.contextmanager
def corrupted_backward(scale: float = 1.001):
    """Test hook: skew the attention backward so gradcheck must fail."""
    original = ops.act_attention_backward

    def skewed(x, d_out, a=1.0, b=1.0):
        g = original(x, d_out, a, b)
        return ops.OpGrad(g.d_input * scale, g.d_weight, g.d_bias)

    ops.act_attention_backward = skewed
    try:
        yield
    finally:
        ops.act_attention_backward = original


__all__ = ["CheckResult", "GradcheckReport", "run_suite", "corrupted_backward", "numeric_gradient",
           "rel_error", "check_model", "check_factor_identity", "TINY", "FD_STEP", "REL_TOL"]
