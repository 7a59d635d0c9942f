"""Acceptance criteria, one test per criterion, each printing a verdict line.

Criterion 8 is informational and costs about nine desk training runs; it runs
only when ``SPAN_SR_SLOW=1``.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from span_sr import gradcheck as gc
from span_sr import io, ops
from span_sr.cli import main
from span_sr.metrics import evaluate, psnr, ssim
from span_sr.model import (PRESETS, SCALES, SpanConfig, attention_grad_factor, fuse_model,
                           init_model, parameter_count, span_forward, with_variant)
from span_sr.resample import bicubic_downscale
from span_sr.tensor import Xoshiro256
from span_sr.toy import toy_dataset
from span_sr.train import TRAIN_PRESETS, TrainConfig, lr_at, train

from oracles import naive_psnr, naive_ssim

SLOW = os.environ.get("SPAN_SR_SLOW") == "1"

# desk overfit protocol: C'=16, B=6, r=2, four 64x64 images, 2000 iterations
DESK_MODEL = PRESETS["desk"]
DESK_TRAIN = TRAIN_PRESETS["desk"]
DESK_IMAGES = 4
DESK_SIZE = 64


def desk_run(variant: str = "span", seed: int = 0):
    images = toy_dataset(DESK_IMAGES, DESK_SIZE)
    model = init_model(with_variant(DESK_MODEL, variant), seed)
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        res = train(model, images, replace(DESK_TRAIN, seed=seed))
        seconds = time.perf_counter() - t0
    return model, images, res, seconds


def test_c01_gradient_fidelity(verdict):
    with threadpool_limits(limits=1):
        res = gc.check_model(0, "span")
    ok = res.max_error <= 1e-5 and res.seconds < 60.0
    verdict(1, ok, f"tiny SPAN FD check over {res.count} scalars: max rel err "
                   f"{res.max_error:.2e} (tol 1e-5), {res.seconds:.1f} s (limit 60 s)")
    assert gc.TINY == SpanConfig(scale=2, channels=4, blocks=2) and gc.TINY_INPUT == (1, 3, 8, 8)
    assert ok


def test_c02_attention_factor_identity(verdict):
    chain = gc.check_factor_identity(0, residual=False)
    # the factor itself against H*s'(H) + s(H) with s = logistic - 1/2
    h = np.random.default_rng(2).normal(0, 3, (2, 4, 5, 5))
    sig = 1.0 / (1.0 + np.exp(-h))
    want = h * sig * (1.0 - sig) + (sig - 0.5)
    got = attention_grad_factor(h, np.zeros_like(h), with_variant(gc.TINY, "nores"))
    closed = float(np.max(np.abs(got - want)))
    ok = chain.max_error <= 1e-10 and closed <= 1e-10
    verdict(2, ok, f"no-residual block grads vs conv chain * factor: {chain.max_error:.1e}; "
                   f"factor vs closed form: {closed:.1e} (tol 1e-10)")
    assert ok


def test_c03_activation_conditions(verdict):
    rng = Xoshiro256(3)
    u = rng.uniform_array(200_000).reshape(2, -1)
    # magnitudes log-uniform over [1e-8, 1e2], random sign
    x = np.where(u[0] < 0.5, -1.0, 1.0) * 10.0 ** (-8.0 + 10.0 * u[1])
    assert x.size == 100_000 and np.all(x != 0)
    s = ops.act_attention(x)
    odd = float(np.max(np.abs(ops.act_attention(-x) + s)))
    signed = bool(np.all(x * s > 0))
    # tanh saturates to 1.0 in float64, so the open bound is checked as closed
    bounded = bool(np.all(np.abs(s) <= 0.5))
    ok = odd <= 1e-12 and signed
    verdict(3, ok, f"1e5 samples: max |s(-x)+s(x)| = {odd:.1e} (tol 1e-12); x*s(x) > 0 for "
                   f"all: {signed}; |s| <= 0.5: {bounded}")
    assert ok and bounded


def test_c04_reparameterization(verdict):
    worst = 0.0
    for name in ("span-x4", "desk"):
        model = init_model(PRESETS[name], 4)
        fused = fuse_model(model)
        rng = Xoshiro256(40)
        for _ in range(20 if name == "span-x4" else 5):
            x = rng.uniform_array(3 * 24 * 20).reshape(1, 3, 24, 20).astype(np.float32)
            a = span_forward(x, model)[0]
            b = span_forward(x, fused)[0]
            assert a.dtype == np.float32 and b.dtype == np.float32
            worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst <= 1e-4
    verdict(4, ok, f"fused vs unfused, 20 inputs (x4, C'=48 B=6) + 5 (desk), float32: "
                   f"max abs {worst:.2e} (tol 1e-4)")
    assert ok


def test_c05_pixel_shuffle_bijection(verdict):
    rng = np.random.default_rng(5)
    trials = 0
    ok = True
    for r in (1, 2, 3, 4):
        for _ in range(25):
            n, c, h, w = (int(v) for v in rng.integers(1, 5, 4))
            x = rng.random((n, c * r * r, h, w)).astype(np.float32)
            y = ops.pixel_shuffle(x, r)
            ok &= y.shape == (n, c, h * r, w * r)
            ok &= np.array_equal(ops.pixel_unshuffle(y, r), x)
            ok &= np.array_equal(ops.pixel_shuffle(ops.pixel_unshuffle(y, r), r), y)
            trials += 1
    verdict(5, bool(ok), f"unshuffle(shuffle(x)) == x bit-exact on {trials} random shapes, "
                         f"r in 1..4")
    assert ok


def test_c06_parameter_band(verdict):
    count = parameter_count(SpanConfig(scale=4, channels=48, blocks=6), fused=True)
    assert count == fuse_model(init_model(PRESETS["span-x4"], 0)).num_params()
    ok = 470_000 <= count <= 500_000
    verdict(6, ok, f"fused r=4 C'=48 B=6: {count:,} params; published 498K, gap "
                   f"{498_000 - count:,} ({(498_000 - count) / 498_000:.1%}); band [470K, 500K]")
    assert ok


def test_c07_desk_overfit(verdict):
    model, images, res, seconds = desk_run()
    pairs = [(f"toy{i}", bicubic_downscale(hr, 2), hr) for i, hr in enumerate(images)]
    rep = evaluate(model, pairs, 2)
    gain = rep.mean_psnr - rep.mean_bicubic_psnr
    early = float(np.mean(res.losses[:10]))
    final = float(np.mean(res.losses[-10:]))
    ok = gain >= 1.0 and seconds <= 900.0
    verdict(7, ok, f"desk overfit 2000 iters: train PSNR {rep.mean_psnr:.2f} dB vs bicubic "
                   f"{rep.mean_bicubic_psnr:.2f} dB (+{gain:.2f}, need +1.00); {seconds:.0f} s "
                   f"single-threaded (limit 900 s); L1 {early:.4f} -> {final:.4f}")
    assert len(res.losses) == 2000
    assert final < 0.25 * early
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(not SLOW, reason="informational; set SPAN_SR_SLOW=1 (about 9 desk runs)")
def test_c08_ablation_direction(verdict):
    wins = 0
    details = []
    for seed in range(3):
        final = {}
        for variant in ("span", "noatt", "empty"):
            _, _, res, _ = desk_run(variant, seed)
            final[variant] = float(np.mean(res.losses[-10:]))
        won = final["span"] <= final["noatt"] and final["span"] <= final["empty"]
        wins += won
        details.append(f"seed {seed}: " + ", ".join(f"{k} {v:.4f}" for k, v in final.items()))
    verdict(8, None, f"full SPAN lowest final loss in {wins}/3 seeds (expected >= 2, not gated); "
                     + "; ".join(details))


def test_c09_metric_oracles(verdict):
    rng = np.random.default_rng(9)
    worst_p = worst_s = 0.0
    for _ in range(3):
        a = rng.random((1, 3, 32, 32))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        worst_p = max(worst_p, abs(psnr(a, b) - naive_psnr(a, b, 0)))
        worst_s = max(worst_s, abs(ssim(a, b) - naive_ssim(a, b, 0)))
    y = np.full((1, 1, 16, 16), 128.0)
    uniform = psnr(y, y + 1.0)
    self_ssim = ssim(a, a)
    ok = worst_p <= 1e-6 and worst_s <= 1e-6 and abs(uniform - 48.1308) <= 1e-3 and self_ssim == 1.0
    verdict(9, ok, f"vs loop oracles: psnr {worst_p:.1e}, ssim {worst_s:.1e} (tol 1e-6); "
                   f"uniform-1 psnr {uniform:.4f} dB; ssim(a,a) = {self_ssim!r}")
    assert ok


def test_c10_determinism(verdict, tmp_path):
    data = tmp_path / "data"
    (data / "HR").mkdir(parents=True)
    for i, img in enumerate(toy_dataset(DESK_IMAGES, DESK_SIZE)):
        io.save_png(img, data / "HR" / f"toy{i}.png")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["--deterministic", "train", "--preset", "desk", "--iterations", "20",
                     "--seed", "7", "--data", str(data), "--out", str(out)]) == 0
        outs.append((out / "weights.spanw").read_bytes())
    ok = outs[0] == outs[1]
    verdict(10, ok, f"two deterministic cmd_train runs (desk, 20 iterations): weight files "
                    f"{'byte-identical' if ok else 'DIFFER'} ({len(outs[0]):,} bytes)")
    assert ok


def _random_model(rng: np.random.Generator):
    cfg = SpanConfig(
        scale=int(rng.choice(SCALES)), channels=int(rng.integers(1, 7)),
        blocks=int(rng.integers(1, 4)), image_channels=int(rng.choice([1, 3])),
        use_residual=bool(rng.integers(2)), use_attention=bool(rng.integers(2)),
        activation=str(rng.choice(["silu", "leaky_relu"])),
        padding=str(rng.choice(["zero", "replicate"])),
        rep_1x1=bool(rng.integers(2)), rep_identity=bool(rng.integers(2)),
        learn_a=bool(rng.integers(2)), learn_b=bool(rng.integers(2)))
    model = init_model(cfg, int(rng.integers(1 << 31)))
    for v in model.params.values():
        v[...] = rng.standard_normal(v.shape).astype(np.float32)
    return fuse_model(model) if rng.integers(2) else model


def test_c11_persistence(verdict):
    rng = np.random.default_rng(11)
    exact = 0
    for _ in range(1000):
        model = _random_model(rng)
        back = io.weights_from_bytes(io.weights_to_bytes(model))
        exact += (back.config == model.config and back.fused == model.fused
                  and back.params.keys() == model.params.keys()
                  and all(np.array_equal(back.params[k], model.params[k]) for k in model.params))
    buf = io.weights_to_bytes(init_model(SpanConfig(scale=2, channels=4, blocks=2), 0))
    mutations, detected, misclassified = 10_000, 0, 0
    for _ in range(mutations):
        pos = int(rng.integers(len(buf)))
        mutated = bytearray(buf)
        mutated[pos] ^= int(rng.integers(1, 256))
        try:
            io.weights_from_bytes(bytes(mutated))
        except io.WeightFileError as exc:
            detected += 1
            want = io.BadMagicError if pos < len(io.MAGIC) else io.CrcError
            misclassified += not isinstance(exc, want)
    ok = exact == 1000 and detected == mutations
    verdict(11, ok, f"{exact}/1000 random models round-trip bit-exact; {detected}/{mutations} "
                    f"single-byte flips detected ({misclassified} not reported as magic/CRC)")
    assert ok and misclassified == 0


def test_c12_lr_schedule(verdict):
    cfg = TRAIN_PRESETS["full"]
    p = cfg.halving_period
    before, after = lr_at(p - 1, cfg), lr_at(p, cfg)
    ok = before == 5e-4 and after == 2.5e-4 and lr_at(0, cfg) == 5e-4
    verdict(12, ok, f"lr_at({p - 1}) = {before!r}, lr_at({p}) = {after!r} (exact)")
    assert ok and TrainConfig().lr == 5e-4
