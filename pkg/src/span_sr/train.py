"""Losses, Adam, learning-rate schedule, patch sampling and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import SpanModel, span_backward, span_forward
from .resample import bicubic_downscale
from .tensor import ShapeError, Xoshiro256, as_tensor4, mix_seed

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    patch_size: int = 256
    lr: float = 5e-4
    halving_period: int = 200_000
    iterations: int = 1_000_000
    loss: str = "l1"
    seed: int = 0
    stages: int = 3
    log_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "halving_period", "stages", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError("lr must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_pair(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss: shape mismatch {pred.shape} vs {target.shape}")
    return pred, target.astype(pred.dtype, copy=False)


def l1_loss(pred, target) -> tuple[float, np.ndarray]:
    pred, target = _check_pair(pred, target)
    diff = pred - target
    n = diff.size
    return float(np.mean(np.abs(diff), dtype=np.float64)), np.sign(diff) / pred.dtype.type(n)


def l2_loss(pred, target) -> tuple[float, np.ndarray]:
    pred, target = _check_pair(pred, target)
    diff = pred - target
    n = diff.size
    return float(np.mean(np.square(diff), dtype=np.float64)), diff * pred.dtype.type(2.0 / n)


LOSSES: dict[str, Callable] = {"l1": l1_loss, "l2": l2_loss}

TRAIN_PRESETS = {
    "full": TrainConfig(),
    "desk": TrainConfig(batch_size=8, patch_size=64, halving_period=1000, iterations=2000,
                        stages=1, log_every=10),
}


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, names: Sequence[str] | None = None) -> AdamState:
    """Bias-corrected Adam update applied to ``params`` in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves both parameters and state unchanged.
    """
    names = list(params) if names is None else list(names)
    for k in names:
        if grads[k].shape != params[k].shape:
            raise ShapeError(f"adam: grad {grads[k].shape} vs param {params[k].shape} for {k}")
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient for {k}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k in names:
        p, g = params[k], grads[k]
        dt = p.dtype.type
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
    return state


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return cfg.lr * 0.5 ** (iteration // cfg.halving_period)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def dihedral_augment(x, code: int) -> np.ndarray:
    """Apply one of the 8 square symmetries.

    ``code % 4`` counter-clockwise quarter turns, applied after a left-right
    mirror when ``code >= 4``. Codes 4..7 are their own inverses; the inverse
    of a pure rotation ``c`` is ``(4 - c) % 4``.
    """
    x = as_tensor4(x)
    if not 0 <= code < 8:
        raise ValueError(f"dihedral code must be in 0..7, got {code}")
    turns = code % 4
    if turns % 2 and x.shape[2] != x.shape[3]:
        raise ShapeError(f"rotation code {code} needs a square patch, got {x.shape[2:]}")
    if code >= 4:
        x = x[:, :, :, ::-1]
    return np.ascontiguousarray(np.rot90(x, turns, axes=(2, 3)))


def dihedral_inverse(code: int) -> int:
    return code if code >= 4 else (4 - code) % 4


def usable_images(images: Sequence[np.ndarray], patch_size: int) -> list[np.ndarray]:
    """Drop images smaller than the patch, with a warning for each."""
    keep = []
    for i, img in enumerate(images):
        img = as_tensor4(img)
        if img.shape[2] < patch_size or img.shape[3] < patch_size:
            log.warning("skipping image %d: %s smaller than patch %d", i, img.shape[2:], patch_size)
            continue
        keep.append(img)
    if not keep:
        raise ValueError(f"no training image is at least {patch_size}x{patch_size}")
    return keep


def sample_batch(dataset: Sequence[np.ndarray], cfg: TrainConfig, step: int, scale: int,
                 stage: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (LR, HR) batch for ``(cfg.seed, stage, step)``.

    ``dataset`` holds (1, C, H, W) HR images already filtered by
    :func:`usable_images`. Crops start on multiples of ``scale`` so the LR
    grid stays aligned.
    """
    p = cfg.patch_size
    if p % scale:
        raise ValueError(f"patch size {p} not divisible by scale {scale}")
    rng = Xoshiro256(mix_seed(cfg.seed, stage, step))
    hr = np.empty((cfg.batch_size, dataset[0].shape[1], p, p), dtype=dataset[0].dtype)
    for i in range(cfg.batch_size):
        img = dataset[rng.randbelow(len(dataset))]
        top = rng.randbelow((img.shape[2] - p) // scale + 1) * scale
        left = rng.randbelow((img.shape[3] - p) // scale + 1) * scale
        code = rng.randbelow(8)
        hr[i] = dihedral_augment(img[:, :, top:top + p, left:left + p], code)[0]
    return bicubic_downscale(hr, scale), hr


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    stage: int = 0
    iteration: int = 0  # within the current stage
    adam: AdamState = field(default_factory=AdamState)


@dataclass
class TrainResult:
    model: SpanModel
    state: TrainState
    losses: list[float]
    log_rows: list[tuple[int, float, float, float]]
    finished: bool


def train(model: SpanModel, dataset: Sequence[np.ndarray], cfg: TrainConfig,
          state: TrainState | None = None, stop_at: int | None = None,
          on_log: Callable[[tuple[int, float, float, float]], None] | None = None) -> TrainResult:
    """Run the sample/forward/loss/backward/Adam loop, updating ``model`` in place.

    Each stage restarts the LR schedule, the optimizer moments and the data
    stream. ``stop_at`` interrupts after that many global iterations so a
    run can be checkpointed and resumed bit-identically.
    """
    if cfg.patch_size % model.config.scale:
        raise ValueError(f"patch size {cfg.patch_size} not divisible by scale {model.config.scale}")
    data = usable_images(dataset, cfg.patch_size)
    data = [d.astype(model.dtype, copy=False) for d in data]
    state = state or TrainState()
    loss_fn = LOSSES[cfg.loss]
    names = model.trainable_names()
    losses: list[float] = []
    rows = []
    t0 = time.perf_counter()

    while state.stage < cfg.stages:
        while state.iteration < cfg.iterations:
            global_it = state.stage * cfg.iterations + state.iteration
            if stop_at is not None and global_it >= stop_at:
                return TrainResult(model, state, losses, rows, finished=False)
            lr_batch, hr_batch = sample_batch(data, cfg, state.iteration, model.config.scale,
                                              state.stage)
            pred, tape = span_forward(lr_batch, model, train=True)
            loss, d_pred = loss_fn(pred, hr_batch)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at stage {state.stage} iteration {state.iteration} "
                    f"(batch seed {cfg.seed}/{state.stage}/{state.iteration})")
            grads = span_backward(tape, d_pred, model)
            lr = lr_at(state.iteration, cfg)
            adam_step(model.params, grads, state.adam, lr, names)
            losses.append(loss)
            state.iteration += 1
            if state.iteration % cfg.log_every == 0 or state.iteration == cfg.iterations:
                row = (global_it + 1, loss, lr, (time.perf_counter() - t0) * 1000.0)
                rows.append(row)
                if on_log:
                    on_log(row)
                log.debug("iter %d loss %.6f lr %.3g", *row[:3])
        state.stage += 1
        state.iteration = 0
        state.adam = AdamState()
    return TrainResult(model, state, losses, rows, finished=True)
