"""PNG codec boundary, the binary weight/checkpoint format, JSON run
configuration and the dataset directory convention.

Weight file layout (all integers little-endian)::

    b"SPANWT1\\0"
    u32 version | u32 scale | u32 image channels | u32 feature channels | u32 blocks
    u8 fused | u8 activation | u8 rep-branch mask | u8 variant flags
    f32 attention a | f32 attention b
    per tensor, in canonical order:
        u16 name length | UTF-8 name | 4 x u32 dims | f32 payload
    u32 CRC32 of every preceding byte

Activation codes: 0 SiLU, 1 LeakyReLU. Rep-branch mask bits: 1 = 3x3,
2 = 1x1, 4 = identity. Variant flag bits: 1 = no residual, 2 = no
attention, 4 = learnable a, 8 = learnable b, 16 = replicate padding.
Bias vectors are stored with dims (out, 1, 1, 1).

A checkpoint is a complete weight file followed by an optimizer section::

    b"SPANOPT1" | u32 version | u32 stage | u64 iteration | u64 adam step
    u32 moments flag | if set, m and v for every trainable parameter,
    stored as tensors named "m:<param>" / "v:<param>"
    u32 CRC32 of the optimizer section
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .model import (BRANCH_1X1, BRANCH_3X3, BRANCH_IDENTITY, PRESETS as MODEL_PRESETS,
                    SpanConfig, SpanModel, parameter_shapes)
from .ops import Activation, PaddingMode
from .resample import bicubic_downscale
from .tensor import as_tensor4
from .train import LOSSES, TRAIN_PRESETS, AdamState, TrainConfig, TrainState

log = logging.getLogger(__name__)

MAGIC = b"SPANWT1\0"
OPT_MAGIC = b"SPANOPT1"
FORMAT_VERSION = 1
OPT_VERSION = 1

_HEADER = struct.Struct("<5I4B2f")
_OPT_HEADER = struct.Struct("<IIQQI")
_ACTIVATION_CODES = {Activation.SILU: 0, Activation.LEAKY_RELU: 1}

FLAG_NO_RESIDUAL = 1
FLAG_NO_ATTENTION = 2
FLAG_LEARN_A = 4
FLAG_LEARN_B = 8
FLAG_REPLICATE = 16


class WeightFileError(ValueError):
    """Base class for unreadable weight or checkpoint files."""


class BadMagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class CrcError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


class ImageFormatError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid config: " + "; ".join(errors))


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def load_png(path) -> np.ndarray:
    """8-bit RGB or grayscale PNG as a (1, 3, H, W) float32 tensor in [0, 1].

    Grayscale is replicated to three channels.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: not a PNG file ({im.format})")
            mode = im.mode
            if mode not in ("RGB", "L"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {mode!r}; "
                                       "only 8-bit RGB or grayscale is accepted")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return (arr.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0))


def quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and round to the nearest 8-bit level (uint8, HWC)."""
    img = as_tensor4(img)
    if img.shape[0] != 1 or img.shape[1] not in (1, 3):
        raise ImageFormatError(f"can only encode a single 1- or 3-channel image, got {img.shape}")
    levels = np.rint(np.clip(img[0].astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    return levels.transpose(1, 2, 0)


def save_png(img, path) -> None:
    levels = quantize(img)
    mode = "L" if levels.shape[2] == 1 else "RGB"
    Image.fromarray(levels[:, :, 0] if mode == "L" else levels, mode=mode).save(Path(path),
                                                                              format="PNG")


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def _as_dims(arr: np.ndarray) -> tuple[int, int, int, int]:
    shape = tuple(arr.shape) + (1,) * (4 - arr.ndim)
    if len(shape) != 4:
        raise ValueError(f"cannot store rank-{arr.ndim} tensor")
    return shape


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    dims = _as_dims(arr)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return struct.pack("<H", len(raw)) + raw + struct.pack("<4I", *dims) + payload


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends after {len(self.buf)} bytes, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct | str):
        st = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return st.unpack(self.take(st.size))

    def expect_tensor(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        """Read one tensor, checking its name and dims before its payload.

        A mismatch means the bytes were altered, so it is reported as a
        CRC failure; running out of bytes while everything matched so far
        is a truncation.
        """
        raw = name.encode("utf-8")
        (n,) = self.unpack("<H")
        if n != len(raw):
            raise CrcError(f"corrupt tensor record (expected {name!r})")
        if self.take(n) != raw:
            raise CrcError(f"corrupt tensor name (expected {name!r})")
        dims = self.unpack("<4I")
        want = tuple(shape) + (1,) * (4 - len(shape))
        if dims != want:
            raise CrcError(f"tensor {name} has dims {dims}, expected {want}")
        count = int(np.prod(want))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)

    def check_crc(self, start: int) -> None:
        (crc,) = self.unpack("<I")
        actual = zlib.crc32(self.buf[start:self.pos - 4])
        if crc != actual:
            raise CrcError(f"CRC mismatch: stored {crc:#010x}, computed {actual:#010x}")


def _header_bytes(model: SpanModel) -> bytes:
    cfg = model.config
    flags = 0
    flags |= 0 if cfg.use_residual else FLAG_NO_RESIDUAL
    flags |= 0 if cfg.use_attention else FLAG_NO_ATTENTION
    flags |= FLAG_LEARN_A if cfg.learn_a else 0
    flags |= FLAG_LEARN_B if cfg.learn_b else 0
    flags |= FLAG_REPLICATE if cfg.padding is PaddingMode.REPLICATE else 0
    return MAGIC + _HEADER.pack(
        FORMAT_VERSION, cfg.scale, cfg.image_channels, cfg.channels, cfg.blocks,
        int(model.fused), _ACTIVATION_CODES[cfg.activation], cfg.branch_mask, flags,
        float(model.a), float(model.b))


def weights_to_bytes(model: SpanModel) -> bytes:
    """Canonical serialization; identical models give identical bytes."""
    parts = [_header_bytes(model)]
    for name in parameter_shapes(model.config, model.fused):
        parts.append(_pack_tensor(name, model.params[name]))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _check_magic(buf: bytes, start: int, magic: bytes) -> None:
    head = bytes(buf[start:start + len(magic)])
    if head != magic[:len(head)]:
        raise BadMagicError(f"bad magic {head!r}, expected {magic!r}")
    if len(head) < len(magic):
        raise TruncatedError(f"file ends inside the {magic!r} magic")


def _tail_crc_ok(buf: bytes, start: int = 0) -> bool:
    if len(buf) - start < 4:
        return False
    return zlib.crc32(buf[start:-4]) == struct.unpack("<I", buf[-4:])[0]


def _config_from_header(scale, img_c, chans, blocks, act, mask, flags) -> SpanConfig:
    codes = {v: k for k, v in _ACTIVATION_CODES.items()}
    if act not in codes:
        raise ValueError(f"unknown activation code {act}")
    if mask & ~(BRANCH_3X3 | BRANCH_1X1 | BRANCH_IDENTITY) or not mask & BRANCH_3X3:
        raise ValueError(f"bad branch mask {mask}")
    if flags & ~0x1F:
        raise ValueError(f"unknown variant flags {flags:#x}")
    return SpanConfig(
        scale=scale, channels=chans, blocks=blocks, image_channels=img_c,
        use_residual=not flags & FLAG_NO_RESIDUAL,
        use_attention=not flags & FLAG_NO_ATTENTION,
        activation=codes[act],
        padding=PaddingMode.REPLICATE if flags & FLAG_REPLICATE else PaddingMode.ZERO,
        rep_1x1=bool(mask & BRANCH_1X1), rep_identity=bool(mask & BRANCH_IDENTITY),
        learn_a=bool(flags & FLAG_LEARN_A), learn_b=bool(flags & FLAG_LEARN_B))


def _parse_weights(buf: bytes) -> tuple[SpanModel, int]:
    """Parse the weight file at the start of ``buf``; return (model, bytes used).

    Check order: magic, then integrity (CRC), then version.
    """
    _check_magic(buf, 0, MAGIC)
    r = _Reader(buf, len(MAGIC))
    (version, scale, img_c, chans, blocks, fused, act, mask, flags, a, b) = r.unpack(_HEADER)
    if version != FORMAT_VERSION:
        if _tail_crc_ok(buf):
            raise VersionError(f"unsupported weight format version {version}")
        raise CrcError(f"corrupt header (version field reads {version})")
    try:
        if fused > 1:
            raise ValueError(f"bad fused flag {fused}")
        cfg = _config_from_header(scale, img_c, chans, blocks, act, mask, flags)
        shapes = parameter_shapes(cfg, bool(fused))
    except (ValueError, OverflowError) as exc:
        raise CrcError(f"corrupt header: {exc}") from exc
    params = {name: r.expect_tensor(name, shape) for name, shape in shapes.items()}
    r.check_crc(0)
    params["attention.a"] = np.array([a], dtype=np.float32)
    params["attention.b"] = np.array([b], dtype=np.float32)
    return SpanModel(cfg, params, fused=bool(fused)), r.pos


def weights_from_bytes(buf: bytes) -> SpanModel:
    """Decode a weight file; a trailing optimizer section is ignored."""
    model, used = _parse_weights(buf)
    rest = buf[used:]
    if rest and not rest.startswith(OPT_MAGIC[:len(rest)]):
        raise WeightFileError(f"{len(rest)} unexpected trailing bytes")
    return model


def save_weights(model: SpanModel, path) -> None:
    Path(path).write_bytes(weights_to_bytes(model))


def load_weights(path) -> SpanModel:
    """Load a weight file (or the weights part of a checkpoint)."""
    return weights_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _moment_names(model: SpanModel) -> list[str]:
    return model.trainable_names()


def checkpoint_to_bytes(model: SpanModel, state: TrainState) -> bytes:
    adam = state.adam
    names = _moment_names(model)
    present = [k in adam.m for k in names]
    if any(present) and not all(present):
        raise ValueError("optimizer state covers only some parameters")
    section = [OPT_MAGIC, _OPT_HEADER.pack(OPT_VERSION, state.stage, state.iteration, adam.t,
                                           int(all(present) and bool(names)))]
    if all(present) and names:
        for k in names:
            section.append(_pack_tensor(f"m:{k}", adam.m[k]))
            section.append(_pack_tensor(f"v:{k}", adam.v[k]))
    body = b"".join(section)
    return weights_to_bytes(model) + body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(buf: bytes) -> tuple[SpanModel, TrainState]:
    model, start = _parse_weights(buf)
    if len(buf) == start:
        raise TruncatedError("weight file has no optimizer section")
    _check_magic(buf, start, OPT_MAGIC)
    r = _Reader(buf, start + len(OPT_MAGIC))
    version, stage, iteration, t, has_moments = r.unpack(_OPT_HEADER)
    if version != OPT_VERSION:
        if _tail_crc_ok(buf, start):
            raise VersionError(f"unsupported optimizer section version {version}")
        raise CrcError(f"corrupt optimizer header (version field reads {version})")
    if has_moments > 1:
        raise CrcError(f"corrupt optimizer header (moment flag {has_moments})")
    adam = AdamState(t=t)
    if has_moments:
        for k in _moment_names(model):
            shape = model.params[k].shape
            adam.m[k] = r.expect_tensor(f"m:{k}", shape)
            adam.v[k] = r.expect_tensor(f"v:{k}", shape)
    r.check_crc(start)
    if r.pos != len(buf):
        raise WeightFileError(f"{len(buf) - r.pos} unexpected trailing bytes")
    return model, TrainState(stage=stage, iteration=iteration, adam=adam)


def save_checkpoint(model: SpanModel, state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, state))


def load_checkpoint(path) -> tuple[SpanModel, TrainState]:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

CONFIG_PRESETS = {
    "span-x4": ("span-x4", "full"),
    "span-x2": ("span-x2", "full"),
    "span-s-x4": ("span-s-x4", "full"),
    "desk": ("desk", "desk"),
}
# older names for the full-scale presets, still accepted in config files
PRESET_ALIASES = {"paper-x4": "span-x4", "paper-x2": "span-x2", "paper-s-x4": "span-s-x4"}

_MODEL_KEYS = {f.name: f.type for f in fields(SpanConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_BOOL_MODEL_KEYS = {"use_residual", "use_attention", "rep_1x1", "rep_identity",
                    "learn_a", "learn_b"}
_INT_KEYS = {"scale", "channels", "blocks", "image_channels", "batch_size", "patch_size",
             "halving_period", "iterations", "seed", "stages", "log_every"}
_NONNEG_KEYS = {"iterations", "seed"}


def _check_value(section: str, key: str, value, errors: list[str]):
    where = f"{section}.{key}"
    if key in _BOOL_MODEL_KEYS:
        if not isinstance(value, bool):
            errors.append(f"{where}: expected true/false, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{where}: expected an integer, got {value!r}")
        elif value < 0 or (value == 0 and key not in _NONNEG_KEYS):
            errors.append(f"{where}: must be {'non-negative' if key in _NONNEG_KEYS else 'positive'}, "
                          f"got {value}")
        return value
    if key == "lr":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
            errors.append(f"{where}: expected a positive number, got {value!r}")
        return float(value) if isinstance(value, (int, float)) else value
    if key == "loss":
        if value not in LOSSES:
            errors.append(f"{where}: expected one of {sorted(LOSSES)}, got {value!r}")
        return value
    if key == "activation":
        try:
            return Activation(value)
        except ValueError:
            errors.append(f"{where}: expected one of {[a.value for a in Activation]}, got {value!r}")
        return value
    if key == "padding":
        try:
            return PaddingMode(value)
        except ValueError:
            errors.append(f"{where}: expected one of {[p.value for p in PaddingMode]}, got {value!r}")
        return value
    return value


def parse_config(doc) -> tuple[SpanConfig, TrainConfig]:
    """Validate a config document; every problem is collected before raising.

    Schema: ``{"preset": name?, "model": {...}?, "train": {...}?}`` where the
    sections take the field names of :class:`SpanConfig` and
    :class:`TrainConfig`. The preset defaults to ``"span-x4"``.
    """
    errors: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError([f"top level must be an object, got {type(doc).__name__}"])
    for key in doc:
        if key not in ("preset", "model", "train"):
            errors.append(f"{key}: unknown key")
    preset = doc.get("preset", "span-x4")
    preset = PRESET_ALIASES.get(preset, preset) if isinstance(preset, str) else preset
    if preset not in CONFIG_PRESETS:
        errors.append(f"preset: unknown preset {preset!r}; expected one of {sorted(CONFIG_PRESETS)}")
        preset = "span-x4"
    model_name, train_name = CONFIG_PRESETS[preset]
    overrides = {}
    for section, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS)):
        sec = doc.get(section, {})
        if not isinstance(sec, dict):
            errors.append(f"{section}: must be an object")
            sec = {}
        vals = {}
        for key, value in sec.items():
            if key not in allowed:
                errors.append(f"{section}.{key}: unknown key")
                continue
            vals[key] = _check_value(section, key, value, errors)
        overrides[section] = vals
    if errors:
        raise ConfigError(errors)
    try:
        model_cfg = replace(MODEL_PRESETS[model_name], **overrides["model"])
    except ValueError as exc:
        errors.append(f"model: {exc}")
    try:
        train_cfg = replace(TRAIN_PRESETS[train_name], **overrides["train"])
    except ValueError as exc:
        errors.append(f"train: {exc}")
    if not errors and train_cfg.patch_size % model_cfg.scale:
        errors.append(f"train.patch_size: {train_cfg.patch_size} not divisible by "
                      f"model.scale {model_cfg.scale}")
    if errors:
        raise ConfigError(errors)
    return model_cfg, train_cfg


def load_config(path) -> tuple[SpanConfig, TrainConfig]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return parse_config(doc)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """``root/HR/*.png`` with optional ``root/LR/X<r>/<stem>.png`` pairs."""

    root: Path
    hr_dir: str = "HR"
    lr_dir: str = "LR"
    pattern: str = "*.png"
    degrade: bool = False

    def hr_files(self) -> list[Path]:
        hr = Path(self.root) / self.hr_dir
        if not hr.is_dir():
            raise FileNotFoundError(f"dataset HR directory not found: {hr}")
        files = sorted(hr.glob(self.pattern))
        if not files:
            raise FileNotFoundError(f"no images matching {self.pattern} in {hr}")
        return files

    def lr_path(self, stem: str, scale: int) -> Path:
        return Path(self.root) / self.lr_dir / f"X{scale}" / f"{stem}.png"


def modcrop(img: np.ndarray, r: int) -> np.ndarray:
    h, w = img.shape[2:]
    return np.ascontiguousarray(img[:, :, :h - h % r, :w - w % r])


def load_hr_images(spec: DatasetSpec) -> list[tuple[str, np.ndarray]]:
    return [(p.stem, load_png(p)) for p in spec.hr_files()]


def load_pairs(spec: DatasetSpec, scale: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(name, LR, HR) triples; LR comes from disk unless missing or ``degrade``."""
    pairs = []
    for stem, hr in load_hr_images(spec):
        lr_path = spec.lr_path(stem, scale)
        if not spec.degrade and lr_path.exists():
            pairs.append((stem, load_png(lr_path), hr))
        else:
            hr = modcrop(hr, scale)
            pairs.append((stem, bicubic_downscale(hr, scale), hr))
    return pairs


def config_to_dict(model_cfg: SpanConfig, train_cfg: TrainConfig) -> dict:
    def plain(v):
        return v.value if hasattr(v, "value") else v
    return {"model": {f.name: plain(getattr(model_cfg, f.name)) for f in fields(SpanConfig)},
            "train": {f.name: plain(getattr(train_cfg, f.name)) for f in fields(TrainConfig)}}


