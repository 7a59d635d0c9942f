"""PNG codec, weight files, checkpoints, run configs and dataset loading."""

import json
import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from span_sr import io
from span_sr.model import PRESETS, SpanConfig, fuse_model, init_model
from span_sr.resample import bicubic_downscale
from span_sr.toy import toy_dataset
from span_sr.train import TrainConfig, TrainState, train

SMALL = SpanConfig(scale=2, channels=4, blocks=2)


def same_params(a, b):
    return a.params.keys() == b.params.keys() and all(
        np.array_equal(a.params[k], b.params[k]) for k in a.params)


class TestPng:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        levels = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        Image.fromarray(levels, "RGB").save(tmp_path / "a.png")
        img = io.load_png(tmp_path / "a.png")
        assert img.shape == (1, 3, 5, 7) and img.dtype == np.float32
        io.save_png(img, tmp_path / "b.png")
        assert np.array_equal(np.asarray(Image.open(tmp_path / "b.png")), levels)

    def test_grayscale_replicated(self, tmp_path):
        levels = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        Image.fromarray(levels, "L").save(tmp_path / "g.png")
        img = io.load_png(tmp_path / "g.png")
        assert img.shape == (1, 3, 3, 4)
        assert np.array_equal(img[0, 0], img[0, 2]) and np.array_equal(img[0, 1] * 255, levels)

    def test_quantize_clamps_and_rounds(self):
        x = np.array([-0.2, 0.5 / 255, 1.49 / 255, 2.0], dtype=np.float64).reshape(1, 1, 1, 4)
        assert io.quantize(x).reshape(-1).tolist() == [0, 0, 1, 255]

    @pytest.mark.parametrize("image", [
        Image.fromarray(np.full((4, 4), 1000, dtype=np.uint16)),
        Image.new("P", (4, 4)),
    ], ids=["16bit", "palette"])
    def test_rejected_modes(self, tmp_path, image):
        image.save(tmp_path / "x.png")
        with pytest.raises(io.ImageFormatError):
            io.load_png(tmp_path / "x.png")

    def test_rgba_rejected(self, tmp_path):
        Image.new("RGBA", (3, 3)).save(tmp_path / "x.png")
        with pytest.raises(io.ImageFormatError):
            io.load_png(tmp_path / "x.png")

    def test_not_png(self, tmp_path):
        Image.new("RGB", (3, 3)).save(tmp_path / "x.bmp", format="BMP")
        with pytest.raises(io.ImageFormatError):
            io.load_png(tmp_path / "x.bmp")
        (tmp_path / "y.png").write_bytes(b"garbage")
        with pytest.raises(OSError):
            io.load_png(tmp_path / "y.png")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            io.load_png(tmp_path / "nope.png")


class TestWeights:
    @pytest.mark.parametrize("cfg", [
        SMALL,
        replace(SMALL, use_residual=False, activation="leaky_relu", padding="replicate"),
        replace(SMALL, use_attention=False, rep_1x1=False, learn_a=True, learn_b=True, scale=3),
        PRESETS["desk"],
    ])
    def test_round_trip(self, cfg):
        model = init_model(cfg, 3)
        model.params["attention.a"][0] = 1.25
        back = io.weights_from_bytes(io.weights_to_bytes(model))
        assert back.config == cfg and not back.fused and same_params(model, back)

    def test_fused_round_trip(self, tmp_path):
        fused = fuse_model(init_model(SMALL, 1))
        io.save_weights(fused, tmp_path / "w.spanw")
        back = io.load_weights(tmp_path / "w.spanw")
        assert back.fused and same_params(fused, back)
        with pytest.raises(ValueError):
            fuse_model(back)

    def test_layout(self):
        model = init_model(SMALL, 0)
        buf = io.weights_to_bytes(model)
        assert buf[:8] == io.MAGIC
        assert struct.unpack_from("<I", buf, 8)[0] == io.FORMAT_VERSION
        assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])
        payload = sum(v.size for k, v in model.params.items() if not k.startswith("attention."))
        assert len(buf) > 4 * payload

    def test_bad_magic(self):
        buf = bytearray(io.weights_to_bytes(init_model(SMALL, 0)))
        buf[0] ^= 1
        with pytest.raises(io.BadMagicError):
            io.weights_from_bytes(bytes(buf))

    def test_version(self):
        buf = bytearray(io.weights_to_bytes(init_model(SMALL, 0)))
        struct.pack_into("<I", buf, 8, 2)
        buf[-4:] = struct.pack("<I", zlib.crc32(bytes(buf[:-4])))
        with pytest.raises(io.VersionError):
            io.weights_from_bytes(bytes(buf))

    def test_crc(self):
        buf = bytearray(io.weights_to_bytes(init_model(SMALL, 0)))
        buf[len(buf) // 2] ^= 0x40
        with pytest.raises(io.CrcError):
            io.weights_from_bytes(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 20, 100, 1])
    def test_truncated(self, cut):
        buf = io.weights_to_bytes(init_model(SMALL, 0))
        with pytest.raises(io.WeightFileError):
            io.weights_from_bytes(buf[:len(buf) - cut] if cut != 3 else buf[:3])

    def test_trailing_garbage(self):
        buf = io.weights_to_bytes(init_model(SMALL, 0))
        with pytest.raises(io.WeightFileError):
            io.weights_from_bytes(buf + b"xyz")


class TestCheckpoint:
    def test_round_trip_with_moments(self, tmp_path):
        model = init_model(replace(SMALL, learn_a=True), 0)
        cfg = TrainConfig(batch_size=2, patch_size=16, iterations=4, stages=2, log_every=1)
        res = train(model, toy_dataset(2, 32), cfg, stop_at=3)
        path = tmp_path / "c.spanckpt"
        io.save_checkpoint(model, res.state, path)
        back, state = io.load_checkpoint(path)
        assert same_params(model, back)
        assert (state.stage, state.iteration, state.adam.t) == (0, 3, 3)
        for k in res.state.adam.m:
            assert np.array_equal(state.adam.m[k], res.state.adam.m[k])
            assert np.array_equal(state.adam.v[k], res.state.adam.v[k])
        # the weights part of a checkpoint is itself a valid weight file
        assert same_params(io.load_weights(path), model)

    def test_fresh_state(self):
        model = init_model(SMALL, 0)
        back, state = io.checkpoint_from_bytes(io.checkpoint_to_bytes(model, TrainState()))
        assert state.adam.t == 0 and not state.adam.m

    def test_plain_weights_is_not_checkpoint(self):
        with pytest.raises(io.TruncatedError):
            io.checkpoint_from_bytes(io.weights_to_bytes(init_model(SMALL, 0)))

    def test_optimizer_crc(self):
        model = init_model(SMALL, 0)
        buf = bytearray(io.checkpoint_to_bytes(model, TrainState(iteration=9)))
        buf[-6] ^= 1
        with pytest.raises(io.CrcError):
            io.checkpoint_from_bytes(bytes(buf))


class TestConfig:
    def test_empty_is_span_x4(self):
        m, t = io.parse_config({})
        assert (m.channels, m.blocks, m.scale) == (48, 6, 4)
        assert (t.lr, t.batch_size, t.patch_size, t.halving_period) == (5e-4, 64, 256, 200_000)

    def test_alias(self):
        assert io.parse_config({"preset": "paper-x4"}) == io.parse_config({})

    def test_desk(self):
        m, t = io.parse_config({"preset": "desk"})
        assert (m.scale, m.channels) == (2, 16)
        assert (t.patch_size, t.batch_size) == (64, 8)

    def test_overrides(self):
        m, t = io.parse_config({"preset": "span-x2", "model": {"activation": "leaky_relu"},
                                "train": {"loss": "l2", "seed": 4}})
        assert m.scale == 2 and m.activation.value == "leaky_relu"
        assert t.loss == "l2" and t.seed == 4

    def test_negative_batch_named(self):
        with pytest.raises(io.ConfigError) as exc:
            io.parse_config({"train": {"batch_size": -1}})
        assert any("batch_size" in e for e in exc.value.errors)

    def test_all_errors_reported(self):
        with pytest.raises(io.ConfigError) as exc:
            io.parse_config({"extra": 1, "model": {"colour": 1, "blocks": "six"},
                             "train": {"momentum": 0.9}})
        text = " ".join(exc.value.errors)
        for key in ("extra", "colour", "blocks", "momentum"):
            assert key in text
        assert len(exc.value.errors) == 4

    def test_bad_preset_and_types(self):
        for doc in ({"preset": "huge"}, [], {"model": 3}, {"train": {"lr": "fast"}},
                    {"model": {"use_residual": 1}}, {"model": {"scale": 5}}):
            with pytest.raises(io.ConfigError):
                io.parse_config(doc)

    def test_patch_divisibility(self):
        with pytest.raises(io.ConfigError, match="patch_size"):
            io.parse_config({"preset": "desk", "model": {"scale": 3}})

    def test_round_trip_through_dict(self, tmp_path):
        m, t = io.parse_config({"preset": "desk", "model": {"padding": "replicate"}})
        path = tmp_path / "c.json"
        path.write_text(json.dumps(io.config_to_dict(m, t)))
        assert io.load_config(path) == (m, t)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(io.ConfigError):
            io.load_config(tmp_path / "c.json")


class TestDataset:
    def make(self, root, sizes, lr_for=()):
        (root / "HR").mkdir(parents=True)
        for i, (h, w) in enumerate(sizes):
            img = np.random.default_rng(i).random((1, 3, h, w))
            io.save_png(img, root / "HR" / f"im{i}.png")
            if i in lr_for:
                (root / "LR" / "X2").mkdir(parents=True, exist_ok=True)
                io.save_png(np.zeros((1, 3, h // 2, w // 2)), root / "LR" / "X2" / f"im{i}.png")

    def test_modcrop(self):
        x = np.zeros((1, 3, 13, 10))
        assert io.modcrop(x, 4).shape == (1, 3, 12, 8)
        assert io.modcrop(x, 1).shape == x.shape

    def test_pairs(self, tmp_path):
        self.make(tmp_path, [(16, 16), (17, 20)], lr_for=(0,))
        pairs = io.load_pairs(io.DatasetSpec(tmp_path), 2)
        assert [p[0] for p in pairs] == ["im0", "im1"]
        assert not pairs[0][1].any()  # LR read from disk
        _, lr, hr = pairs[1]
        assert hr.shape == (1, 3, 16, 20) and np.array_equal(lr, bicubic_downscale(hr, 2))

    def test_degrade_ignores_disk_lr(self, tmp_path):
        self.make(tmp_path, [(16, 16)], lr_for=(0,))
        (_, lr, hr), = io.load_pairs(io.DatasetSpec(tmp_path, degrade=True), 2)
        assert np.array_equal(lr, bicubic_downscale(hr, 2))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            io.DatasetSpec(tmp_path).hr_files()
        (tmp_path / "HR").mkdir()
        with pytest.raises(FileNotFoundError):
            io.DatasetSpec(tmp_path).hr_files()
