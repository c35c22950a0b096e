"""Model config, weights, folding, and the two binary file formats."""

import numpy as np
import pytest

from xpi import model
from xpi.errors import FormatError
from xpi.model import (
    ModelConfig,
    ModelWeights,
    PRESETS,
    digest_weights,
    fold_model,
    fold_norm,
    load_vectors,
    load_weights,
    param_count,
    quantize_model,
    random_model,
    save_vectors,
    save_weights,
    serialize_weights,
)

TOY = PRESETS["toy"]


class TestConfig:
    def test_derived_quantities(self):
        cfg = ModelConfig(32, 4, 256, 256, 16, 100)
        assert cfg.grid == 8
        assert cfg.tokens == 64
        assert cfg.patch_dim == 48

    def test_patch_must_divide_image(self):
        with pytest.raises(ValueError, match="multiple"):
            ModelConfig(30, 4, 8, 8, 1, 2)

    def test_positive_ints_only(self):
        with pytest.raises(ValueError):
            ModelConfig(32, 4, 0, 8, 1, 2)
        with pytest.raises(ValueError):
            ModelConfig(32, 4, 8.5, 8, 1, 2)


class TestParamCount:
    def test_against_tensor_inventory(self):
        # independent oracle: count the learnable tensors of an actual
        # model (normalization running stats are not parameters)
        w = random_model(TOY, seed=1, calib_batch=4)
        learnable = sum(
            t.size
            for name, t in w.tensors.items()
            if not name.endswith((".mean", ".var"))
        )
        assert param_count(TOY) == learnable

    def test_flagship_config_near_2p2m(self):
        count = param_count(ModelConfig(32, 4, 256, 256, 16, 100))
        assert abs(count - 2.2e6) / 2.2e6 < 0.05

    def test_scales_with_depth(self):
        c16 = param_count(PRESETS["m16"])
        c24 = param_count(PRESETS["m24"])
        per_layer = (c24 - c16) // 8
        assert c24 > c16
        assert per_layer == 2 * 256 + 256 * 9 + 256 + 2 * (256 * 256 + 256)


class TestFoldNorm:
    def test_matches_normalization_formula(self):
        rng = np.random.default_rng(130)
        n, d = 4, 6
        mean = rng.normal(0, 1, (n, n))
        var = rng.uniform(0.1, 2.0, (n, n))
        gamma = rng.normal(1, 0.2, d)
        nc = fold_norm(mean, var, gamma, eps=1e-5)
        x = rng.normal(0, 3, (d, n, n))
        got = x * nc.scale + nc.bias
        expect = gamma[:, None, None] * (x - mean) / np.sqrt(var + 1e-5)
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_affine_free_site(self):
        rng = np.random.default_rng(131)
        mean = rng.normal(0, 1, (3, 3))
        var = rng.uniform(0.5, 1.5, (3, 3))
        nc = fold_norm(mean, var, None)
        x = rng.normal(0, 1, (3, 3))
        np.testing.assert_allclose(
            x * nc.scale[0] + nc.bias[0], (x - mean) / np.sqrt(var + 1e-5), rtol=1e-12
        )

    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError, match="negative"):
            fold_norm(np.zeros((2, 2)), np.full((2, 2), -0.1), None)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            fold_norm(np.full((2, 2), np.nan), np.ones((2, 2)), None)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            fold_norm(np.zeros((2, 2)), np.ones((2, 2)), None, eps=0.0)


class TestRandomModel:
    def test_validates_and_reproduces(self):
        a = random_model(TOY, seed=5, calib_batch=8)
        b = random_model(TOY, seed=5, calib_batch=8)
        assert digest_weights(a) == digest_weights(b)
        c = random_model(TOY, seed=6, calib_batch=8)
        assert digest_weights(a) != digest_weights(c)

    def test_calibration_keeps_stats_sane(self):
        w = random_model(TOY, seed=7, calib_batch=16)
        for name, t in w.tensors.items():
            assert np.isfinite(t).all(), name
            if name.endswith(".var"):
                assert (t >= 0).all(), name
                assert t.max() < 1e6, name


class TestWeightsFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        w = random_model(TOY, seed=8, calib_batch=4)
        path = tmp_path / "toy.xmw"
        save_weights(w, str(path))
        back = load_weights(str(path))
        assert back.cfg == w.cfg
        assert set(back.tensors) == set(w.tensors)
        for name in w.tensors:
            np.testing.assert_array_equal(back.tensors[name], w.tensors[name])
        assert digest_weights(back) == digest_weights(w)

    def test_header_bytes(self, tmp_path):
        w = random_model(TOY, seed=9, calib_batch=4)
        data = serialize_weights(w)
        assert data[:4] == b"XMW1"
        assert data[4:6] == b"\x01\x00"
        cfg_fields = np.frombuffer(data[6:30], dtype="<u4")
        assert tuple(cfg_fields) == TOY.astuple()

    def test_digest_is_content_addressed(self):
        a = random_model(TOY, seed=10, calib_batch=4)
        b = random_model(TOY, seed=10, calib_batch=4)
        b.tensors["head.bias"] = b.tensors["head.bias"] + np.float32(1e-3)
        assert digest_weights(a) != digest_weights(b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.xmw"
        path.write_bytes(b"WRNG" + bytes(64))
        with pytest.raises(FormatError, match="bad magic"):
            load_weights(str(path))

    def test_truncated(self, tmp_path):
        w = random_model(TOY, seed=11, calib_batch=4)
        path = tmp_path / "trunc.xmw"
        save_weights(w, str(path))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(FormatError, match="truncated"):
            load_weights(str(path))

    def test_trailing_garbage(self, tmp_path):
        w = random_model(TOY, seed=12, calib_batch=4)
        path = tmp_path / "trail.xmw"
        save_weights(w, str(path))
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(FormatError, match="trailing"):
            load_weights(str(path))

    def test_missing_tensor_rejected(self):
        w = random_model(TOY, seed=13, calib_batch=4)
        del w.tensors["head.bias"]
        with pytest.raises(FormatError, match="missing tensor"):
            w.validate()

    def test_unexpected_tensor_rejected(self):
        w = random_model(TOY, seed=14, calib_batch=4)
        w.tensors["extra.weight"] = np.zeros(3, dtype=np.float32)
        with pytest.raises(FormatError, match="unexpected tensor"):
            w.validate()

    def test_wrong_shape_rejected(self):
        w = random_model(TOY, seed=15, calib_batch=4)
        w.tensors["head.bias"] = np.zeros(99, dtype=np.float32)
        with pytest.raises(FormatError, match="shape"):
            w.validate()


class TestVectorsFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(140)
        images = rng.normal(0, 1, (5, 3, 16, 16)).astype(np.float32)
        logits = rng.normal(0, 1, (5, 10)).astype(np.float32)
        path = tmp_path / "v.xmv"
        save_vectors(str(path), images, logits)
        bi, bl = load_vectors(str(path))
        np.testing.assert_array_equal(bi, images.reshape(5, -1))
        np.testing.assert_array_equal(bl, logits)

    def test_header(self, tmp_path):
        path = tmp_path / "h.xmv"
        save_vectors(str(path), np.zeros((2, 3, 4, 4), np.float32), np.zeros((2, 7), np.float32))
        data = path.read_bytes()
        assert data[:4] == b"XMV1"
        count, ielems, lelems = np.frombuffer(data[6:18], dtype="<u4")
        assert (count, ielems, lelems) == (2, 48, 7)

    def test_mismatched_counts_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="matching leading"):
            save_vectors(
                str(tmp_path / "x.xmv"),
                np.zeros((3, 4), np.float32),
                np.zeros((2, 4), np.float32),
            )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.xmv"
        path.write_bytes(b"XMW1" + bytes(32))
        with pytest.raises(FormatError, match="bad magic"):
            load_vectors(str(path))


class TestQuantize:
    def test_all_params_encoded_at_scale(self):
        w = random_model(TOY, seed=16, calib_batch=4)
        qm = quantize_model(fold_model(w), 16)
        folded = fold_model(w)
        assert set(qm.params) == set(folded.params)
        for name, t in qm.params.items():
            assert t.frac_bits == 16, name
        # decoded quantized weights sit within half an ulp of folded
        from xpi.ring import decode_fixed

        for name in folded.params:
            err = np.abs(decode_fixed(qm.params[name]) - folded.params[name]).max()
            assert err <= 2.0**-17 + 1e-12, name
