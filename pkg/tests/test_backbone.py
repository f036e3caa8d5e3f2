import numpy as np
import pytest

from sta_reid.backbone import (
    BackboneParams,
    init_backbone,
    load_feature_maps,
    output_shape,
    save_feature_maps,
    tiny_backbone_forward,
)
from sta_reid.errors import ConfigurationError, FormatError, VersionError
from sta_reid.numerics import conv2d, relu


def default_params(rng, widths=(16, 32, 8), strides=(2, 2, 1)):
    return init_backbone(3, list(widths), list(strides), rng)


class TestTinyBackboneForward:
    def test_zero_frames_zero_biases_give_zero_maps(self):
        rng = np.random.default_rng(0)
        params = default_params(rng)
        frames = np.zeros((2, 64, 32, 3), dtype=np.float32)
        out = tiny_backbone_forward(frames, params).value
        assert out.shape == (2, 16, 8, 8)
        np.testing.assert_array_equal(out, np.zeros_like(out))

    def test_identical_frames_give_identical_maps(self):
        rng = np.random.default_rng(1)
        params = default_params(rng)
        frame = rng.uniform(size=(32, 16, 3)).astype(np.float32)
        for n in (1, 4):
            frames = np.tile(frame, (n, 1, 1, 1))
            out = tiny_backbone_forward(frames, params).value
            for i in range(1, n):
                np.testing.assert_array_equal(out[i], out[0])

    def test_matches_composed_primitives(self):
        rng = np.random.default_rng(2)
        params = default_params(rng, widths=(4, 6), strides=(2, 1))
        frames = rng.uniform(size=(3, 8, 6, 3))
        got = tiny_backbone_forward(frames, params).value
        for n in range(3):
            x = frames[n]
            for kernel, bias, stride in zip(params.kernels, params.biases, params.strides):
                x = relu(conv2d(x, kernel, bias, stride=stride, pad=1).value).value
            np.testing.assert_allclose(got[n], x, atol=1e-12)

    def test_output_always_nonnegative(self):
        rng = np.random.default_rng(3)
        params = default_params(rng, widths=(4,), strides=(1,))
        frames = rng.normal(size=(2, 6, 6, 3))
        out = tiny_backbone_forward(frames, params).value
        assert np.all(out >= 0)

    def test_channel_mismatch_is_configuration_error(self):
        rng = np.random.default_rng(4)
        params = default_params(rng)
        with pytest.raises(ConfigurationError, match="channels"):
            tiny_backbone_forward(np.zeros((1, 64, 32, 1)), params)

    def test_odd_height_with_stride_two_rejected(self):
        rng = np.random.default_rng(5)
        params = default_params(rng, widths=(4,), strides=(2,))
        with pytest.raises(ConfigurationError, match="height"):
            tiny_backbone_forward(np.zeros((1, 9, 8, 3)), params)

    def test_output_shape_helper(self):
        rng = np.random.default_rng(6)
        params = default_params(rng)
        assert output_shape((64, 32), params) == (16, 8)
        assert output_shape((32, 16), params) == (8, 4)

    def test_kernel_size_checked_against_stride(self):
        with pytest.raises(ConfigurationError, match="stride"):
            BackboneParams(kernels=[np.zeros((3, 3, 3, 4))], biases=[np.zeros(4)], strides=[2])


class TestStafFormat:
    def test_round_trip_is_identity(self, tmp_path):
        rng = np.random.default_rng(7)
        maps = rng.uniform(size=(4, 16, 8, 32)).astype(np.float32)
        path = tmp_path / "maps.staf"
        save_feature_maps(path, maps)
        loaded = load_feature_maps(path)
        np.testing.assert_array_equal(loaded, maps)

    def test_header_shape_respected(self, tmp_path):
        maps = np.ones((4, 16, 8, 32), dtype=np.float32)
        path = tmp_path / "maps.staf"
        save_feature_maps(path, maps)
        assert load_feature_maps(path).shape == (4, 16, 8, 32)

    def test_truncated_payload(self, tmp_path):
        maps = np.ones((2, 4, 4, 2), dtype=np.float32)
        path = tmp_path / "maps.staf"
        save_feature_maps(path, maps)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="truncated at byte"):
            load_feature_maps(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "maps.staf"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError, match="byte 0"):
            load_feature_maps(path)

    def test_bad_version(self, tmp_path):
        maps = np.ones((1, 2, 2, 1), dtype=np.float32)
        path = tmp_path / "maps.staf"
        save_feature_maps(path, maps)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError, match="byte 4"):
            load_feature_maps(path)

    def test_zero_dimension_rejected(self, tmp_path):
        import struct

        path = tmp_path / "maps.staf"
        path.write_bytes(struct.pack("<4sIIIII", b"STAF", 1, 0, 4, 4, 2))
        with pytest.raises(FormatError, match="N=0"):
            load_feature_maps(path)

    def test_negative_values_clamped_with_warning(self, tmp_path):
        maps = np.array([[[[1.0, -2.0], [-3.0, 4.0]]]], dtype=np.float32)
        path = tmp_path / "maps.staf"
        save_feature_maps(path, maps)
        with pytest.warns(RuntimeWarning, match="clamped 2"):
            loaded = load_feature_maps(path)
        assert np.all(loaded >= 0)
        np.testing.assert_array_equal(loaded[0, 0, 0], [1.0, 0.0])
