import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from depthalign import io as dio
from depthalign.alignment import AlignmentConfig
from depthalign.errors import FormatError, ParameterError, RangeError


class TestPng16:
    def test_five_meters(self, tmp_path):
        p = tmp_path / "d.png"
        dio.write_png16(p, np.full((2, 3), 5.0))
        with Image.open(p) as im:
            assert np.all(np.asarray(im) == 1280)
        np.testing.assert_array_equal(dio.read_png16(p), np.full((2, 3), 5.0))

    def test_missing_is_zero(self, tmp_path):
        p = tmp_path / "d.png"
        d = np.array([[1.0, np.nan], [0.0, 2.5]])
        dio.write_png16(p, d)
        back = dio.read_png16(p)
        assert np.isnan(back[0, 1]) and np.isnan(back[1, 0])
        assert back[0, 0] == 1.0 and back[1, 1] == 2.5

    @pytest.mark.parametrize("bad", [300.0, np.inf, 1e-3])
    def test_range(self, tmp_path, bad):
        with pytest.raises(RangeError):
            dio.write_png16(tmp_path / "d.png", np.array([[1.0, bad]]))

    def test_limit_is_representable(self, tmp_path):
        p = tmp_path / "d.png"
        dio.write_png16(p, np.array([[dio.PNG16_MAX]]))
        assert dio.read_png16(p)[0, 0] == pytest.approx(dio.PNG16_MAX)

    @given(arrays(np.float64, (5, 6), elements=st.floats(0.01, 255.9)))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_precision(self, tmp_path_factory, d):
        p = tmp_path_factory.mktemp("png") / "d.png"
        dio.write_depth(p, d)
        assert np.max(np.abs(dio.read_depth(p) - d)) <= 1 / 512 + 1e-12

    def test_rejects_rgb(self, tmp_path):
        p = tmp_path / "rgb.png"
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(p)
        with pytest.raises(FormatError):
            dio.read_png16(p)


class TestPfm:
    def test_bit_exact(self, tmp_path, rng):
        d = rng.normal(size=(7, 9)).astype(np.float32)
        d[2, 3] = np.nan
        p = tmp_path / "d.pfm"
        dio.write_pfm(p, d)
        back = dio.read_pfm(p)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back.view(np.uint32), d.view(np.uint32))

    def test_layout(self, tmp_path):
        p = tmp_path / "d.pfm"
        dio.write_pfm(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
        raw = p.read_bytes()
        assert raw.startswith(b"Pf\n2 2\n-1.0\n")
        body = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n") :], "<f4")
        np.testing.assert_array_equal(body, [3.0, 4.0, 1.0, 2.0])

    def test_big_endian(self, tmp_path):
        p = tmp_path / "be.pfm"
        p.write_bytes(b"Pf\n2 1\n1.0\n" + np.array([1.5, -2.0], ">f4").tobytes())
        np.testing.assert_array_equal(dio.read_pfm(p), [[1.5, -2.0]])

    @pytest.mark.parametrize(
        "blob, offset",
        [
            (b"PF\n2 2\n-1.0\n", 0),
            (b"Pf\n2 x\n-1.0\n", 5),
            (b"Pf\n2 2\nabc\n", 7),
            (b"Pf\n2 2\n-1.0\n" + b"\0" * 8, 20),
        ],
    )
    def test_format_error_offsets(self, tmp_path, blob, offset):
        p = tmp_path / "bad.pfm"
        p.write_bytes(blob)
        with pytest.raises(FormatError) as info:
            dio.read_pfm(p)
        assert info.value.offset == offset

    def test_unknown_suffix(self, tmp_path):
        with pytest.raises(ParameterError):
            dio.write_depth(tmp_path / "d.tif", np.ones((2, 2)))


class TestConfig:
    def test_defaults(self):
        run = dio.load_config()
        assert run.align == AlignmentConfig()
        assert run.prior == dio.PRIOR_DEFAULTS

    def test_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            "# a comment\n"
            "num_steps = 20\n"
            "loss.lambda_rssim = 0.0   # trailing comment\n"
            "align.use_prior_modes = false\n"
            "density = 0.05\n"
            "outliers = see_through:0.1, gross:0.05\n"
            "sigma_p = 0.2\n"
        )
        run = dio.load_config(p)
        assert run.align.num_steps == 20
        assert run.loss.lambda_rssim == 0.0
        assert run.align.use_prior_modes is False
        assert run.scene.density == 0.05
        assert run.scene.outliers == (("see_through", 0.1), ("gross", 0.05))
        assert run.prior["sigma_p"] == 0.2

    @pytest.mark.parametrize(
        "text",
        ["no_such_key = 1\n", "loss.num_steps = 3\n", "num_steps = many\n", "num_steps\n", "seed = 1\nseed = 2\n"],
    )
    def test_errors(self, text):
        with pytest.raises(ParameterError):
            dio.apply_config(dio.parse_config(text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParameterError):
            dio.load_config(tmp_path / "absent.cfg")

    def test_echo_is_json(self):
        json.dumps(dio.RunConfig().to_dict())


class TestManifest:
    def test_roundtrip(self, tmp_path):
        p = tmp_path / "m.json"
        doc = dio.write_manifest(p, {"rmse": np.float64(1.5), "arr": np.arange(3), "bad": float("nan")})
        back = dio.read_manifest(p)
        assert back == doc
        assert back["version"] == dio.__version__
        assert back["arr"] == [0, 1, 2] and back["bad"] is None

    def test_invalid(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{"a": ')
        with pytest.raises(FormatError):
            dio.read_manifest(p)
