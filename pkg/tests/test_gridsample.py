"""Grid sampling, resizing, unwarping and the .dgrid format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dewarp.errors import ContractError, FormatError
from dewarp.gridsample import (
    DenseGrid,
    bilinear_sample,
    identity_grid,
    load_grid,
    save_grid,
    unwarp,
    upsample_grid,
)
from dewarp.interp import resize_image
from dewarp.metrics import psnr


def smooth_image(seed, h, w, c=3):
    """Band-limited random image: blurred noise, well-suited to resampling."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 1, (h, w, c))
    img = ndimage.gaussian_filter(img, sigma=(3, 3, 0))
    img -= img.min()
    img /= img.max()
    return img.astype(np.float32)


class TestBilinearSample:
    def test_identity_grid_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (13, 9, 3)).astype(np.float32)
        out = bilinear_sample(img, identity_grid(13, 9))
        assert np.array_equal(out, img)

    def test_negated_x_channel_mirrors(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (8, 8)).astype(np.float32)
        g = identity_grid(8, 8)
        g = DenseGrid(np.stack([-g.map[0], g.map[1]]))
        out = bilinear_sample(img, g)
        assert np.allclose(out, img[:, ::-1], atol=1e-6)

    def test_midpoint_interpolation(self):
        img = np.array([[0.0, 1.0]], dtype=np.float32)
        g = DenseGrid(np.zeros((2, 1, 1), dtype=np.float32))  # x=0 -> center
        out = bilinear_sample(img, g)
        assert np.isclose(out[0, 0], 0.5)

    def test_out_of_range_clamps(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        m = np.zeros((2, 1, 2), dtype=np.float32)
        m[0, 0] = [-5.0, 5.0]  # far left, far right
        m[1, 0] = [-5.0, 5.0]  # far top, far bottom
        out = bilinear_sample(img, DenseGrid(m))
        assert out[0, 0] == 1.0 and out[0, 1] == 4.0

    def test_nonfinite_grid_rejected(self):
        img = np.zeros((4, 4), dtype=np.float32)
        m = np.zeros((2, 2, 2), dtype=np.float32)
        m[0, 0, 0] = np.nan
        with pytest.raises(ContractError):
            bilinear_sample(img, DenseGrid(m))


class TestUpsampleGrid:
    def test_identity_stays_identity_at_880x680(self):
        up = upsample_grid(identity_grid(256, 256), 880, 680)
        ref = identity_grid(880, 680)
        assert np.max(np.abs(up.map - ref.map)) < 1e-6

    def test_same_size_identity(self):
        g = identity_grid(32, 48)
        up = upsample_grid(g, 32, 48)
        assert np.allclose(up.map, g.map, atol=1e-7)

    def test_round_trip_small_error(self):
        rng = np.random.default_rng(7)
        base = identity_grid(64, 64).map.astype(np.float64)
        from scipy import ndimage

        wobble = ndimage.gaussian_filter(rng.uniform(-0.05, 0.05, base.shape), (0, 5, 5))
        g = DenseGrid((base + wobble).astype(np.float32))
        up = upsample_grid(g, 256, 256)
        back = upsample_grid(up, 64, 64)
        assert np.max(np.abs(back.map - g.map)) < 0.01

    def test_range_preserved(self):
        rng = np.random.default_rng(3)
        g = DenseGrid(rng.uniform(-1, 1, (2, 16, 16)).astype(np.float32))
        up = upsample_grid(g, 100, 60)
        assert up.map.min() >= -1.0 and up.map.max() <= 1.0

    def test_degenerate_target_rejected(self):
        with pytest.raises(ContractError):
            upsample_grid(identity_grid(8, 8), 1, 8)


class TestUnwarp:
    def test_identity(self):
        img = smooth_image(0, 64, 48)
        out = unwarp(img, identity_grid(32, 32))
        assert psnr(out, img) > 50

    def test_constant_image_any_grid(self):
        img = np.full((40, 40, 3), 0.6, dtype=np.float32)
        rng = np.random.default_rng(2)
        g = DenseGrid(rng.uniform(-1, 1, (2, 16, 16)).astype(np.float32))
        out = unwarp(img, g)
        assert np.allclose(out, 0.6, atol=1e-6)

    def test_prescale_invariance(self):
        # sampling a 2x-downscaled image with the same normalized grid
        # approximates the downscale of the full-res unwarp
        img = smooth_image(5, 128, 128)
        rng = np.random.default_rng(8)
        from scipy import ndimage

        base = identity_grid(64, 64).map.astype(np.float64)
        wobble = ndimage.gaussian_filter(rng.uniform(-0.08, 0.08, base.shape), (0, 6, 6))
        g = DenseGrid((base + wobble).astype(np.float32))

        full = unwarp(img, g)
        small = unwarp(resize_image(img, 64, 64), g)
        assert psnr(small, resize_image(full, 64, 64)) >= 30


class TestDgridFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        g = DenseGrid(rng.uniform(-1, 1, (2, 33, 21)).astype(np.float32))
        p = str(tmp_path / "g.dgrid")
        save_grid(g, p)
        g2 = load_grid(p)
        assert np.array_equal(g.map, g2.map)
        save_grid(g2, p + ".again")
        assert open(p, "rb").read() == open(p + ".again", "rb").read()

    @given(h=st.integers(2, 12), w=st.integers(2, 12), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_property(self, h, w, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        g = DenseGrid(rng.uniform(-1, 1, (2, h, w)).astype(np.float32))
        p = str(tmp_path_factory.mktemp("dg") / "g.dgrid")
        save_grid(g, p)
        assert np.array_equal(load_grid(p).map, g.map)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.dgrid"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError) as ei:
            load_grid(str(p))
        assert ei.value.offset == 0

    def test_truncated(self, tmp_path):
        g = identity_grid(8, 8)
        p = str(tmp_path / "g.dgrid")
        save_grid(g, p)
        blob = open(p, "rb").read()
        open(p, "wb").write(blob[:-7])
        with pytest.raises(FormatError):
            load_grid(str(p))
