"""SART-TV reconstruction behavior."""

import numpy as np
import pytest

from spectroi.phantom import Disk, PhantomSpec, rasterize
from spectroi.projector import Sinogram, default_geometry, forward_project
from spectroi.recon import (
    DivergenceError,
    MultiEnergyImage,
    SartTvParams,
    reconstruct_all,
    sart_tv,
    total_variation,
)


def disk_image(n=64, p=0.1, mu=0.4, r=2.05):
    disk = Disk((0.0, 0.0), r, (("m", 1.0),))
    spec = PhantomSpec(n, n, p, (), (disk,), ("m",))
    return mu * rasterize(spec).maps[0]


def disk_sinogram(n=64, n_views=180, mu=0.4):
    geom = default_geometry(n, n, 0.1, n_views)
    img = disk_image(n=n, mu=mu)
    return img, forward_project(img, geom), geom


class TestSartTv:
    def test_zero_sinogram_fixed_point(self):
        geom = default_geometry(32, 32, 0.1, 24)
        x, info = sart_tv(np.zeros((24, 32)), geom, SartTvParams(n_iterations=5))
        np.testing.assert_allclose(x, 0.0, atol=1e-8)

    def test_noiseless_disk_residual_under_one_percent(self):
        img, sino, geom = disk_sinogram(n_views=180)
        x, info = sart_tv(sino, geom, SartTvParams(n_iterations=50))
        resid = np.linalg.norm(forward_project(x, geom) - sino)
        assert resid / np.linalg.norm(sino) < 0.01

    def test_interior_mean_recovered(self):
        img, sino, geom = disk_sinogram(n_views=180)
        x, info = sart_tv(sino, geom, SartTvParams(n_iterations=100))
        interior = disk_image(mu=1.0, r=1.6) > 0  # margin inside the disk
        assert x[interior].mean() == pytest.approx(0.4, rel=0.03)

    def test_tv_weight_zero_is_plain_sart(self):
        img, sino, geom = disk_sinogram(n_views=60)
        a, _ = sart_tv(sino, geom, SartTvParams(n_iterations=5, tv_weight=0.0))
        b, _ = sart_tv(sino, geom,
                       SartTvParams(n_iterations=5, tv_weight=0.0,
                                    tv_inner_steps=3))
        np.testing.assert_array_equal(a, b)

    def test_determinism(self):
        img, sino, geom = disk_sinogram(n_views=60)
        params = SartTvParams(n_iterations=8)
        a, _ = sart_tv(sino, geom, params)
        b, _ = sart_tv(sino, geom, params)
        np.testing.assert_array_equal(a, b)

    def test_residual_monotone_on_noiseless_data(self):
        img, sino, geom = disk_sinogram(n_views=90)
        _, info = sart_tv(sino, geom, SartTvParams(n_iterations=20))
        r = info["residuals"]
        assert all(r[i + 1] <= r[i] * 1.0001 for i in range(3, len(r) - 1))

    def test_divergence_guard_trips(self, monkeypatch):
        # The normalized SART sweep itself is contractive, so the guard is
        # exercised by faking a residual blow-up after a few iterations.
        import spectroi.recon as recon_mod

        img, sino, geom = disk_sinogram(n_views=30)
        real_fp = recon_mod.forward_project
        calls = {"n": 0}

        def exploding_fp(image, geometry):
            calls["n"] += 1
            out = real_fp(image, geometry)
            return out + 1e6 if calls["n"] > 3 else out

        monkeypatch.setattr(recon_mod, "forward_project", exploding_fp)
        with pytest.raises(DivergenceError):
            sart_tv(sino, geom, SartTvParams(n_iterations=10))

    def test_shape_mismatch_rejected(self):
        geom = default_geometry(16, 16, 0.1, 10)
        with pytest.raises(ValueError):
            sart_tv(np.zeros((9, 16)), geom, SartTvParams(n_iterations=1))


class TestTotalVariation:
    def test_constant_image_zero_tv(self):
        assert total_variation(np.full((9, 9), 3.2)) == 0.0

    def test_tv_descent_never_increases_tv(self):
        from spectroi.recon import _tv_descent

        rng = np.random.default_rng(7)
        img = rng.random((24, 24))
        before = total_variation(img)
        out = _tv_descent(img, step=0.05, n_steps=10)
        assert total_variation(out) <= before

    def test_step_image_tv_matches_edge_length(self):
        img = np.zeros((8, 8))
        img[:, 4:] = 1.0
        # Forward differences see one unit jump per row.
        assert total_variation(img) == pytest.approx(8.0)


class TestReconstructAll:
    def make_sino(self, b=3, n=32, n_views=48):
        geom = default_geometry(n, n, 0.1, n_views)
        img = disk_image(n=n, r=1.0)
        one = forward_project(img, geom)
        data = np.stack([one] * b)
        bins = tuple((30 + 10 * i, 40 + 10 * i) for i in range(b))
        return Sinogram(data, geom, bins, kind="line_integral")

    def test_identical_bins_identical_images(self):
        sino = self.make_sino()
        y = reconstruct_all(sino, SartTvParams(n_iterations=5))
        np.testing.assert_array_equal(y.data[0], y.data[1])
        np.testing.assert_array_equal(y.data[0], y.data[2])

    def test_threads_match_serial(self):
        sino = self.make_sino()
        params = SartTvParams(n_iterations=4)
        serial = reconstruct_all(sino, params, threads=1)
        parallel = reconstruct_all(sino, params, threads=3)
        np.testing.assert_array_equal(serial.data, parallel.data)

    def test_bin_permutation_equivariance(self):
        geom = default_geometry(32, 32, 0.1, 48)
        img_a = disk_image(n=32, r=1.0, mu=0.3)
        img_b = disk_image(n=32, r=0.7, mu=0.6)
        pa = forward_project(img_a, geom)
        pb = forward_project(img_b, geom)
        bins = ((30, 40), (40, 50))
        params = SartTvParams(n_iterations=4)
        y1 = reconstruct_all(
            Sinogram(np.stack([pa, pb]), geom, bins, kind="line_integral"),
            params)
        y2 = reconstruct_all(
            Sinogram(np.stack([pb, pa]), geom, bins, kind="line_integral"),
            params)
        np.testing.assert_array_equal(y1.data[0], y2.data[1])
        np.testing.assert_array_equal(y1.data[1], y2.data[0])

    def test_counts_kind_rejected(self):
        sino = self.make_sino()
        counts = Sinogram(np.abs(sino.data), sino.geometry, sino.bins,
                          kind="counts")
        with pytest.raises(ValueError):
            reconstruct_all(counts, SartTvParams(n_iterations=1))


class TestMultiEnergyImage:
    def test_requires_two_bins(self):
        with pytest.raises(ValueError):
            MultiEnergyImage(np.zeros((1, 4, 4)), ((30, 40),))

    def test_pixels_layout(self):
        data = np.arange(2 * 3 * 4.0).reshape(2, 3, 4)
        y = MultiEnergyImage(data, ((30, 40), (40, 50)))
        pix = y.pixels()
        assert pix.shape == (12, 2)
        np.testing.assert_array_equal(pix[:, 0], data[0].ravel())

    def test_params_validation(self):
        with pytest.raises(ValueError):
            SartTvParams(n_iterations=0)
        with pytest.raises(ValueError):
            SartTvParams(relaxation=2.5)
        with pytest.raises(ValueError):
            SartTvParams(tv_weight=-1.0)
