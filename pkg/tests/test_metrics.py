import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from ultract.metrics import (
    SWEEP_COLUMNS,
    ReportConfig,
    circle_mask,
    edge_mask,
    rmse_hu,
    soft_tissue_mask,
    ssim,
    ssim_map,
    sweep,
)
from ultract.simulation import desk_phantom, rasterize_phantom


@pytest.fixture(scope="module")
def desk_hu():
    return rasterize_phantom(desk_phantom(), (64, 64), (4.0, 4.0), oversample=2).hu()


class TestRmse:
    def test_identity(self, desk_hu):
        assert rmse_hu(desk_hu, desk_hu) == 0.0

    def test_constant_offset(self, desk_hu):
        assert rmse_hu(desk_hu - 7.5, desk_hu) == pytest.approx(7.5, rel=1e-12)

    def test_direct_sum(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(1000, 50, (2, 8, 8))
        m = rng.random((8, 8)) > 0.3
        total = 0.0
        for i in range(8):
            for j in range(8):
                if m[i, j]:
                    total += (a[i, j] - b[i, j]) ** 2
        assert rmse_hu(a, b, m) == pytest.approx(np.sqrt(total / m.sum()), rel=1e-12)

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty"):
            rmse_hu(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3), bool))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmse_hu(np.zeros((3, 3)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            rmse_hu(np.zeros((3, 3)), np.zeros((3, 3)), np.ones((2, 2), bool))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(0, 100, (3, 6, 6))
        m = rng.random((6, 6)) > 0.5
        m[0, 0] = True
        assert rmse_hu(a, b, m) == pytest.approx(rmse_hu(b, a, m), rel=1e-15)
        assert rmse_hu(a, c, m) <= rmse_hu(a, b, m) + rmse_hu(b, c, m) + 1e-12


class TestSsim:
    def test_identical(self, desk_hu):
        assert ssim(desk_hu, desk_hu) == pytest.approx(1.0, abs=1e-12)

    def test_contrast_inversion(self, desk_hu):
        assert ssim(-desk_hu + 2000.0, desk_hu) < 0.3

    def test_common_shift_fixed_range(self, desk_hu):
        # only the contrast-structure factor is shift invariant; a huge K1 pins luminance to 1
        rng = np.random.default_rng(1)
        noisy = desk_hu + rng.normal(0, 20, desk_hu.shape)
        a = ssim_map(noisy, desk_hu, 1800.0, K1=1e6)
        b = ssim_map(noisy + 300.0, desk_hu + 300.0, 1800.0, K1=1e6)
        np.testing.assert_allclose(a, b, atol=1e-6)
        full_a = ssim(noisy, desk_hu, dynamic_range=1800.0)
        full_b = ssim(noisy + 300.0, desk_hu + 300.0, dynamic_range=1800.0)
        assert full_a != pytest.approx(full_b, abs=1e-9)

    def test_skimage_route(self, desk_hu):
        # independent implementation: same Gaussian window, population covariance
        rng = np.random.default_rng(2)
        noisy = desk_hu + rng.normal(0, 30, desk_hu.shape)
        _, ref = structural_similarity(noisy, desk_hu, data_range=1800.0, gaussian_weights=True,
                                       sigma=1.5, use_sample_covariance=False, full=True)
        np.testing.assert_allclose(ssim_map(noisy, desk_hu, 1800.0), ref, atol=1e-10)

    def test_masked_mean(self, desk_hu):
        rng = np.random.default_rng(3)
        noisy = desk_hu + rng.normal(0, 30, desk_hu.shape)
        m = circle_mask(desk_hu.shape, 0.5)
        full = ssim_map(noisy, desk_hu, float(np.ptp(desk_hu)))
        assert ssim(noisy, desk_hu, m) == pytest.approx(full[m].mean(), rel=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1.0, 500.0))
    def test_bounds(self, seed, scale):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(0, scale, (2, 16, 16))
        s = ssim(a, b, dynamic_range=scale)
        assert -1.0 <= s <= 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))
        with pytest.raises(ValueError):
            ssim_map(np.zeros((4, 4)), np.zeros((4, 4)), 0.0)


class TestMasks:
    def test_circle_inscribed(self):
        m = circle_mask((64, 64))
        assert m[32, 32] and not m[0, 0] and m[32, 0] and m[0, 32]
        assert m.sum() == pytest.approx(np.pi * 32**2, rel=0.02)
        np.testing.assert_array_equal(m, m[::-1])
        np.testing.assert_array_equal(m, m.T)

    def test_circle_fraction(self):
        assert circle_mask((100, 100), 0.5).sum() == pytest.approx(np.pi * 25**2, rel=0.03)

    def test_edge_mask_step(self):
        img = np.zeros((6, 10))
        img[:, 5:] = 100.0
        m = edge_mask(img, width=1)
        assert set(np.flatnonzero(m.any(axis=0))) == {4, 5}
        m2 = edge_mask(img, width=2)
        assert set(np.flatnonzero(m2.any(axis=0))) == {3, 4, 5, 6}

    def test_soft_tissue_excludes_edges(self, desk_hu):
        soft = soft_tissue_mask(desk_hu)
        assert soft.any()
        assert not np.any(soft & edge_mask(desk_hu))
        assert np.all((desk_hu[soft] >= 950) & (desk_hu[soft] <= 1100))


def fake_runner(method, I0, seed):
    rng = np.random.default_rng(seed)
    truth = np.full((8, 8), 1000.0)
    noise = {"fbp": 40.0, "ep": 20.0}[method] / np.sqrt(I0 / 1e4)
    return truth + rng.normal(0, noise, truth.shape), truth, 0.5, 3


class TestSweep:
    def test_header_only(self):
        out = sweep(ReportConfig(methods=[]), fake_runner)
        assert out == ",".join(SWEEP_COLUMNS) + "\n"

    def test_rows(self):
        cfg = ReportConfig(methods=["fbp", "ep"], doses=[1e4, 1e5], seeds=[0, 1], dynamic_range=500.0)
        rows = list(csv.DictReader(io.StringIO(sweep(cfg, fake_runner))))
        assert len(rows) == 8
        assert list(rows[0].keys()) == list(SWEEP_COLUMNS)
        assert [r["method"] for r in rows[:4]] == ["fbp"] * 4
        fbp = np.mean([float(r["rmse_hu"]) for r in rows if r["method"] == "fbp"])
        ep = np.mean([float(r["rmse_hu"]) for r in rows if r["method"] == "ep"])
        assert ep < fbp

    def test_deterministic(self):
        cfg = ReportConfig(methods=["ep"], seeds=[3, 4], dynamic_range=500.0)
        assert sweep(cfg, fake_runner) == sweep(cfg, fake_runner)
