import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from ultract.geometry import (
    ImageGrid,
    Projector,
    ScanGeometry,
    Sinogram,
    SubsetPartition,
    back_project,
    bit_reversal_order,
    build_DA,
    forward_project,
    siddon_apply,
)
from ultract.simulation import Ellipse, Phantom, rasterize_phantom


def dense_ray_row(grid, x0, y0, x1, y1, samples=200_000):
    """Intersection lengths of one ray with every pixel, by dense sampling along the ray."""
    t = (np.arange(samples) + 0.5) / samples
    px = x0 + t * (x1 - x0)
    py = y0 + t * (y1 - y0)
    seg = np.hypot(x1 - x0, y1 - y0) / samples
    col = np.floor((px - (grid.offset_x - grid.nx * grid.dx / 2)) / grid.dx).astype(int)
    row = np.floor((py - (grid.offset_y - grid.ny * grid.dy / 2)) / grid.dy).astype(int)
    ok = (col >= 0) & (col < grid.nx) & (row >= 0) & (row < grid.ny)
    out = np.zeros(grid.n_pixels)
    np.add.at(out, row[ok] * grid.nx + col[ok], seg)
    return out


class TestImageGrid:
    def test_hu_round_trip(self):
        g = ImageGrid(4, 3, values=np.linspace(0, 0.05, 12))
        v = np.linspace(-1000, 3000, 12)
        np.testing.assert_allclose(g.hu(g.att(v)), v, rtol=1e-9)

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            ImageGrid(0, 4)
        with pytest.raises(ValueError):
            ImageGrid(4, 4, dx=0)
        with pytest.raises(ValueError):
            ImageGrid(4, 4, values=np.zeros(15))


class TestScanGeometry:
    def test_counts(self):
        g = ScanGeometry.parallel(12, 7)
        assert g.n_rays == 84

    def test_angles_must_increase(self):
        with pytest.raises(ValueError):
            ScanGeometry("parallel", [0.0, 0.2, 0.1], 4)

    def test_span_below_two_pi(self):
        with pytest.raises(ValueError):
            ScanGeometry("parallel", [0.0, 2 * np.pi], 4)

    def test_sinogram_weights_validated(self):
        geo = ScanGeometry.parallel(2, 3)
        with pytest.raises(ValueError):
            Sinogram(geo, np.zeros(6), -np.ones(6))
        with pytest.raises(ValueError):
            Sinogram(geo, np.zeros(5))


class TestForwardProject:
    def test_disk_center_ray(self):
        # disk of radius 80 mm, mu = 0.02/mm on a 256^2 grid of 1 mm pixels
        r, mu = 80.0, 0.02
        grid = rasterize_phantom(Phantom((Ellipse(0, 0, r, r, 1000.0),)), (256, 256), oversample=8)
        geo = ScanGeometry.parallel(4, 255)  # odd detector count: bin 127 passes through the centre
        sino = forward_project(grid, geo)
        np.testing.assert_allclose(sino[:, 127], 2 * r * mu, rtol=5e-3)

    def test_zero_image(self):
        grid = ImageGrid(16, 16)
        assert not np.any(forward_project(grid, ScanGeometry.parallel(10, 20)))

    def test_linearity(self):
        rng = np.random.default_rng(0)
        grid = ImageGrid(24, 20, dx=0.8, dy=1.1)
        geo = ScanGeometry.parallel(17, 31)
        u, v = rng.random((2, 20, 24))
        a, b = 1.7, -0.3
        lhs = forward_project(grid.with_values(a * u + b * v), geo)
        rhs = a * forward_project(grid.with_values(u), geo) + b * forward_project(grid.with_values(v), geo)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * np.abs(rhs).max())

    def test_empty_field_of_view(self):
        grid = ImageGrid(8, 8, offset_x=1000.0, offset_y=500.0)  # no parallel ray reaches it
        with pytest.raises(ValueError, match="empty field of view"):
            Projector(grid, ScanGeometry.parallel(4, 4))
        with pytest.raises(ValueError, match="empty field of view"):
            forward_project(grid, ScanGeometry.parallel(4, 4))

    def test_matrix_free_matches_matrix(self):
        rng = np.random.default_rng(1)
        grid = ImageGrid(32, 32)
        geo = ScanGeometry.fan(30, 48, 1.5, 100.0, 180.0)
        P = Projector(grid, geo)
        x = rng.random((32, 32))
        np.testing.assert_allclose(P.forward(x), siddon_apply(grid, geo, x), rtol=1e-13)


class TestAdjoint:
    @pytest.mark.parametrize("kind", ["parallel", "fan"])
    def test_dot_product(self, kind):
        rng = np.random.default_rng(2)
        grid = ImageGrid(40, 36, dx=0.9, dy=1.0, offset_x=1.5)
        if kind == "parallel":
            geo = ScanGeometry.parallel(45, 60, 0.8)
        else:
            geo = ScanGeometry.fan(45, 70, 1.2, 120.0, 220.0)
        P = Projector(grid, geo)
        x = rng.standard_normal(grid.shape)
        y = rng.standard_normal(P.sino_shape)
        Ax = P.forward(x)
        lhs, rhs = np.vdot(Ax, y), np.vdot(x, P.back(y))
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(Ax) * np.linalg.norm(y)

    def test_zero_sinogram(self):
        grid = ImageGrid(8, 8)
        geo = ScanGeometry.parallel(5, 9)
        assert not np.any(back_project(np.zeros((5, 9)), geo, grid))

    def test_shape_mismatch(self):
        P = Projector(ImageGrid(8, 8), ScanGeometry.parallel(5, 9))
        with pytest.raises(ValueError):
            P.back(np.zeros(44))
        with pytest.raises(ValueError):
            P.forward(np.zeros(63))

    def test_one_hot_ray_matches_dense_trace(self):
        grid = ImageGrid(8, 8)
        geo = ScanGeometry.parallel(7, 11, 0.9)
        P = Projector(grid, geo)
        reach = np.hypot(8, 8) / 2 + 0.9 * 11
        x0, y0, x1, y1 = geo.ray_endpoints(reach)
        for ray in (5, 23, 40, 71):
            e = np.zeros(geo.n_rays)
            e[ray] = 1.0
            oracle = dense_ray_row(grid, x0[ray], y0[ray], x1[ray], y1[ray])
            np.testing.assert_allclose(P.back(e).ravel(), oracle, atol=2e-3 * reach / 200_000 * 1e3)

    def test_matrix_entries_nonnegative(self):
        P = Projector(ImageGrid(16, 16), ScanGeometry.fan(20, 24, 1.0, 40.0, 80.0))
        assert P.A.data.min() >= 0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 9), st.integers(1, 15),
           st.integers(0, 2**31 - 1))
    def test_dot_product_property(self, nx, ny, n_views, n_det, seed):
        rng = np.random.default_rng(seed)
        grid = ImageGrid(nx, ny, dx=rng.uniform(0.5, 2), dy=rng.uniform(0.5, 2))
        geo = ScanGeometry.parallel(n_views, n_det, rng.uniform(0.3, 2), span=np.pi)
        try:
            P = Projector(grid, geo)
        except ValueError:
            return  # every ray missed: nothing to check
        x = rng.standard_normal(grid.shape)
        y = rng.standard_normal(P.sino_shape)
        Ax = P.forward(x)
        assert abs(np.vdot(Ax, y) - np.vdot(x, P.back(y))) <= 1e-10 * max(
            np.linalg.norm(Ax) * np.linalg.norm(y), 1e-300)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        grid = ImageGrid(20, 20)
        geo = ScanGeometry.parallel(13, 25)
        x = rng.random(grid.shape)
        a = Projector(grid, geo).forward(x)
        b = Projector(grid, geo).forward(x)
        assert np.array_equal(a, b)


class TestSubsets:
    def test_bit_reversal_example(self):
        part = SubsetPartition.bit_reversal(8, 4)
        assert part.view_lists == ((0, 4), (2, 6), (1, 5), (3, 7))

    def test_bit_reversal_order_non_power_of_two(self):
        assert sorted(bit_reversal_order(6)) == list(range(6))
        assert bit_reversal_order(1) == [0]

    @pytest.mark.parametrize("n_views,M", [(10, 3), (12, 5), (7, 7), (9, 1)])
    def test_partition_properties(self, n_views, M):
        part = SubsetPartition.bit_reversal(n_views, M)
        allv = sorted(v for lst in part.view_lists for v in lst)
        assert allv == list(range(n_views))
        sizes = [len(v) for v in part.view_lists]
        assert max(sizes) - min(sizes) <= 1

    def test_invalid_partitions(self):
        with pytest.raises(ValueError):
            SubsetPartition(((0, 1), (1, 2)))
        with pytest.raises(ValueError):
            SubsetPartition.bit_reversal(4, 5)

    def test_M1_identical_to_full(self):
        rng = np.random.default_rng(4)
        P = Projector(ImageGrid(16, 16), ScanGeometry.parallel(9, 20))
        part = SubsetPartition.bit_reversal(9, 1)
        x = rng.random((16, 16))
        y = rng.random((9, 20))
        assert np.array_equal(P.subset_forward(x, 0, part), P.forward(x))
        assert np.array_equal(P.subset_back(y, 0, part), P.back(y))

    def test_subsets_sum_to_full(self):
        rng = np.random.default_rng(5)
        P = Projector(ImageGrid(20, 20), ScanGeometry.parallel(24, 28))
        part = SubsetPartition.bit_reversal(24, 4)
        ops = P.subsets(part)
        x = rng.random((20, 20))
        y = rng.random((24, 28))
        full = P.back(y)
        summed = sum(ops.back(ym, m) for m, ym in enumerate(ops.split(y)))
        np.testing.assert_allclose(summed, full, rtol=1e-12)
        fwd = np.zeros((24, 28))
        for m, views in enumerate(part.view_lists):
            fwd[list(views)] = ops.forward(x, m)
        np.testing.assert_allclose(fwd, P.forward(x), rtol=1e-12)

    def test_invalid_subset_index(self):
        P = Projector(ImageGrid(8, 8), ScanGeometry.parallel(8, 10))
        part = SubsetPartition.bit_reversal(8, 4)
        with pytest.raises(IndexError):
            P.subset_forward(np.zeros((8, 8)), 4, part)


class TestDA:
    def test_identity_system(self):
        grid = ImageGrid(4, 4)
        geo = ScanGeometry.parallel(1, 16)
        P = Projector(grid, geo, matrix=sp.identity(16))
        w = np.arange(16.0)
        np.testing.assert_allclose(build_DA(P, w).ravel(), w)

    def test_zero_weights(self):
        P = Projector(ImageGrid(8, 8), ScanGeometry.parallel(6, 10))
        assert not np.any(build_DA(P, np.zeros((6, 10))))

    def test_dominance(self):
        rng = np.random.default_rng(6)
        P = Projector(ImageGrid(12, 12), ScanGeometry.parallel(15, 17))
        w = rng.uniform(0, 5, P.sino_shape)
        DA = build_DA(P, w)
        A = P.A.toarray()
        H = A.T @ (w.ravel()[:, None] * A)
        for _ in range(100):
            x = rng.standard_normal(144)
            lhs = x @ (DA.ravel() * x)
            rhs = x @ H @ x
            assert lhs >= rhs - 1e-10 * abs(lhs)

    def test_negative_weights_rejected(self):
        P = Projector(ImageGrid(4, 4), ScanGeometry.parallel(2, 4))
        with pytest.raises(ValueError):
            build_DA(P, -np.ones((2, 4)))
