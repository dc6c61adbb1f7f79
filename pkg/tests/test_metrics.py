import itertools

import numpy as np
import pytest

from lpd import mesh as M
from lpd import metrics as X


def box_mesh(half_extent, center=(0, 0, 0)):
    m = M.make_primitive(M.PrimitiveSpec("cuboid", (half_extent,) * 3), resolution=8)
    return M.TriangleMesh(m.vertices + np.asarray(center, dtype=float), m.faces)


class TestVoxelize:
    def test_quarter_cube_occupancy(self):
        # half-extent 0.25 spans exactly 16 cells per axis at pitch 1/32
        grid = X.voxelize(box_mesh(0.25))
        assert 16 ** 3 <= grid.count <= 18 ** 3

    def test_empty_mesh(self):
        empty = M.TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3)))
        assert X.voxelize(empty).count == 0

    def test_union_of_disjoint_parts(self):
        a = box_mesh(0.12, (-0.3, 0, 0))
        b = box_mesh(0.12, (0.3, 0, 0))
        merged = M.merge_meshes([a, b])
        union = X.voxelize(a).occupancy | X.voxelize(b).occupancy
        assert np.array_equal(X.voxelize(merged).occupancy, union)

    def test_translation_covariance_one_pitch(self):
        pitch = 1.0 / 32
        a = X.voxelize(box_mesh(0.2)).occupancy
        b = X.voxelize(box_mesh(0.2, (pitch, 0, 0))).occupancy
        assert np.array_equal(a[:-1], b[1:])

    def test_outside_cube_clipped_with_warning(self, caplog):
        import logging
        mesh = box_mesh(0.25, (0.45, 0, 0))
        with caplog.at_level(logging.WARNING, logger="lpd.metrics"):
            grid = X.voxelize(mesh)
        assert grid.count > 0
        assert any("clipped" in r.message for r in caplog.records)

    def test_hollow_interior_filled(self):
        # flood fill cannot reach the inside of a closed box
        grid = X.voxelize(box_mesh(0.3))
        assert grid.occupancy[16, 16, 16]


class TestVoxelIou:
    def test_identical_nonempty(self):
        g = X.voxelize(box_mesh(0.2))
        assert X.voxel_iou(g, g) == 1.0

    def test_disjoint(self):
        a = X.voxelize(box_mesh(0.1, (-0.3, 0, 0)))
        b = X.voxelize(box_mesh(0.1, (0.3, 0, 0)))
        assert X.voxel_iou(a, b) == 0.0

    def test_both_empty(self):
        e = X.VoxelGrid(np.zeros((32, 32, 32), dtype=bool))
        assert X.voxel_iou(e, e) == 1.0

    def test_nested_half_occupancy(self):
        full = np.zeros((32, 32, 32), dtype=bool)
        full[6:26, 6:26, 6:26] = True
        half = np.zeros_like(full)
        half[6:26, 6:26, 6:16] = True
        assert X.voxel_iou(X.VoxelGrid(half), X.VoxelGrid(full)) == 0.5

    def test_nested_cubes_meshes(self):
        outer = X.voxelize(box_mesh(0.25))
        inner = X.voxelize(box_mesh(0.25 / 2 ** (1 / 3)))
        assert X.voxel_iou(inner, outer) == pytest.approx(0.5, abs=0.15)

    def test_symmetric(self):
        a = X.voxelize(box_mesh(0.2, (0.05, 0, 0)))
        b = X.voxelize(box_mesh(0.15))
        assert X.voxel_iou(a, b) == X.voxel_iou(b, a)


class TestSsim:
    def test_identity(self):
        rng = np.random.default_rng(0)
        x = rng.random((64, 64, 3))
        assert X.ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        x = np.zeros((32, 32))
        y = np.ones((32, 32))
        c1 = 0.01 ** 2
        expected = c1 / (1.0 + c1)
        assert X.ssim(x, y) == pytest.approx(expected, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        x, y = rng.random((48, 48)), rng.random((48, 48))
        assert X.ssim(x, y) == pytest.approx(X.ssim(y, x), abs=1e-9)

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            X.ssim(np.zeros((16, 16)), np.zeros((32, 32)))

    def test_in_range(self):
        rng = np.random.default_rng(2)
        val = X.ssim(rng.random((32, 32)), rng.random((32, 32)))
        assert -1.0 <= val <= 1.0


def parallel_squares(gap):
    # two unit squares (two triangles each) offset along z
    v = np.array([[-0.5, -0.5, 0], [0.5, -0.5, 0], [0.5, 0.5, 0], [-0.5, 0.5, 0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    a = M.TriangleMesh(v, f)
    b = M.TriangleMesh(v + [0, 0, gap], f)
    return a, b


class TestChamferEval:
    def test_self_distance_noise_floor(self):
        mesh = M.make_primitive(M.PrimitiveSpec("ellipsoid", (0.4, 0.3, 0.25)))
        assert X.chamfer_eval(mesh, mesh, samples=10_000, seed=0) < 1e-4

    def test_parallel_squares_analytic(self):
        a, b = parallel_squares(0.1)
        cd = X.chamfer_eval(a, b, samples=10_000, seed=1)
        assert cd == pytest.approx(0.02, rel=0.10)

    def test_sample_concentration(self):
        a, b = parallel_squares(0.07)
        lo = [X.chamfer_eval(a, b, samples=2000, seed=s) for s in range(10)]
        hi = [X.chamfer_eval(a, b, samples=4000, seed=100 + s) for s in range(10)]
        spread = np.std(lo)
        assert np.mean(hi) <= np.mean(lo) + 3 * spread

    def test_min_samples_enforced(self):
        a, b = parallel_squares(0.1)
        with pytest.raises(ValueError):
            X.chamfer_eval(a, b, samples=10)

    def test_zero_area_rejected(self):
        line = M.TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]),
                              np.array([[0, 1, 2]]))
        with pytest.raises(ValueError):
            X.chamfer_eval(line, line, samples=1000)

    def test_seeded_reproducible(self):
        a, b = parallel_squares(0.1)
        assert X.chamfer_eval(a, b, seed=5) == X.chamfer_eval(a, b, seed=5)


def random_grids(rng, n):
    grids = []
    for _ in range(n):
        occ = np.zeros((32, 32, 32), dtype=bool)
        x, y, z = rng.integers(4, 20, size=3)
        dx, dy, dz = rng.integers(4, 12, size=3)
        occ[x:x + dx, y:y + dy, z:z + dz] = True
        grids.append(X.VoxelGrid(occ))
    return grids


class TestMatchParts:
    def test_shuffled_identity(self):
        rng = np.random.default_rng(3)
        parts = random_grids(rng, 4)
        perm = [2, 0, 3, 1]
        pairs, scores, mean = X.match_parts([parts[p] for p in perm], parts)
        assert mean == 1.0
        assert all(perm[i] == j for i, j in pairs)

    def test_two_swapped(self):
        rng = np.random.default_rng(4)
        a, b = random_grids(rng, 2)
        pairs, scores, mean = X.match_parts([b, a], [a, b])
        assert sorted(pairs) == [(0, 1), (1, 0)]
        assert mean == 1.0

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_matches_exhaustive_oracle(self, k):
        rng = np.random.default_rng(10 + k)
        pred = random_grids(rng, k)
        ref = random_grids(rng, k)
        iou = np.array([[X.voxel_iou(p, r) for r in ref] for p in pred])
        best = max(sum(iou[i, p[i]] for i in range(k))
                   for p in itertools.permutations(range(k)))
        pairs, scores, mean = X.match_parts(pred, ref)
        assert scores.sum() == pytest.approx(best, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            X.match_parts([], [])


class TestPersistence:
    def test_voxel_rle_roundtrip(self, tmp_path):
        grid = X.voxelize(box_mesh(0.23, (0.1, -0.05, 0.02)))
        path = tmp_path / "grid.rle"
        X.save_voxels(path, grid)
        back = X.load_voxels(path)
        assert np.array_equal(back.occupancy, grid.occupancy)

    def test_metric_report_csv(self, tmp_path):
        rows = [{"class": "table", "metric": "voxel_iou", "value": 0.5, "n": 10},
                {"class": "all", "metric": "voxel_iou", "value": 0.45, "n": 20}]
        path = tmp_path / "report.csv"
        X.write_metric_report(path, rows)
        text = path.read_text()
        assert text.splitlines()[0] == "class,metric,value,n"
        assert len(text.splitlines()) == 3
        table = X.format_metric_table(rows)
        assert "voxel_iou" in table
