import math

import numpy as np
import pytest
import torch
from scipy import ndimage

from lpd import mesh as M
from lpd import render as R
from oracles import rasterize_hard_reference


def project_pixels(mesh, view, size):
    """Pixel-space (x, y) coordinates via the package camera."""
    return R.project_vertices(mesh, view, R.RenderSettings(image_size=size))[:, :2]


class FakeParts:
    def __init__(self, meshes, centroids, textures):
        self.meshes = meshes
        self.centroids = centroids
        self.textures = textures


def two_sphere_parts(colors, scale=0.35, offset=0.28):
    template = M.template_sphere()
    meshes = []
    for _ in colors:
        m = template.copy()
        m.vertices = m.vertices * 2 * scale
        meshes.append(m)
    centroids = [np.array([-offset, 0.0, 0.0]), np.array([offset, 0.0, 0.0])][: len(colors)]
    textures = [np.tile(np.asarray(c, dtype=float), (16, 16, 1)) for c in colors]
    return FakeParts(meshes, centroids, textures)


class TestProjection:
    def test_origin_projects_to_center(self):
        for az, el in [(0, 0), (45, 20), (200, -35)]:
            view = R.Viewpoint(az, el, 2.0)
            verts = torch.zeros(1, 1, 3, dtype=torch.float64)
            rot, pos, tanf = R.camera_batch([view], torch.float64)
            ndc, _, _ = R.project_points(verts, rot, pos, tanf)
            pix = R.ndc_to_pixels(ndc, 64)[0, 0]
            assert abs(pix[0] - 32.0) < 0.5 and abs(pix[1] - 32.0) < 0.5

    def test_azimuth_periodicity(self):
        mesh = M.make_icosphere(1)
        a = project_pixels(mesh, R.Viewpoint(17.0, 10.0, 2.0), 64)
        b = project_pixels(mesh, R.Viewpoint(377.0, 10.0, 2.0), 64)
        assert np.allclose(a, b, atol=1e-6)

    def test_pinhole_closed_form(self):
        view = R.Viewpoint(0.0, 0.0, 2.0, 30.0)
        verts = torch.tensor([[[0.1, 0.0, 0.0]]], dtype=torch.float64)
        rot, pos, tanf = R.camera_batch([view], torch.float64)
        ndc, _, _ = R.project_points(verts, rot, pos, tanf)
        pix = R.ndc_to_pixels(ndc, 64)[0, 0]
        expected = 64 / 2 * (0.1 / (2 * math.tan(math.radians(15))))
        assert abs(float(pix[0]) - (32 + expected)) < 1e-3

    def test_camera_object_duality(self):
        # rotating the mesh by +delta about y == rotating the camera by -delta
        rng = np.random.default_rng(0)
        mesh = M.make_icosphere(1)
        delta = 37.0
        q = M.quat_from_axis_angle([0, 1, 0], math.radians(delta))
        rot_mesh = M.TriangleMesh(mesh.vertices @ M.quat_to_matrix(q).T, mesh.faces)
        a = project_pixels(rot_mesh, R.Viewpoint(25.0, 15.0, 2.0), 128)
        b = project_pixels(mesh, R.Viewpoint(25.0 - delta, 15.0, 2.0), 128)
        assert np.allclose(a, b, atol=1e-5)

    def test_behind_camera_clamped(self):
        view = R.Viewpoint(0.0, 0.0, 0.3)
        mesh = M.make_icosphere(0)  # radius 0.5 > distance: some verts behind
        out = R.project_vertices(mesh, view, R.RenderSettings())
        assert np.all(out[:, 2] >= R.NEAR_CLIP - 1e-12)

    def test_invalid_viewpoint(self):
        with pytest.raises(ValueError):
            R.Viewpoint(0, 95.0, 2.0)
        with pytest.raises(ValueError):
            R.Viewpoint(0, 0, -1.0)


class TestSilhouette:
    def test_filling_cuboid_saturates(self):
        # coarse tessellation: central pixels sit deep inside faces
        m = M.make_primitive(M.PrimitiveSpec("cuboid", (0.5, 0.5, 0.5)), resolution=2)
        sil = R.render_silhouette(m, R.Viewpoint(10, 5, 1.4), R.RenderSettings(image_size=32))
        assert np.all(sil[12:20, 12:20] > 0.99)

    def test_offscreen_mesh_vanishes(self):
        m = M.make_icosphere(1)
        far = M.TriangleMesh(m.vertices + np.array([50.0, 0.0, 0.0]), m.faces)
        sil = R.render_silhouette(far, R.Viewpoint(0, 0, 2.0), R.RenderSettings(image_size=32))
        assert np.all(sil < 0.01)

    def test_against_hard_rasterizer_oracle(self):
        mesh = M.make_icosphere(3)
        view = R.Viewpoint(30, 20, 2.0)
        settings = R.RenderSettings(image_size=64, sigma=1e-4)
        soft = R.render_silhouette(mesh, view, settings)
        pix = project_pixels(mesh, view, 64)
        hard = rasterize_hard_reference(pix, mesh.faces, 64, 64)
        disagreement = np.mean((soft > 0.5) != hard)
        assert disagreement < 0.02

    def test_values_in_unit_interval(self):
        sil = R.render_silhouette(M.make_icosphere(2), R.Viewpoint(75, -10, 2.0),
                                  R.RenderSettings(image_size=48))
        assert sil.min() >= 0.0 and sil.max() <= 1.0

    def test_monotone_in_sigma_outside(self):
        mesh = M.make_icosphere(2)
        view = R.Viewpoint(0, 0, 2.0)
        lo = R.render_silhouette(mesh, view, R.RenderSettings(image_size=64, sigma=1e-4))
        hi = R.render_silhouette(mesh, view, R.RenderSettings(image_size=64, sigma=4e-4))
        pix = project_pixels(mesh, view, 64)
        hard = rasterize_hard_reference(pix, mesh.faces, 64, 64)
        outside = ~ndimage.binary_dilation(hard, iterations=1)
        assert np.all(hi[outside] >= lo[outside] - 1e-12)

    def test_gradient_matches_finite_differences(self):
        # sigma chosen large enough for smooth coverage; soft-rasterizer
        # gradients are approximate, hence the loose 5e-2 relative tolerance
        settings = R.RenderSettings(image_size=16, sigma=0.01)
        view = R.Viewpoint(0, 0, 2.0)
        base = np.array([[-0.2, -0.2, 0.0], [0.25, -0.1, 0.0], [0.0, 0.3, 0.0]])
        faces = torch.tensor([[0, 1, 2]])

        def mean_sil(v):
            sil, _ = R.soft_render(v.unsqueeze(0), faces, [view], settings)
            return sil.mean()

        v = torch.as_tensor(base, dtype=torch.float64).requires_grad_(True)
        mean_sil(v).backward()
        h = 1e-3
        for idx in [(0, 0), (1, 1), (2, 0)]:
            vp = torch.as_tensor(base).clone()
            vp[idx] += h
            vm = torch.as_tensor(base).clone()
            vm[idx] -= h
            fd = (float(mean_sil(vp)) - float(mean_sil(vm))) / (2 * h)
            grad = float(v.grad[idx])
            assert grad == pytest.approx(fd, rel=5e-2, abs=1e-8)

    def test_empty_mesh_rejected(self):
        empty = M.TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3)))
        with pytest.raises(ValueError):
            R.render_silhouette(empty, R.Viewpoint(), R.RenderSettings())


class TestColor:
    def test_constant_white_textures(self):
        # Constant white textures make the foreground blend exactly white, so
        # the composited image equals the occupancy channel (black background)
        # and is uniformly white over a white background.  Pixels on interior
        # tessellation edges keep occupancy < 1 by construction of the
        # probabilistic union, so the no-background check is the exact one.
        parts = two_sphere_parts([(1.0, 1.0, 1.0), (1.0, 1.0, 1.0)], scale=0.25, offset=0.15)
        view = R.Viewpoint(20, 10, 2.0)
        img = R.render_color(parts, view, R.RenderSettings(image_size=64))
        merged = M.merge_meshes([M.TriangleMesh(m.vertices + c, m.faces)
                                 for m, c in zip(parts.meshes, parts.centroids)])
        sil = R.render_silhouette(merged, view, R.RenderSettings(image_size=64))
        for ch in range(3):
            assert np.allclose(img[..., ch], sil, atol=1e-6)
        white_bg = R.RenderSettings(image_size=64, background_color=(1.0, 1.0, 1.0))
        img_white = R.render_color(parts, view, white_bg)
        hard, _ = R.rasterize_hard(merged.vertices, merged.faces, view, white_bg)
        assert np.all(img_white[hard] > 1.0 - 1e-3)

    def test_two_parts_red_blue(self):
        parts = two_sphere_parts([(1.0, 0.0, 0.0), (0.0, 0.0, 1.0)])
        img = R.render_color(parts, R.Viewpoint(0, 0, 2.0), R.RenderSettings(image_size=64))
        left = img[:, :28].reshape(-1, 3)
        right = img[:, 36:].reshape(-1, 3)
        left = left[left.sum(1) > 0.3]
        right = right[right.sum(1) > 0.3]
        assert left[:, 0].mean() > 0.9 and left[:, 2].mean() < 1e-6
        assert right[:, 2].mean() > 0.9 and right[:, 0].mean() < 1e-6

    def test_depth_temperature_front_wins(self):
        # two stacked faces, front red / back blue; tiny gamma puts all the
        # blend weight on the nearer face
        verts = torch.tensor([
            [-0.3, -0.3, 0.2], [0.3, -0.3, 0.2], [0.0, 0.4, 0.2],    # front
            [-0.3, -0.3, -0.2], [0.3, -0.3, -0.2], [0.0, 0.4, -0.2],  # back
        ], dtype=torch.float64)
        faces = torch.tensor([[0, 1, 2], [3, 4, 5]])
        face_part = torch.tensor([0, 1])
        face_uv = torch.full((2, 3, 2), 0.5, dtype=torch.float64)
        tex = torch.zeros(1, 2, 8, 8, 3, dtype=torch.float64)
        tex[0, 0, :, :, 0] = 1.0  # part 0 red
        tex[0, 1, :, :, 2] = 1.0  # part 1 blue
        settings = R.RenderSettings(image_size=32, gamma=1e-4)
        _, img = R.soft_render(verts.unsqueeze(0), faces, [R.Viewpoint(0, 0, 2.0)],
                               settings, textures=tex, face_part=face_part, face_uv=face_uv)
        center = img[0, 16, 16]
        assert float(center[0]) > 0.99 and float(center[2]) < 0.01

    def test_part_order_invariance(self):
        view = R.Viewpoint(10, 5, 2.0)
        settings = R.RenderSettings(image_size=48)
        a = R.render_color(two_sphere_parts([(1, 0, 0), (0, 0, 1)]), view, settings)
        swapped = two_sphere_parts([(0, 0, 1), (1, 0, 0)])
        swapped.centroids = swapped.centroids[::-1]
        b = R.render_color(swapped, view, settings)
        assert np.allclose(a, b, atol=1e-6)

    def test_missing_texture_rejected(self):
        parts = two_sphere_parts([(1, 0, 0), (0, 0, 1)])
        parts.textures = None
        with pytest.raises(ValueError):
            R.render_color(parts, R.Viewpoint(), R.RenderSettings())


class TestHardRasterizer:
    def test_matches_reference(self):
        mesh = M.make_primitive(M.PrimitiveSpec("cone", (0.4, 0.3, 0.4)))
        view = R.Viewpoint(50, 25, 2.0)
        settings = R.RenderSettings(image_size=96)
        mask, _ = R.rasterize_hard(mesh.vertices, mesh.faces, view, settings)
        pix = project_pixels(mesh, view, 96)
        ref = rasterize_hard_reference(pix, mesh.faces, 96, 96)
        assert np.mean(mask != ref) < 0.002

    def test_depth_ordering(self):
        # nearer of two overlapping spheres owns the overlap color
        template = M.make_icosphere(2)
        near = M.TriangleMesh(template.vertices * 0.5 + [0, 0, 0.2], template.faces)
        far = M.TriangleMesh(template.vertices * 0.5 + [0, 0, -0.2], template.faces)
        merged = M.merge_meshes([near, far])
        face_color = np.zeros((merged.num_faces, 3))
        face_color[: near.num_faces, 0] = 1.0
        face_color[near.num_faces:, 2] = 1.0
        _, img = R.rasterize_hard(merged.vertices, merged.faces,
                                  R.Viewpoint(0, 0, 2.0), R.RenderSettings(image_size=64),
                                  face_color=face_color)
        assert img[32, 32, 0] == 1.0 and img[32, 32, 2] == 0.0


class TestUV:
    def test_north_pole(self):
        t = M.template_sphere()
        uv = R.uv_template(t)
        pole = np.argmin(np.linalg.norm(t.vertices - [0, 0.5, 0], axis=1))
        assert uv[pole, 1] == pytest.approx(1.0, abs=1e-6)

    def test_equator_seam_vertex(self):
        t = M.template_sphere()
        uv = R.uv_template(t)
        seam = np.argmin(np.linalg.norm(t.vertices - [0.5, 0, 0], axis=1))
        assert uv[seam, 1] == pytest.approx(0.5, abs=1e-6)
        assert min(abs(uv[seam, 0]), abs(uv[seam, 0] - 1.0)) < 1e-6

    def test_range(self):
        uv = R.uv_template(M.template_sphere())
        assert uv.min() >= 0.0 and uv.max() <= 1.0

    def test_non_template_rejected(self):
        bad = M.make_primitive(M.PrimitiveSpec("cuboid", (0.3, 0.3, 0.3)))
        with pytest.raises(ValueError):
            R.uv_template(bad)

    def test_face_table_unwraps_seam(self):
        t = M.template_sphere()
        table = R.face_uv_table(t).numpy()
        span = table[:, :, 0].max(1) - table[:, :, 0].min(1)
        assert span.max() < 0.5


class TestImageIO:
    def test_png_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.random((32, 32, 3))
        path = tmp_path / "img.png"
        R.save_image(path, img)
        back = R.load_image(path)
        assert back.shape == (32, 32, 3)
        assert np.abs(back - img).max() < 1.0 / 255.0 + 1e-9

    def test_silhouette_threshold(self, tmp_path):
        sil = np.zeros((16, 16))
        sil[4:12, 4:12] = 1.0
        path = tmp_path / "sil.png"
        R.save_image(path, sil)
        mask = R.load_silhouette(path)
        assert np.array_equal(mask, sil > 0.5)
