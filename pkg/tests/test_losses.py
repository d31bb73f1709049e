"""Loss terms: values against independent oracles, gradients against FD."""
import numpy as np
import pytest

from trisplat.geometry import CameraIntrinsics, CameraPose, Triangle3D
from trisplat.losses import (LossWeights, depth_from_fragments, depth_normals,
                             distortion_loss, normal_loss, opacity_loss,
                             photometric_loss, size_loss, size_loss_batch,
                             ssim, total_loss)
from trisplat.render import FragmentData, render
from trisplat.soup import TriangleSoup

from conftest import random_scene, single_triangle


def reference_ssim(x, y):
    """Straightforward sliding-window SSIM, independent of the library path."""
    window = 11
    sigma = 1.5
    k1, k2 = 0.01, 0.03
    half = window // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g1 /= g1.sum()
    w2d = np.outer(g1, g1)
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        h, w = xc.shape
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                px = xc[i:i + window, j:j + window]
                py = yc[i:i + window, j:j + window]
                mx = (w2d * px).sum()
                my = (w2d * py).sum()
                vx = (w2d * px * px).sum() - mx ** 2
                vy = (w2d * py * py).sum() - my ** 2
                cov = (w2d * px * py).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                            / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def make_fragments(per_pixel):
    """FragmentData from a list (one entry per pixel) of (tri, w, z) lists."""
    offsets = np.zeros(len(per_pixel) + 1, dtype=np.int64)
    tri, w, z = [], [], []
    for i, frags in enumerate(per_pixel):
        offsets[i + 1] = offsets[i] + len(frags)
        for t, wi, zi in frags:
            tri.append(t)
            w.append(wi)
            z.append(zi)
    return FragmentData(offsets=offsets, triangle=np.array(tri, dtype=np.int64),
                        weight=np.array(w, dtype=np.float64),
                        depth=np.array(z, dtype=np.float64))


class TestWeights:
    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(beta_opacity=-1.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_dssim=1.5)


class TestSsim:
    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, (20, 20, 3))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(reference_ssim(x, y), abs=1e-6)

    def test_identical_images(self):
        x = np.random.default_rng(2).uniform(0, 1, (16, 16, 3))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16, 3)), np.zeros((17, 16, 3)))


class TestPhotometric:
    def test_identical_is_zero(self):
        x = np.random.default_rng(3).uniform(0, 1, (16, 16, 3))
        loss, grad = photometric_loss(x, x, 0.2)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        loss, _ = photometric_loss(np.zeros((16, 16, 3)), np.ones((16, 16, 3)), 0.0)
        assert loss == pytest.approx(1.0)

    def test_symmetric_for_l1(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, (14, 14, 3))
        y = rng.uniform(0, 1, (14, 14, 3))
        assert photometric_loss(x, y, 0.0)[0] == pytest.approx(
            photometric_loss(y, x, 0.0)[0])

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        y = rng.uniform(0.2, 0.8, (16, 16, 3))
        _, grad = photometric_loss(x, y, 0.2)
        h = 1e-6
        for _ in range(10):
            i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
            xp, xm = x.copy(), x.copy()
            xp[i, j, c] += h
            xm[i, j, c] -= h
            fd = (photometric_loss(xp, y, 0.2)[0]
                  - photometric_loss(xm, y, 0.2)[0]) / (2 * h)
            assert grad[i, j, c] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_small_images_skip_ssim(self):
        x = np.full((4, 4, 3), 0.3)
        y = np.full((4, 4, 3), 0.7)
        loss, _ = photometric_loss(x, y, 0.5)
        assert loss == pytest.approx(0.5 * 0.4)  # (1-lam)*L1, SSIM term = 0


class TestOpacity:
    def test_examples(self):
        assert opacity_loss([])[0] == 0.0
        v, g = opacity_loss([0.2, 0.4])
        assert v == pytest.approx(0.3)
        assert np.allclose(g, 0.5)


class TestDistortion:
    def test_single_fragment_is_zero(self):
        frags = make_fragments([[(0, 0.5, 1.0)], []])
        assert distortion_loss(frags)[0] == 0.0

    def test_equal_depths_are_zero(self):
        frags = make_fragments([[(0, 0.5, 1.0), (1, 0.3, 1.0)]])
        assert distortion_loss(frags)[0] == pytest.approx(0.0)

    def test_pair_example(self):
        frags = make_fragments([[(0, 0.5, 1.0), (1, 0.5, 2.0)]])
        assert distortion_loss(frags)[0] == pytest.approx(0.5)

    def test_fast_path_matches_pairwise(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            per_pixel = []
            for _ in range(rng.integers(1, 9)):
                n = int(rng.integers(0, 6))
                zs = np.sort(rng.uniform(1, 5, n))
                per_pixel.append([(0, float(rng.uniform(0, 0.4)), float(z))
                                  for z in zs])
            frags = make_fragments(per_pixel)
            from trisplat.losses import _distortion_pairwise
            v, dw, dz = distortion_loss(frags)
            scale = 1.0 / max(len(per_pixel), 1)
            v2, dw2, dz2 = _distortion_pairwise(frags.offsets, frags.weight,
                                                frags.depth, scale)
            assert v == pytest.approx(v2, abs=1e-12)
            assert np.allclose(dw, dw2, atol=1e-12)
            assert np.allclose(dz, dz2, atol=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        per_pixel = [[(0, 0.3, 1.0), (1, 0.2, 1.7), (2, 0.25, 2.4)],
                     [(0, 0.4, 1.2), (2, 0.1, 3.0)]]
        frags = make_fragments(per_pixel)
        v, dw, dz = distortion_loss(frags)
        h = 1e-6
        for k in range(frags.count()):
            for arr, grad in ((frags.weight, dw), (frags.depth, dz)):
                orig = arr[k]
                arr[k] = orig + h
                vp = distortion_loss(frags)[0]
                arr[k] = orig - h
                vm = distortion_loss(frags)[0]
                arr[k] = orig
                assert grad[k] == pytest.approx((vp - vm) / (2 * h),
                                                rel=1e-5, abs=1e-9)


class TestNormal:
    def _scene(self):
        intr = CameraIntrinsics(fx=24, fy=24, cx=12, cy=12, width=24, height=24)
        pose = CameraPose(rotation=np.eye(3), translation=np.zeros(3))
        tri = single_triangle([[-1.5, -1.5, 2], [1.5, -1.5, 2], [0, 1.5, 2]],
                              opacity=0.9, sigma=0.3)
        soup = TriangleSoup.from_triangles([tri])
        out = render(soup, intr, pose, collect_fragments=True)
        depth = depth_from_fragments(out.fragments, 24, 24)
        return soup, out, depth, intr, pose

    def test_fronto_parallel_plane_is_zero(self):
        # triangle covers the whole image so the depth map has no boundary
        intr = CameraIntrinsics(fx=24, fy=24, cx=12, cy=12, width=24, height=24)
        pose = CameraPose(rotation=np.eye(3), translation=np.zeros(3))
        tri = single_triangle([[-10, -10, 2], [10, -10, 2], [0, 10, 2]],
                              opacity=0.9, sigma=0.3)
        soup = TriangleSoup.from_triangles([tri])
        out = render(soup, intr, pose, collect_fragments=True)
        depth = depth_from_fragments(out.fragments, 24, 24)
        value, _, _ = normal_loss(soup, out.fragments, depth, intr, pose)
        assert value == pytest.approx(0.0, abs=1e-3)

    def test_empty_fragments(self):
        soup = TriangleSoup.empty()
        frags = make_fragments([[], []])
        intr = CameraIntrinsics(fx=2, fy=2, cx=1, cy=1, width=2, height=1)
        pose = CameraPose(rotation=np.eye(3), translation=np.zeros(3))
        value, dv, dw = normal_loss(soup, frags, np.zeros((1, 2)), intr, pose)
        assert value == 0.0

    def test_vertex_gradient_matches_fd(self):
        # depth map held fixed (stop-gradient), fragments fixed
        rng = np.random.default_rng(8)
        soup, intr, pose = random_scene(rng, n_tri=3, width=24, height=24)
        out = render(soup, intr, pose, collect_fragments=True)
        if out.fragments.count() == 0:
            pytest.skip("no fragments in this draw")
        depth = depth_from_fragments(out.fragments, 24, 24)
        value, dv, dw = normal_loss(soup, out.fragments, depth, intr, pose)
        h = 1e-6
        for _ in range(8):
            t = rng.integers(len(soup))
            i, j = rng.integers(3), rng.integers(3)
            probe = soup.copy()
            probe.vertices[t, i, j] += h
            vp = normal_loss(probe, out.fragments, depth, intr, pose)[0]
            probe.vertices[t, i, j] -= 2 * h
            vm = normal_loss(probe, out.fragments, depth, intr, pose)[0]
            assert dv[t, i, j] == pytest.approx((vp - vm) / (2 * h),
                                                rel=1e-4, abs=1e-9)

    def test_weight_gradient_matches_fd(self):
        soup, out, depth, intr, pose = self._scene()
        value, dv, dw = normal_loss(soup, out.fragments, depth, intr, pose)
        h = 1e-6
        k = out.fragments.count() // 2
        out.fragments.weight[k] += h
        vp = normal_loss(soup, out.fragments, depth, intr, pose)[0]
        out.fragments.weight[k] -= 2 * h
        vm = normal_loss(soup, out.fragments, depth, intr, pose)[0]
        out.fragments.weight[k] += h
        assert dw[k] == pytest.approx((vp - vm) / (2 * h), rel=1e-5, abs=1e-12)

    def test_depth_normals_of_plane(self):
        intr = CameraIntrinsics(fx=16, fy=16, cx=8, cy=8, width=16, height=16)
        n = depth_normals(np.full((16, 16), 2.0), intr)
        assert np.allclose(n[4:-4, 4:-4], [0, 0, -1], atol=1e-6)


class TestSize:
    def test_unit_right_triangle(self):
        tri = single_triangle([[0, 0, 0.1], [1, 0, 0.1], [0, 1, 0.1]])
        assert size_loss(tri)[0] == pytest.approx(2.0)

    def test_scale_covariance(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=(3, 3))
        base = size_loss(single_triangle(v))[0]
        scaled = size_loss(single_triangle(2.0 * v))[0]
        assert scaled == pytest.approx(base / 4.0)

    def test_collinear_floor(self):
        tri = single_triangle([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
        value, grads = size_loss(tri)
        assert value == pytest.approx(2e8)
        assert np.allclose(grads, 0.0)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(10)
        v = rng.normal(size=(3, 3))
        _, grads = size_loss(single_triangle(v))
        h = 1e-6
        for i in range(3):
            for j in range(3):
                vp, vm = v.copy(), v.copy()
                vp[i, j] += h
                vm[i, j] -= h
                fd = (size_loss(single_triangle(vp))[0]
                      - size_loss(single_triangle(vm))[0]) / (2 * h)
                assert grads[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(11)
        soup, _, _ = random_scene(rng, n_tri=5)
        value, grads = size_loss_batch(soup)
        singles = [size_loss(t) for t in soup.to_triangles()]
        assert value == pytest.approx(np.mean([s[0] for s in singles]))
        for i, (_, g) in enumerate(singles):
            assert np.allclose(grads[i], g / len(soup))


class TestTotal:
    def test_all_zero(self):
        value, grads = total_loss(None, None, None, None, None, LossWeights())
        assert value == 0.0

    def test_linearity_in_betas(self):
        w1 = LossWeights(beta_opacity=0.01, beta_size=0.1)
        w2 = LossWeights(beta_opacity=0.02, beta_size=0.2)
        opac = (0.4, np.array([0.5, 0.5]))
        size = (3.0, np.zeros((2, 3, 3)))
        photo = (1.0, np.zeros((4, 4, 3)))
        v1, _ = total_loss(photo, opac, None, None, size, w1)
        v2, _ = total_loss(photo, opac, None, None, size, w2)
        assert v2 - 1.0 == pytest.approx(2.0 * (v1 - 1.0))

    def test_default_weights(self):
        w = LossWeights()
        assert w.beta_opacity == pytest.approx(0.0055)
        assert w.beta_normal == pytest.approx(0.0001)
        assert w.beta_size == pytest.approx(1e-8)
        assert w.lambda_dssim == pytest.approx(0.2)
