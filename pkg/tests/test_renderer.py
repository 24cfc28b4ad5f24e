import numpy as np
import pytest

from conftest import random_params
from facefit import FaceParams, render, render_backward
from facefit.losses import pixel_loss
from facefit.renderer import NONE, Renderer, gradcheck, rasterize, shade_visible
from reference import reference_render


def brute_coverage(tri, width, height):
    """Pixel centers inside a single triangle, tested with barycentric signs."""
    (x0, y0), (x1, y1), (x2, y2) = tri
    out = np.zeros((height, width), dtype=bool)
    det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    for r in range(height):
        for c in range(width):
            px, py = c + 0.5, r + 0.5
            l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / det
            l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / det
            out[r, c] = l0 > 0 and l1 > 0 and 1 - l0 - l1 > 0
    return out


def screen(points, z=0.0):
    pts = np.asarray(points, dtype=np.float64)
    return np.c_[pts, np.full(len(pts), z)]


def test_single_small_triangle():
    tri = [(8.1, 8.1), (9.0, 8.2), (8.4, 10.0)]
    cov, depth, tid, bary = rasterize(screen(tri), [[0, 1, 2]], 16, 16)
    oracle = brute_coverage(tri, 16, 16)
    assert np.array_equal(cov, oracle)
    assert sorted(zip(*np.nonzero(cov))) == [(8, 8), (9, 8)]
    np.testing.assert_allclose(bary[cov].sum(1), 1.0, atol=1e-12)


def test_random_triangles_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(30):
        tri = rng.uniform(-2, 18, (3, 2))
        cov = rasterize(screen(tri), [[0, 1, 2]], 16, 16)[0]
        oracle = brute_coverage(tri, 16, 16)
        # both windings rasterize; only exact edge hits may differ from the strict oracle
        assert np.all(oracle <= cov)
        assert (cov & ~oracle).sum() <= 2


def test_shared_edges_cover_each_center_once():
    # a 6x6 lattice of quads with vertices on pixel centers: every tie is exact
    n = 6
    xs = 2.5 + 2 * np.arange(n)
    grid = np.array([(x, y) for y in xs for x in xs])
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, i * n + j + 1, (i + 1) * n + j, (i + 1) * n + j + 1
            tris += [[a, b, d], [a, d, c]]
    counts = np.zeros((16, 16), dtype=int)
    for t in tris:
        counts += rasterize(screen(grid), [t], 16, 16)[0]
    # the union covers the lattice interior plus its top and left borders, each center once
    assert counts.max() == 1
    assert counts.sum() == 10 * 10
    together = rasterize(screen(grid), tris, 16, 16)[0]
    assert np.array_equal(together, counts == 1)


def test_depth_test_and_tie_break():
    quad = [(0, 0), (16, 0), (0, 16), (16, 16)]
    s = screen(quad)
    near = s.copy()
    near[:, 2] = 1.0
    verts = np.vstack([s, near])
    tris = np.array([[0, 1, 2], [5, 6, 4], [1, 3, 2]])
    cov, depth, tid, _ = rasterize(verts, tris, 16, 16)
    # triangle 1 is nearer and wins where it covers
    assert np.all(depth[tid == 1] == 1.0)
    assert (tid == 1).sum() > 0 and (tid == 0).sum() == 0
    # coplanar duplicates: the lower index wins everywhere
    dup = rasterize(s, [[1, 3, 2], [0, 1, 2], [2, 1, 0], [0, 1, 2]], 16, 16)[2]
    assert set(np.unique(dup)) == {0, 1}


def test_traversal_order_does_not_matter(model):
    p = random_params(model, 3)
    out = render(model, p, 32, 32)
    from facefit.decoder import decode_geometry
    from facefit.scene import project
    pos = decode_geometry(model, p.alpha, p.delta)
    scr = project(pos, p.cam, 32, 32)
    perm = np.random.default_rng(0).permutation(model.n_triangles)
    cov, _, tid, _ = rasterize(scr, model.triangles[perm], 32, 32)
    assert np.array_equal(cov, out.coverage)
    mapped = np.where(cov, perm[np.where(cov, tid, 0)], NONE)
    assert np.array_equal(mapped, out.tri_id)


def test_empty_mesh_and_bad_size():
    cov, depth, tid, bary = rasterize(np.zeros((0, 3)), np.zeros((0, 3), dtype=int), 4, 3)
    assert cov.shape == (3, 4) and not cov.any() and np.all(tid == NONE)
    with pytest.raises(ValueError):
        rasterize(np.zeros((0, 3)), np.zeros((0, 3), dtype=int), 0, 3)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_render_matches_reference(small_model, seed):
    p = random_params(small_model, seed)
    out = render(small_model, p, 32, 32)
    color, tid = reference_render(small_model, p.to_vector(), 32, 32)
    assert np.abs(out.color - color).max() <= 1e-6
    assert np.array_equal(out.tri_id, tid)


def test_render_output_invariants(model):
    for seed in range(5):
        out = render(model, random_params(model, seed), 48, 40)
        assert out.color.shape == (40, 48, 3)
        assert np.array_equal(out.coverage, out.tri_id != NONE)
        np.testing.assert_allclose(out.bary[out.coverage].sum(1), 1.0, atol=1e-5)
        assert out.color.min() >= 0 and out.color.max() <= 1
        assert np.all(out.color[~out.coverage] == 0)
        assert np.all(np.isneginf(out.depth[~out.coverage]))


def test_mean_face_is_deterministic(model):
    zero = FaceParams.zeros_like_model(model)
    a = render(model, zero, 64, 64).color
    b = render(model, zero.copy(), 64, 64).color
    assert a.tobytes() == b.tobytes()


def test_mean_face_fills_frame(model):
    from facefit.scene import default_light
    p = FaceParams.zeros_like_model(model)
    p.phi[:] = default_light()
    out = render(model, p, 64, 64)
    assert 0.3 < out.coverage.mean() < 0.9
    assert out.color[out.coverage].mean() > 0.2


def test_zero_light_is_black(model):
    p = random_params(model, 0)
    p.phi[:] = 0
    out = render(model, p, 32, 32)
    assert out.coverage.any() and np.all(out.color == 0)


def test_zero_adjoint_and_shape_check(model):
    p = random_params(model, 1)
    assert np.all(render_backward(model, p, 16, 16, np.zeros((16, 16, 3))) == 0)
    with pytest.raises(ValueError):
        render_backward(model, p, 16, 16, np.zeros((16, 15, 3)))
    with pytest.raises(RuntimeError):
        Renderer(model, 8, 8).backward(np.zeros((8, 8, 3)))


def test_renderer_object_matches_functions(model):
    p = random_params(model, 2)
    adj = np.random.default_rng(0).normal(size=(24, 24, 3))
    r = Renderer(model, 24, 24)
    out = r.forward(p)
    assert np.array_equal(out.color, render(model, p, 24, 24).color)
    assert np.array_equal(r.backward(adj), render_backward(model, p, 24, 24, adj))


def test_translation_and_scale_get_no_image_gradient(model):
    p = random_params(model, 4)
    g = render_backward(model, p, 32, 32, np.ones((32, 32, 3)))
    assert np.all(g[-3:] == 0)
    assert np.any(g[-6:-3] != 0)


def test_saturated_pixels_pass_no_gradient(model):
    p = random_params(model, 5)
    p.phi *= 100.0
    out = render(model, p, 32, 32)
    assert np.all(out.color[out.coverage] == 1.0) or np.all(
        (out.color[out.coverage] == 0) | (out.color[out.coverage] == 1))
    g = render_backward(model, p, 32, 32, np.ones((32, 32, 3)))
    assert np.all(g == 0)


def test_frozen_visibility_is_shading_at_fixed_bary(model):
    p = random_params(model, 6)
    out = render(model, p, 32, 32)
    np.testing.assert_array_equal(shade_visible(model, p, out.tri_id, out.bary), out.color)
    rng = np.random.default_rng(1)
    adj = rng.normal(size=(32, 32, 3))
    g = render_backward(model, p, 32, 32, adj)
    # phi is linear at fixed visibility: differences are exact up to rounding
    theta = p.to_vector()
    for i in (224, 230, 250):
        d = np.zeros_like(theta)
        d[i] = 1e-3
        fp = shade_visible(model, FaceParams.from_vector(theta + d, p.sizes), out.tri_id, out.bary)
        fm = shade_visible(model, FaceParams.from_vector(theta - d, p.sizes), out.tri_id, out.bary)
        num = np.sum(adj * (fp - fm)) / 2e-3
        assert abs(num - g[i]) <= 1e-6 * max(abs(num), 1e-9)


def test_gradcheck_blocks(model):
    p = random_params(model, 7)
    rep = gradcheck(model, p, 32, 32, blocks=("phi", "gamma"), tolerance=1e-4)
    assert rep.passed, rep.summary()
    rep = gradcheck(model, p, 32, 32, blocks=("alpha", "delta", "cam"), tolerance=1e-2)
    assert rep.passed, rep.summary()
    assert rep.n_masked_pixels > 0
    s = rep.summary()
    assert set(s["blocks"]) == {"alpha", "delta", "cam"}
    assert all(len(b.rel_error) == len(b.indices) for b in rep.blocks)


def test_gradcheck_detects_a_wrong_gradient(model, monkeypatch):
    import facefit.renderer as R
    real = R.render_backward

    def wrong(*args):
        g = real(*args)
        g[226] *= 1.01
        return g

    monkeypatch.setattr(R, "render_backward", wrong)
    rep = gradcheck(model, random_params(model, 8), 24, 24, blocks=("phi",), tolerance=1e-4)
    assert not rep.passed
    assert rep.blocks[0].rel_error.argmax() == 2


def test_gradcheck_rejects_unknown_block(model):
    with pytest.raises(ValueError):
        gradcheck(model, random_params(model, 0), 8, 8, blocks=("beta",))


@pytest.mark.parametrize("seed", range(20))
def test_pixel_gradient_is_a_descent_direction(model, seed):
    p, q = random_params(model, seed), random_params(model, seed + 100)
    target = render(model, q, 32, 32).color
    loss, adj = pixel_loss(target, render(model, p, 32, 32).color)
    g = render_backward(model, p, 32, 32, adj)
    step = FaceParams.from_vector(p.to_vector() - 1e-3 * g, p.sizes)
    assert pixel_loss(target, render(model, step, 32, 32).color)[0] < loss


def test_offscreen_face_has_zero_image_gradient(model):
    p = random_params(model, 9)
    p.cam[3] = 10.0
    out = render(model, p, 16, 16)
    assert not out.coverage.any()
    assert np.all(render_backward(model, p, 16, 16, np.ones((16, 16, 3))) == 0)
