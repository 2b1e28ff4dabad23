import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import composite_pixelwise, gradcheck_camera, project_fd, random_scene, rel_err
from ocsplat import kernels
from ocsplat.render import (
    VAR_FLOOR,
    Splat1D,
    backward,
    project_gaussian,
    project_gaussians,
    render,
    render_color,
    render_oc,
)
from ocsplat.scene import CameraPose, GaussianPrimitive, Scene


def _splat(mean, var, depth, alpha, color, idx):
    return Splat1D(mean, var, depth, alpha, np.asarray(color, dtype=np.float64), idx)


def _as_tuples(splats):
    return [(s.mean_u, s.var_u, s.depth, s.opacity, s.color, s.source_index) for s in splats]


def test_on_axis_primitive_centered():
    cam = CameraPose((0.0, 0.0), 0.3, 50.0, 64)
    prim = GaussianPrimitive(2.0 * np.asarray(cam.forward), np.array([0.1, 0.1]), 0.0, 0.0, np.zeros(3))
    s = project_gaussian(prim, cam)
    assert s.mean_u == pytest.approx(32.0, abs=1e-12)


def test_behind_camera_is_culled():
    cam = CameraPose((0.0, 0.0), 0.0, 50.0, 64)
    prim = GaussianPrimitive(np.array([-1.0, 0.0]), np.array([0.1, 0.1]), 0.0, 0.0, np.zeros(3))
    assert project_gaussian(prim, cam) is None


def test_far_off_screen_is_culled():
    cam = CameraPose((0.0, 0.0), 0.0, 50.0, 64)
    prim = GaussianPrimitive(np.array([1.0, 3.0]), np.array([0.01, 0.01]), 0.0, 0.0, np.zeros(3))
    assert project_gaussian(prim, cam) is None


def test_projected_variance_matches_fd_jacobian():
    rng = np.random.default_rng(3)
    cam = gradcheck_camera()
    for _ in range(50):
        prim = random_scene(rng, 1)[0]
        s = project_gaussian(prim, cam)
        if s is None:
            continue
        u, jac = project_fd(cam, prim.position)
        var = jac @ prim.covariance() @ jac + VAR_FLOOR
        assert s.mean_u == pytest.approx(u, rel=1e-12)
        assert abs(s.var_u - var) / var < 1e-5


def test_empty_splat_list_is_background():
    img = render_color([], 16, background=(0.1, 0.2, 0.3))
    np.testing.assert_array_equal(img, np.tile([0.1, 0.2, 0.3], (16, 1)))


def test_single_opaque_splat_at_mean():
    img = render_color([_splat(5.0, 2.0, 1.0, 1.0, [0.2, 0.4, 0.6], 0)], 16)
    np.testing.assert_allclose(img[5], [0.2, 0.4, 0.6], atol=1e-15)


def test_two_overlapping_splats_match_oracle():
    splats = [_splat(7.0, 4.0, 2.0, 0.7, [1, 0, 0], 0), _splat(9.0, 9.0, 1.0, 0.5, [0, 1, 0.5], 1)]
    want, want_oc, _, _ = composite_pixelwise(_as_tuples(splats), 16, (0.1, 0.1, 0.1), oc=[0.3, 0.9])
    np.testing.assert_allclose(render_color(splats, 16, (0.1, 0.1, 0.1)), want, atol=1e-12)
    np.testing.assert_allclose(render_oc(splats, [0.3, 0.9], 16), want_oc, atol=1e-12)


def test_oc_examples():
    splats = [_splat(4.0, 1.0, 1.0, 1.0, [1, 1, 1], 0)]
    np.testing.assert_array_equal(render_oc(splats, [0.0], 8), np.zeros(8))
    assert render_oc(splats, [0.7], 8)[4] == pytest.approx(0.7, abs=1e-15)


def test_depth_ties_broken_by_index():
    a = _splat(5.0, 3.0, 1.0, 0.8, [1, 0, 0], 0)
    b = _splat(5.0, 3.0, 1.0, 0.8, [0, 0, 1], 1)
    np.testing.assert_array_equal(render_color([a, b], 10), render_color([b, a], 10))
    assert render_color([a, b], 10)[5, 0] > render_color([a, b], 10)[5, 2]


@pytest.mark.parametrize("seed", range(10))
def test_random_scene_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = gradcheck_camera()
    scene = random_scene(rng, 8)
    oc = rng.uniform(0, 0.4, len(scene))
    out = render(scene, cam, oc_values=oc, background=(0.3, 0.2, 0.1))
    splats = out.projection.splats(scene)
    want, want_oc, w, t_final = composite_pixelwise(
        _as_tuples(splats), cam.width, (0.3, 0.2, 0.1), oc=oc[out.projection.order]
    )
    np.testing.assert_allclose(out.color, want, atol=1e-12)
    np.testing.assert_allclose(out.oc, want_oc, atol=1e-12)
    np.testing.assert_allclose(out.splat_weights(), w, atol=1e-12)
    np.testing.assert_allclose(out.t_final, t_final, atol=1e-12)


def test_color_and_oc_share_weights():
    rng = np.random.default_rng(11)
    cam = gradcheck_camera()
    scene = random_scene(rng, 10)
    oc = rng.uniform(0, 1, len(scene))
    out = render(scene, cam, oc_values=oc)
    w = out.splat_weights()
    np.testing.assert_allclose(w @ out.colors, out.color, atol=1e-12)
    np.testing.assert_allclose(w @ oc[out.projection.order], out.oc, atol=1e-12)


@given(seed=st.integers(0, 2**31 - 1), n=st.integers(0, 12))
@settings(max_examples=60, deadline=None)
def test_weights_and_transmittance_bounds(seed, n):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n)
    out = render(scene, gradcheck_camera())
    w = out.splat_weights()
    assert np.all((w >= 0) & (w <= 1))
    assert np.all(out.weight_sums <= 1 + 1e-9)
    assert np.all((out.t_final >= 0) & (out.t_final <= 1))
    # transmittance is non-increasing front to back
    a = out.opacity[None, :] * np.exp(
        -0.5 * (np.arange(64)[:, None] - out.projection.mean[None, :]) ** 2 / out.projection.var[None, :]
    )
    t = np.cumprod(np.concatenate([np.ones((64, 1)), 1 - a], axis=1), axis=1)
    assert np.all(np.diff(t, axis=1) <= 0)


def test_conservation_without_early_termination():
    rng = np.random.default_rng(5)
    cam = gradcheck_camera()
    worst = 0.0
    for _ in range(50):
        scene = random_scene(rng, 6)
        scene.opacity_logits = np.clip(scene.opacity_logits, -3, 0.5)
        out = render(scene, cam)
        assert np.all(out.t_final >= 1e-4)
        worst = max(worst, float(np.max(np.abs(out.weight_sums + out.t_final - 1))))
    assert worst <= 1e-9


def test_zero_residual_zero_gradient():
    rng = np.random.default_rng(2)
    cam = gradcheck_camera()
    scene = random_scene(rng, 5)
    out = render(scene, cam)
    g = backward(scene, cam, out, np.zeros((64, 3)))
    for arr in (g.positions, g.scales, g.rotations, g.opacity_logits, g.colors):
        assert not np.any(arr)


def test_unweighted_primitive_has_zero_gradp():
    rng = np.random.default_rng(4)
    cam = gradcheck_camera()
    scene = random_scene(rng, 4)
    hidden = Scene(np.array([[0.0, -2.0]]), np.array([[0.1, 0.1]]), np.zeros(1), np.zeros(1), np.ones((1, 3)))
    scene = scene.concat(hidden)
    out = render(scene, cam)
    g = backward(scene, cam, out, rng.normal(size=(64, 3)))
    assert g.grad_p[-1] == 0.0


def _fd_check(scene, cam, background, rng, h=1e-5):
    G = rng.normal(size=(cam.width, 3))
    out = render(scene, cam, background=background)
    grads = backward(scene, cam, out, G)

    def f(s):
        return float((render(s, cam, background=background).color * G).sum())

    worst = 0.0
    for name in ("positions", "scales", "rotations", "opacity_logits", "colors"):
        arr = getattr(scene, name)
        fd = np.zeros_like(arr)
        for ix in np.ndindex(arr.shape):
            sp, sm = scene.copy(), scene.copy()
            getattr(sp, name)[ix] += h
            getattr(sm, name)[ix] -= h
            fd[ix] = (f(sp) - f(sm)) / (2 * h)
        worst = max(worst, rel_err(getattr(grads, name), fd))
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    assert _fd_check(random_scene(rng, 10), gradcheck_camera(), (0.2, 0.3, 0.1), rng) < 1e-4


def test_gradp_is_position_gradient_norm():
    rng = np.random.default_rng(8)
    cam = gradcheck_camera()
    scene = random_scene(rng, 6)
    out = render(scene, cam)
    g = backward(scene, cam, out, rng.normal(size=(64, 3)))
    np.testing.assert_allclose(g.grad_p, np.linalg.norm(g.positions, axis=1), rtol=0, atol=0)


# -- backends ----------------------------------------------------------------

needs_ext = pytest.mark.skipif(kernels.cython_backend is None, reason="compiled backend not built")


def _kernel_inputs(seed, n=30, width=64):
    rng = np.random.default_rng(seed)
    return (
        rng.uniform(-5, width + 5, n),
        rng.uniform(0.3, 30, n),
        rng.uniform(0.05, 0.99, n),
        rng.uniform(0, 1, (n, 3)),
        rng.uniform(0, 0.3, n),
        width,
        rng.uniform(0, 1, 3),
        rng.normal(size=(width, 3)),
    )


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    mean, var, op, col, oc, width, bg, grad = _kernel_inputs(seed)
    py, cy = kernels.python_backend, kernels.cython_backend
    for a, b in zip(py.composite_forward(mean, var, op, col, oc, width, bg),
                    cy.composite_forward(mean, var, op, col, oc, width, bg)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    for a, b in zip(py.composite_backward(mean, var, op, col, width, bg, grad),
                    cy.composite_backward(mean, var, op, col, width, bg, grad)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(py.splat_weights(mean, var, op, width), cy.splat_weights(mean, var, op, width),
                               rtol=1e-12, atol=1e-14)


@needs_ext
def test_threads_bit_identical():
    mean, var, op, col, oc, width, bg, grad = _kernel_inputs(9, n=80)
    cy = kernels.cython_backend
    f1 = cy.composite_forward(mean, var, op, col, oc, width, bg, 1)
    f4 = cy.composite_forward(mean, var, op, col, oc, width, bg, 4)
    b1 = cy.composite_backward(mean, var, op, col, width, bg, grad, 1)
    b4 = cy.composite_backward(mean, var, op, col, width, bg, grad, 4)
    for a, b in zip((*f1, *b1), (*f4, *b4)):
        np.testing.assert_array_equal(a, b)


def test_empty_kernel_inputs():
    for be in filter(None, (kernels.python_backend, kernels.cython_backend)):
        img, oc, ws, tf, nu = be.composite_forward(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 3)),
                                                   np.zeros(0), 5, np.array([0.5, 0.5, 0.5]))
        np.testing.assert_array_equal(img, np.full((5, 3), 0.5))
        np.testing.assert_array_equal(tf, np.ones(5))


def test_render_deterministic_across_threads():
    rng = np.random.default_rng(12)
    cam = gradcheck_camera()
    scene = random_scene(rng, 40)
    a = render(scene, cam, threads=1)
    b = render(scene, cam, threads=4)
    np.testing.assert_array_equal(a.color, b.color)
    G = rng.normal(size=(64, 3))
    ga = backward(scene, cam, a, G, threads=1)
    gb = backward(scene, cam, b, G, threads=4)
    np.testing.assert_array_equal(ga.positions, gb.positions)
    np.testing.assert_array_equal(ga.colors, gb.colors)


def test_frustum_guard_culls_grazing_primitives():
    cam = CameraPose((0.0, 0.0), 0.0, 32.0, 64)
    # just past the near plane but far to the side
    prim = GaussianPrimitive(np.array([0.02, 1.0]), np.array([0.3, 0.3]), 0.0, 3.0, np.ones(3))
    assert project_gaussian(prim, cam) is None
    proj = project_gaussians(Scene.from_primitives([prim]), cam)
    assert not proj.visible[0]


def test_heading_rotation_invariance():
    # rotating the world and the camera together leaves the image unchanged
    rng = np.random.default_rng(1)
    scene = random_scene(rng, 6)
    cam = gradcheck_camera()
    phi = 0.8
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
    rotated = scene.copy()
    rotated.positions = scene.positions @ R.T
    rotated.rotations = scene.rotations + phi
    cam2 = CameraPose(tuple(R @ np.asarray(cam.position)), cam.heading + phi, cam.focal, cam.width)
    np.testing.assert_allclose(render(scene, cam).color, render(rotated, cam2).color, atol=1e-10)
