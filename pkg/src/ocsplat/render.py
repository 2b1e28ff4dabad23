"""Projection, depth-ordered alpha blending, and the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .scene import NEAR_PLANE, CameraPose, Scene, sigmoid

VAR_FLOOR = 0.25
CULL_SIGMAS = 4.0
# centers beyond this multiple of the half field of view are culled
FRUSTUM_GUARD = 1.3


@dataclass
class Splat1D:
    mean_u: float
    var_u: float
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int


@dataclass
class Projection:
    """Projected splats for one camera, front to back.

    ``order`` maps each splat to its source primitive.  The Jacobian rows and
    camera-frame quantities are kept for the backward pass.
    """

    order: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    depth: np.ndarray
    lateral: np.ndarray
    jac: np.ndarray
    visible: np.ndarray  # bool over all primitives

    def splats(self, scene: Scene) -> list[Splat1D]:
        op = scene.opacities
        return [
            Splat1D(float(m), float(v), float(d), float(op[i]), scene.colors[i].copy(), int(i))
            for m, v, d, i in zip(self.mean, self.var, self.depth, self.order)
        ]


def project_gaussians(scene: Scene, cam: CameraPose) -> Projection:
    """Project every primitive to a 1D splat; cull and sort by depth.

    Ties in depth are broken by primitive index.
    """
    f, l = cam.forward, cam.lateral
    d = scene.positions - np.asarray(cam.position)[None, :]
    depth = d @ f
    lateral = d @ l
    front = depth > NEAR_PLANE
    safe = np.where(front, depth, 1.0)
    mean = cam.focal * lateral / safe + cam.width / 2
    jac = cam.focal * (l[None, :] / safe[:, None] - (lateral / safe**2)[:, None] * f[None, :])
    cov = scene.covariances()
    var = np.einsum("ni,nij,nj->n", jac, cov, jac) + VAR_FLOOR
    reach = CULL_SIGMAS * np.sqrt(var)
    inside = (mean + reach >= 0) & (mean - reach < cam.width)
    in_frustum = np.abs(lateral) <= FRUSTUM_GUARD * (cam.width / 2) / cam.focal * safe
    visible = front & inside & in_frustum
    idx = np.flatnonzero(visible)
    order = idx[np.lexsort((idx, depth[idx]))]
    return Projection(order, mean[order], var[order], depth[order], lateral[order], jac[order], visible)


def project_gaussian(prim, cam: CameraPose) -> Splat1D | None:
    """Single-primitive projection; ``None`` means culled."""
    scene = Scene.from_primitives([prim])
    proj = project_gaussians(scene, cam)
    if len(proj.order) == 0:
        return None
    return proj.splats(scene)[0]


@dataclass
class RenderOutput:
    color: np.ndarray
    oc: np.ndarray
    weight_sums: np.ndarray
    t_final: np.ndarray
    n_used: np.ndarray
    projection: Projection
    background: np.ndarray
    opacity: np.ndarray  # sorted splat opacities
    colors: np.ndarray  # sorted splat colors

    @property
    def width(self) -> int:
        return len(self.color)

    def splat_weights(self) -> np.ndarray:
        """(width, n_splats) blending weights in front-to-back order."""
        p = self.projection
        return kernels.splat_weights(p.mean, p.var, self.opacity, self.width)

    def primitive_weights(self, n_primitives: int) -> np.ndarray:
        """(width, n_primitives) blending weights indexed by primitive."""
        out = np.zeros((self.width, n_primitives))
        out[:, self.projection.order] = self.splat_weights()
        return out

    def weight_of(self, selected: np.ndarray) -> np.ndarray:
        """Accumulated per-pixel weight of a boolean subset of primitives."""
        w = self.splat_weights()
        return w[:, np.asarray(selected)[self.projection.order]].sum(axis=1)


def render(
    scene: Scene,
    cam: CameraPose,
    oc_values: np.ndarray | None = None,
    background=(0.0, 0.0, 0.0),
    threads: int = 1,
) -> RenderOutput:
    """Render color and observation completeness for one camera."""
    proj = project_gaussians(scene, cam)
    opacity = np.ascontiguousarray(sigmoid(scene.opacity_logits[proj.order]))
    colors = np.ascontiguousarray(scene.colors[proj.order])
    oc = np.zeros(len(proj.order)) if oc_values is None else np.asarray(oc_values, dtype=np.float64)[proj.order]
    bg = np.asarray(background, dtype=np.float64)
    image, oc_img, wsum, tfin, nused = kernels.composite_forward(
        np.ascontiguousarray(proj.mean),
        np.ascontiguousarray(proj.var),
        opacity,
        colors,
        np.ascontiguousarray(oc),
        cam.width,
        bg,
        threads,
    )
    return RenderOutput(image, oc_img, wsum, tfin, nused, proj, bg, opacity, colors)


def render_color(splats: list[Splat1D], width: int, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Blend an explicit splat list (sorted here by depth, then index)."""
    image, _ = _render_splats(splats, np.zeros(len(splats)), width, background)
    return image


def render_oc(splats: list[Splat1D], oc_values, width: int) -> np.ndarray:
    _, oc = _render_splats(splats, np.asarray(oc_values, dtype=np.float64), width, (0.0, 0.0, 0.0))
    return oc


def _render_splats(splats, oc_values, width, background):
    order = sorted(range(len(splats)), key=lambda i: (splats[i].depth, splats[i].source_index, i))
    mean = np.array([splats[i].mean_u for i in order], dtype=np.float64)
    var = np.array([splats[i].var_u for i in order], dtype=np.float64)
    op = np.array([splats[i].opacity for i in order], dtype=np.float64)
    col = np.array([splats[i].color for i in order], dtype=np.float64).reshape(-1, 3)
    oc = np.ascontiguousarray(np.asarray(oc_values, dtype=np.float64)[order]) if len(order) else np.zeros(0)
    image, oc_img, *_ = kernels.composite_forward(
        mean, var, op, np.ascontiguousarray(col), oc, width, np.asarray(background, dtype=np.float64), 1
    )
    return image, oc_img


@dataclass
class SceneGradients:
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @property
    def grad_p(self) -> np.ndarray:
        """Per-primitive L2 norm of the positional gradient."""
        return np.linalg.norm(self.positions, axis=1)

    def scaled(self, factor) -> "SceneGradients":
        return SceneGradients(*(getattr(self, k) * factor for k in
                                ("positions", "scales", "rotations", "opacity_logits", "colors")))


def backward(
    scene: Scene,
    cam: CameraPose,
    out: RenderOutput,
    grad_image: np.ndarray,
    threads: int = 1,
) -> SceneGradients:
    """Chain a per-pixel image gradient back to every primitive parameter."""
    n = len(scene)
    p = out.projection
    grads = SceneGradients(np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n), np.zeros(n), np.zeros((n, 3)))
    if len(p.order) == 0:
        return grads
    d_mean, d_var, d_op, d_col = kernels.composite_backward(
        np.ascontiguousarray(p.mean),
        np.ascontiguousarray(p.var),
        out.opacity,
        out.colors,
        cam.width,
        out.background,
        np.ascontiguousarray(grad_image, dtype=np.float64),
        threads,
    )
    idx = p.order
    f, l = cam.forward, cam.lateral
    z, y, jac = p.depth, p.lateral, p.jac
    cov = scene.covariances()[idx]

    # mean_u = F y / z + W/2 ; d mean / d position = jac
    d_pos = d_mean[:, None] * jac
    # var_u = jac^T cov jac ; d jac_j / d p_i
    F = cam.focal
    sigma_j = np.einsum("nij,nj->ni", cov, jac)  # cov @ jac
    for i in range(2):
        dj = F * (
            -l[None, :] * f[i] / z[:, None] ** 2
            - f[None, :] * l[i] / z[:, None] ** 2
            + 2.0 * (y / z**3)[:, None] * f[None, :] * f[i]
        )
        d_pos[:, i] += d_var * 2.0 * np.sum(sigma_j * dj, axis=1)

    c, s = np.cos(scene.rotations[idx]), np.sin(scene.rotations[idx])
    b0 = c * jac[:, 0] + s * jac[:, 1]
    b1 = -s * jac[:, 0] + c * jac[:, 1]
    sc = scene.scales[idx]
    d_scale = np.stack([2 * sc[:, 0] * b0**2, 2 * sc[:, 1] * b1**2], 1) * d_var[:, None]
    d_rot = d_var * 2.0 * b0 * b1 * (sc[:, 0] ** 2 - sc[:, 1] ** 2)
    op = out.opacity
    d_logit = d_op * op * (1.0 - op)

    grads.positions[idx] = d_pos
    grads.scales[idx] = d_scale
    grads.rotations[idx] = d_rot
    grads.opacity_logits[idx] = d_logit
    grads.colors[idx] = d_col
    return grads
