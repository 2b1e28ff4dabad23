"""Flatland scene model: primitives, cameras, views, and synthetic datasets.

The world is two dimensional and every camera produces a one dimensional
image of ``width`` pixels with three color channels.  Camera positions are
kept inside the unit square so that positional variances are scale free.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
NEAR_PLANE = 0.01

# named sub-streams of the experiment seed
STREAM_DATASET = 0
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_MLP = 3


class BehindCamera(ValueError):
    """Raised when a point does not lie in front of the near plane."""


class SchemaError(ValueError):
    """Raised for malformed, truncated, or version-mismatched documents."""


def sub_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one named stream of an experiment seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class GaussianPrimitive:
    position: np.ndarray
    scale: np.ndarray
    rotation: float
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        r = rotation_matrix(self.rotation)
        return r @ np.diag(np.asarray(self.scale) ** 2) @ r.T


@dataclass
class Scene:
    """Structure-of-arrays container for a set of Gaussian primitives."""

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 2)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        for name in ("scales", "rotations", "opacity_logits", "colors"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"Scene.{name} has {len(getattr(self, name))} rows, expected {n}")

    @classmethod
    def empty(cls) -> "Scene":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_primitives(cls, prims: Iterable[GaussianPrimitive]) -> "Scene":
        prims = list(prims)
        if not prims:
            return cls.empty()
        return cls(
            np.array([p.position for p in prims]),
            np.array([p.scale for p in prims]),
            np.array([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.array([p.color for p in prims]),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i].copy(),
            self.scales[i].copy(),
            float(self.rotations[i]),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    def primitives(self) -> list[GaussianPrimitive]:
        return [self[i] for i in range(len(self))]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        """(N, 2, 2) covariance matrices R diag(s^2) R^T."""
        c, s = np.cos(self.rotations), np.sin(self.rotations)
        s0, s1 = self.scales[:, 0] ** 2, self.scales[:, 1] ** 2
        cov = np.empty((len(self), 2, 2))
        cov[:, 0, 0] = c * c * s0 + s * s * s1
        cov[:, 1, 1] = s * s * s0 + c * c * s1
        cov[:, 0, 1] = cov[:, 1, 0] = c * s * (s0 - s1)
        return cov

    def copy(self) -> "Scene":
        return Scene(
            self.positions.copy(),
            self.scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )

    def take(self, index) -> "Scene":
        return Scene(
            self.positions[index],
            self.scales[index],
            self.rotations[index],
            self.opacity_logits[index],
            self.colors[index],
        )

    def concat(self, other: "Scene") -> "Scene":
        return Scene(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
        )

    def equals(self, other: "Scene") -> bool:
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self)
        )


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float]
    heading: float
    focal: float
    width: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if self.width < 8:
            raise ValueError("width must be at least 8 pixels")

    @property
    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.heading), math.sin(self.heading)])

    @property
    def lateral(self) -> np.ndarray:
        return np.array([-math.sin(self.heading), math.cos(self.heading)])


def project_point(camera: CameraPose, point) -> tuple[float, float]:
    """Pixel coordinate and depth of a world point.

    Raises:
        BehindCamera: if the camera-frame depth is not beyond the near plane.
    """
    d = np.asarray(point, dtype=np.float64) - np.asarray(camera.position, dtype=np.float64)
    depth = float(d @ camera.forward)
    if depth <= NEAR_PLANE:
        raise BehindCamera(f"depth {depth:.4g} is behind the near plane")
    lateral = float(d @ camera.lateral)
    return camera.focal * (lateral / depth) + camera.width / 2, depth


@dataclass
class ViewRecord:
    camera: CameraPose
    image: np.ndarray
    gt_mask: np.ndarray | None
    image_id: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.width, 3):
            raise ValueError(f"image shape {self.image.shape} != ({self.camera.width}, 3)")
        if self.gt_mask is not None:
            self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
            if self.gt_mask.shape != (self.camera.width,):
                raise ValueError("gt_mask length must equal the image width")

    @property
    def has_distractors(self) -> bool:
        return self.gt_mask is not None and bool(self.gt_mask.any())


@dataclass
class SceneConfig:
    n_background_gaussians: int = 120
    n_views: int = 40
    image_width: int = 64
    distractor_view_fraction: float = 0.3
    distractors_per_view: int = 1
    rng_seed: int = 0
    world_extent: float = 1.5
    n_test_views: int = 16
    distractor_size: float = 0.5
    camera_arc: float = 2 * math.pi
    camera_cluster: float = 0.0
    focal_ratio: float = 0.75
    core_radius: float = 0.05
    distractor_depth: tuple = (0.12, 0.3)
    wall_texture: float = 0.1

    def __post_init__(self):
        self.distractor_depth = tuple(float(x) for x in self.distractor_depth)
        if len(self.distractor_depth) != 2 or not 0.0 < self.distractor_depth[0] <= self.distractor_depth[1]:
            raise ValueError("distractor_depth must be an increasing pair of positive depths")
        for name in ("n_background_gaussians", "n_views", "image_width", "distractors_per_view"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_test_views < 0:
            raise ValueError("n_test_views must be non-negative")
        for name in ("distractor_view_fraction", "camera_cluster"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.image_width < 8:
            raise ValueError("image_width must be at least 8")
        if not (self.world_extent > 0 and self.distractor_size > 0 and self.focal_ratio > 0):
            raise ValueError("world_extent, distractor_size and focal_ratio must be positive")
        if not 0 <= self.core_radius < CAMERA_RADIUS:
            raise ValueError("core_radius must lie inside the camera circle")

    @property
    def n_distractor_views(self) -> int:
        return int(round(self.distractor_view_fraction * self.n_views))


@dataclass
class Dataset:
    config: SceneConfig
    true_scene: Scene
    views: list[ViewRecord]
    test_views: list[ViewRecord] = field(default_factory=list)

    @property
    def train_cameras(self) -> list[CameraPose]:
        return [v.camera for v in self.views]


# ----------------------------------------------------------------------------
# synthetic generation

CENTER = np.array([0.5, 0.5])
CAMERA_RADIUS = 0.45


def _camera_angles(config: SceneConfig, n: int, rng: np.random.Generator, offset: float) -> np.ndarray:
    """Camera azimuths around the scene center.

    With ``camera_cluster`` > 0 that fraction of cameras is squeezed into a
    narrow arc, leaving the opposite side of the scene under-observed.
    """
    arc = config.camera_arc
    closed = arc >= 2 * math.pi - 1e-12
    step = arc / n if closed else arc / max(n - 1, 1)
    base = -arc / 2 + (np.arange(n) + offset) * step
    angles = base + rng.uniform(-0.15, 0.15, n) * step
    n_cluster = int(round(config.camera_cluster * n))
    if n_cluster:
        pick = np.linspace(0, n - 1, n_cluster).round().astype(int)
        angles[pick] = rng.uniform(-0.25, 0.25, n_cluster)
    return angles


def _make_cameras(config: SceneConfig, n: int, rng, offset: float) -> list[CameraPose]:
    cams = []
    focal = config.focal_ratio * config.image_width
    for a in _camera_angles(config, n, rng, offset):
        pos = CENTER + CAMERA_RADIUS * np.array([math.cos(a), math.sin(a)])
        heading = math.atan2(*(CENTER - pos)[::-1]) + rng.uniform(-0.08, 0.08)
        cams.append(CameraPose((float(pos[0]), float(pos[1])), float(heading), float(focal), config.image_width))
    return cams


def _background_scene(config: SceneConfig, rng: np.random.Generator) -> Scene:
    """Textured wall ring around the capture volume plus a central cluster."""
    n = config.n_background_gaussians
    n_wall = max(1, int(round(0.75 * n)))
    n_core = n - n_wall
    R = config.world_extent
    theta = (np.arange(n_wall) + rng.uniform(0.2, 0.8, n_wall)) * (2 * math.pi / n_wall)
    radius = R + rng.normal(0, 0.03 * R, n_wall)
    wall_pos = CENTER + radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], 1)
    tangential = 0.9 * (2 * math.pi * R / n_wall) * rng.uniform(0.7, 1.3, n_wall)
    wall_scales = np.stack([tangential, 0.35 * tangential], 1)
    wall_rot = theta + math.pi / 2
    # smooth hue drift along the wall with per-primitive texture
    phase = rng.uniform(0, 2 * math.pi, 3)
    base = 0.5 + 0.18 * np.sin(theta[:, None] * np.array([2, 3, 5]) + phase)
    wall_col = np.clip(base + rng.normal(0, config.wall_texture, (n_wall, 3)), 0.15, 0.85)

    core_r = config.core_radius * np.sqrt(rng.uniform(0, 1, n_core))
    core_t = rng.uniform(0, 2 * math.pi, n_core)
    core_pos = CENTER + core_r[:, None] * np.stack([np.cos(core_t), np.sin(core_t)], 1)
    core_scales = rng.uniform(0.015, 0.035, (n_core, 2))
    core_rot = rng.uniform(0, math.pi, n_core)
    gray = rng.uniform(0.25, 0.75, (n_core, 1))
    core_col = np.clip(gray + rng.normal(0, 0.08, (n_core, 3)), 0.1, 0.9)

    return Scene(
        np.concatenate([wall_pos, core_pos]),
        np.concatenate([wall_scales, core_scales]),
        np.concatenate([wall_rot, core_rot]),
        np.concatenate([np.full(n_wall, 4.0), rng.uniform(1.5, 3.0, n_core)]),
        np.concatenate([wall_col, core_col]),
    )


def _saturated_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    hue = rng.uniform(0, 6, n)
    out = np.zeros((n, 3))
    for i, h in enumerate(hue):
        k = int(h) % 6
        f = h - int(h)
        # piecewise HSV with full saturation, value 0.95
        table = [(1, f, 0), (1 - f, 1, 0), (0, 1, f), (0, 1 - f, 1), (f, 0, 1), (1, 0, 1 - f)]
        out[i] = 0.05 + 0.9 * np.array(table[k])
    return out


def _distractors(config: SceneConfig, camera: CameraPose, rng: np.random.Generator) -> Scene:
    """Transient primitives placed between a camera and the scene."""
    prims = []
    half_fov = math.atan(camera.width / 2 / camera.focal)
    for _ in range(config.distractors_per_view):
        depth = rng.uniform(*config.distractor_depth)
        ang = rng.uniform(-0.85, 0.85) * half_fov
        lateral = depth * math.tan(ang)
        pos = np.asarray(camera.position) + depth * camera.forward + lateral * camera.lateral
        # angular half-size of the blob, as a fraction of the field of view
        size = config.distractor_size * depth * math.tan(half_fov) * rng.uniform(0.7, 1.3)
        prims.append(
            GaussianPrimitive(pos, np.array([size, 0.5 * size]), camera.heading + math.pi / 2, 4.0, np.zeros(3))
        )
    scene = Scene.from_primitives(prims)
    scene.colors = _saturated_colors(rng, len(scene))
    return scene


def generate_dataset(config: SceneConfig) -> Dataset:
    """Synthesize a multi-view flatland capture with transient distractors."""
    from .render import render

    rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, STREAM_DATASET]))
    scene = _background_scene(config, rng)
    cameras = _make_cameras(config, config.n_views, rng, offset=0.0)
    test_cameras = _make_cameras(config, config.n_test_views, rng, offset=0.5) if config.n_test_views else []
    order = rng.permutation(config.n_views)
    distractor_views = set(order[: config.n_distractor_views].tolist())

    views = []
    for i, cam in enumerate(cameras):
        if i in distractor_views:
            extra = _distractors(config, cam, rng)
            full = scene.concat(extra)
            out = render(full, cam)
            is_distractor = np.arange(len(full)) >= len(scene)
            weight = out.weight_of(is_distractor)
            views.append(ViewRecord(cam, out.color, weight > 0.5, i))
        else:
            out = render(scene, cam)
            views.append(ViewRecord(cam, out.color, np.zeros(cam.width, dtype=bool), i))
    test_views = [
        ViewRecord(cam, render(scene, cam).color, np.zeros(cam.width, dtype=bool), config.n_views + j)
        for j, cam in enumerate(test_cameras)
    ]
    return Dataset(config, scene, views, test_views)


# ----------------------------------------------------------------------------
# serialization


def scene_to_dict(scene: Scene) -> list[dict]:
    return [
        {
            "position": p.position.tolist(),
            "scale": p.scale.tolist(),
            "rotation": p.rotation,
            "opacity_logit": p.opacity_logit,
            "color": p.color.tolist(),
        }
        for p in scene.primitives()
    ]


def scene_from_dict(items: Sequence[dict]) -> Scene:
    return Scene.from_primitives(
        GaussianPrimitive(
            np.array(d["position"], dtype=np.float64),
            np.array(d["scale"], dtype=np.float64),
            float(d["rotation"]),
            float(d["opacity_logit"]),
            np.array(d["color"], dtype=np.float64),
        )
        for d in items
    )


def _view_to_dict(v: ViewRecord) -> dict:
    c = v.camera
    return {
        "camera": {"position": list(c.position), "heading": c.heading, "focal": c.focal, "width": c.width},
        "image": v.image.tolist(),
        "gt_mask": None if v.gt_mask is None else v.gt_mask.astype(int).tolist(),
        "image_id": v.image_id,
    }


def _view_from_dict(d: dict) -> ViewRecord:
    c = d["camera"]
    cam = CameraPose(tuple(float(x) for x in c["position"]), float(c["heading"]), float(c["focal"]), int(c["width"]))
    mask = d["gt_mask"]
    return ViewRecord(
        cam,
        np.array(d["image"], dtype=np.float64).reshape(-1, 3),
        None if mask is None else np.array(mask, dtype=bool),
        int(d["image_id"]),
    )


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "dataset",
        "config": asdict(ds.config),
        "primitives": scene_to_dict(ds.true_scene),
        "views": [_view_to_dict(v) for v in ds.views],
        "test_views": [_view_to_dict(v) for v in ds.test_views],
    }


def dataset_from_dict(doc: dict) -> Dataset:
    check_schema(doc, "dataset")
    try:
        return Dataset(
            SceneConfig(**doc["config"]),
            scene_from_dict(doc["primitives"]),
            [_view_from_dict(v) for v in doc["views"]],
            [_view_from_dict(v) for v in doc.get("test_views", [])],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed dataset document: {exc}") from exc


def check_schema(doc, kind: str) -> None:
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise SchemaError("document has no schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"schema_version {doc['schema_version']!r} != {SCHEMA_VERSION}")
    if doc.get("kind", kind) != kind:
        raise SchemaError(f"expected a {kind} document, got {doc.get('kind')!r}")


def write_document(path, doc: dict) -> None:
    """Write a JSON document atomically (floats use shortest round-trip repr)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, allow_nan=False, separators=(",", ":")), encoding="utf-8")
    tmp.replace(path)


def read_document(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a valid document ({exc.msg})") from exc


def save_dataset(path, ds: Dataset) -> None:
    write_document(path, dataset_to_dict(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_dict(read_document(path))
