"""Synthetic scene generator: ground-truth-perfect desk-scale datasets in the
KITTI on-disk layout.

Each scene places a few gravity-aligned boxes in front of a pinhole camera,
samples lidar-like points on their camera-facing faces (self-occlusion: the
far faces contribute nothing), adds uniform clutter inside the camera
frustum, and derives 2D detections by projecting the 3D corners. The
precomputed image-feature stub is a fixed deterministic function of the true
box dimensions and observation angle, so the image channel genuinely carries
dimension and orientation information that the visible point sample alone
underdetermines.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import geom3d, kitti_io
from .errors import ValidationError
from .geom3d import Box3D, BoxParam
from .image_features import FEATURE_DIM, save_precomputed
from .kitti_io import CalibKitti, Detection2D, Label3D

IMAGE_SIZE = (1242, 750)


@dataclass
class SceneSpec:
    seed: int = 0
    n_objects: tuple = (1, 3)                 # inclusive range per scene
    classes: tuple = ("Car",)
    dim_means: dict = field(default_factory=lambda: {"Car": (3.9, 1.6, 1.5)})
    dim_spread: float = 0.15                  # relative spread of dims
    depth_range: tuple = (3.0, 40.0)
    lateral_fov: float = 0.45                 # |x/z| and |y/z| bound
    surface_points: int = 220                 # per object before dropout
    clutter_points: int = 60                  # per scene
    background_points: int = 45               # per object, behind it
    noise_sigma: float = 0.03                 # meters, per coordinate
    surface_inset: tuple = (0.05, 0.30)       # inward depth of returns, meters
    dropout: float = 0.2                      # fraction of surface points lost
    jitter: float = 0.10                      # detection-box jitter fraction
    intrinsics: tuple = (721.5, 721.5, 621.0, 375.0)

    def __post_init__(self):
        if self.noise_sigma < 0 or not 0 <= self.dropout < 1:
            raise ValidationError("invalid noise/dropout")
        if self.n_objects[0] > self.n_objects[1] or self.n_objects[0] < 0:
            raise ValidationError("empty object-count range")

    def calib(self) -> CalibKitti:
        f_u, f_v, c_u, c_v = self.intrinsics
        return CalibKitti.identity(f_u, f_v, c_u, c_v)

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        """key=value overrides of the defaults."""
        kwargs = {}
        casts = {"seed": int, "surface_points": int, "clutter_points": int,
                 "background_points": int,
                 "dim_spread": float, "noise_sigma": float, "dropout": float,
                 "jitter": float, "lateral_fov": float,
                 "n_objects": lambda s: tuple(int(v) for v in s.split(",")),
                 "depth_range": lambda s: tuple(float(v) for v in s.split(",")),
                 "classes": lambda s: tuple(s.split(","))}
        with open(path) as f:
            for i, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in casts:
                    raise ValidationError(f"{path}:{i}: unknown key {key!r}")
                kwargs[key] = casts[key](value.strip())
        return cls(**kwargs)


@dataclass
class Scene:
    points: np.ndarray                 # camera-frame (N, 3)
    labels: list[Label3D]
    detections: list[Detection2D]
    features: dict                     # sample id suffix -> 2048-vector
    calib: CalibKitti


# Fixed projection basis for the feature stub: 5 descriptors -> 2048 dims.
_STUB_RNG = np.random.default_rng(20231115)
_STUB_PROJ = _STUB_RNG.normal(size=(5, FEATURE_DIM)) / np.sqrt(5.0)


def feature_stub(dims: np.ndarray, observation_angle: float) -> np.ndarray:
    """Deterministic 2048-vector encoding true dims and viewing angle."""
    desc = np.array([dims[0], dims[1], dims[2],
                     np.sin(observation_angle), np.cos(observation_angle)])
    return np.tanh(desc @ _STUB_PROJ)


def _sample_box_surface(param: BoxParam, rng: np.random.Generator,
                        n: int, inset=(0.05, 0.30)) -> np.ndarray:
    """Points just inside the camera-facing vertical faces of a box.

    Face visibility is decided by the outward normal pointing back toward
    the camera (origin); the roof and hidden faces stay unsampled, which is
    what makes the far extent of the box ambiguous from points alone.
    Returns sit an ``inset`` depth inward of the face (the labeled box
    encloses the object hull), so object points stay inside the box under
    measurement noise while clutter stays outside.
    """
    f, s = geom3d.box_axes(param.yaw)
    l, w, h = param.dims
    faces = []   # (normal, face center, in-plane axes, half extents)
    for normal, center_off, (ax1, e1), (ax2, e2) in (
            (f, f * (l / 2), (s, w / 2), (np.array([0, 1, 0.0]), h / 2)),
            (-f, -f * (l / 2), (s, w / 2), (np.array([0, 1, 0.0]), h / 2)),
            (s, s * (w / 2), (f, l / 2), (np.array([0, 1, 0.0]), h / 2)),
            (-s, -s * (w / 2), (f, l / 2), (np.array([0, 1, 0.0]), h / 2))):
        # Visible iff the normal faces the camera at the origin.
        if np.dot(normal, param.center + center_off) < 0:
            faces.append((normal, center_off, ax1, e1, ax2, e2))
    if not faces:
        faces = [(f, f * (l / 2), s, w / 2, np.array([0, 1, 0.0]), h / 2)]
    counts = rng.multinomial(n, [1.0 / len(faces)] * len(faces))
    pts = []
    for (normal, center_off, ax1, e1, ax2, e2), cnt in zip(faces, counts):
        u = rng.uniform(-e1, e1, size=cnt) * 0.98
        v = rng.uniform(-e2, e2, size=cnt) * 0.98
        depth = rng.uniform(inset[0], inset[1], size=cnt)
        pts.append(param.center + center_off
                   + u[:, None] * ax1 + v[:, None] * ax2
                   - depth[:, None] * normal)
    return np.vstack(pts) if pts else np.zeros((0, 3))


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    calib = spec.calib()
    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    labels, detections, features = [], [], {}
    all_points = []
    for _ in range(n_obj):
        cls = spec.classes[int(rng.integers(len(spec.classes)))]
        mean = np.array(spec.dim_means[cls])
        dims = mean * (1.0 + rng.uniform(-spec.dim_spread, spec.dim_spread, 3))
        z = rng.uniform(*spec.depth_range)
        x = rng.uniform(-spec.lateral_fov, spec.lateral_fov) * z
        y = rng.uniform(-0.1, 0.1) * z + 1.0
        yaw = geom3d.normalize_yaw(rng.uniform(-np.pi, np.pi))
        param = BoxParam(center=np.array([x, y, z]), dims=dims, yaw=yaw)
        box = geom3d.corners_from_param(param)
        box.class_id = cls

        surf = _sample_box_surface(param, rng, spec.surface_points,
                                   spec.surface_inset)
        if spec.dropout > 0 and len(surf):
            keep = rng.random(len(surf)) >= spec.dropout
            surf = surf[keep]
        if spec.noise_sigma > 0 and len(surf):
            surf = surf + rng.normal(0.0, spec.noise_sigma, surf.shape)
        all_points.append(surf)

        bbox = kitti_io.project_box_to_2d(box, calib, IMAGE_SIZE)
        labels.append(Label3D(
            class_name=cls, truncation=0.0, occlusion=0,
            alpha=geom3d.normalize_yaw(yaw - np.arctan2(x, z)),
            bbox=bbox,
            dims=(dims[2], dims[1], dims[0]),                # (h, w, l)
            location=(x, y + dims[2] / 2.0, z),              # bottom center
            yaw=yaw))

        det_bbox = (kitti_io.jitter_box2d(bbox, rng, spec.jitter, IMAGE_SIZE)
                    if spec.jitter > 0 else bbox)
        score = float(rng.uniform(0.5, 1.0))
        detections.append(Detection2D(cls, det_bbox, score))

        obs_angle = geom3d.normalize_yaw(yaw - np.arctan2(x, z))
        features[str(len(labels) - 1)] = feature_stub(dims, obs_angle)

        # Background returns visible around the object silhouette: uniform
        # over the 2D box but at greater depth, so every RoI's frustum
        # carries points that do not belong to the object.
        if spec.background_points > 0:
            f_u, f_v, c_u, c_v = spec.intrinsics
            u = rng.uniform(bbox[0], bbox[2], size=spec.background_points)
            v = rng.uniform(bbox[1], bbox[3], size=spec.background_points)
            bd = z * (1.0 + rng.uniform(0.25, 0.8,
                                        size=spec.background_points))
            all_points.append(np.column_stack([
                (u - c_u) / f_u * bd, (v - c_v) / f_v * bd, bd]))

    # Uniform clutter inside the camera frustum.
    if spec.clutter_points > 0:
        z = rng.uniform(*spec.depth_range, size=spec.clutter_points)
        x = rng.uniform(-spec.lateral_fov, spec.lateral_fov,
                        size=spec.clutter_points) * z
        y = rng.uniform(-spec.lateral_fov, spec.lateral_fov,
                        size=spec.clutter_points) * z
        all_points.append(np.column_stack([x, y, z]))
    points = (np.vstack([p for p in all_points if len(p)])
              if any(len(p) for p in all_points) else np.zeros((0, 3)))
    return Scene(points, labels, detections, features, calib)


def generate_dataset(spec: SceneSpec, n_scenes: int, out_dir,
                     split: str = "train") -> None:
    """Write ``n_scenes`` scenes in the KITTI layout, round-trippable
    through the kitti_io readers. Distinct splits draw from disjoint seed
    streams."""
    for sub in ("velodyne", "calib", "label_2", "detections", "features"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    features = {}
    for i in range(n_scenes):
        rng = np.random.default_rng([spec.seed, zlib.crc32(split.encode()), i])
        scene = generate_scene(spec, rng)
        frame = f"{i:06d}"
        kitti_io.write_velodyne(
            os.path.join(out_dir, "velodyne", frame + ".bin"), scene.points)
        kitti_io.write_calib(
            os.path.join(out_dir, "calib", frame + ".txt"), scene.calib)
        kitti_io.write_labels(
            os.path.join(out_dir, "label_2", frame + ".txt"), scene.labels)
        kitti_io.write_detections(
            os.path.join(out_dir, "detections", frame + ".txt"),
            scene.detections)
        for suffix, vec in scene.features.items():
            features[f"{frame}_{suffix}"] = vec
    save_precomputed(os.path.join(out_dir, "features", "features.bin"),
                     features)
