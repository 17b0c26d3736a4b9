"""Deterministic 3D geometry: rotations, box parameterizations, projections,
frustum filtering, anchor offset encoding, and oriented 3D IoU.

Conventions (camera frame): x right, y down, z forward. Gravity axis is y,
so "bird's-eye view" (BEV) is the (x, z) plane. An oriented box is stored as
8 ordered corners:

    0-3  bottom face (larger y), counter-clockwise seen from above,
         starting at front-left,
    4-7  the vertically corresponding top-face corners.

"Front" is the +length direction: at yaw 0 the length axis is +x, and yaw
rotates it toward -z (right-handed rotation about the downward y axis, the
KITTI ``rotation_y`` convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox

# Polygon areas below this are treated as zero (touching boxes).
_AREA_FLOOR = 1e-12


@dataclass
class BoxParam:
    """Center / dimensions / yaw parameterization of a gravity-aligned box."""

    center: np.ndarray          # (3,)
    dims: np.ndarray            # (length, width, height), each > 0
    yaw: float                  # radians in (-pi, pi]

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.dims = np.asarray(self.dims, dtype=np.float64)
        self.yaw = float(self.yaw)

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims))


@dataclass
class Box3D:
    """Oriented 3D box as 8 ordered corner points."""

    corners: np.ndarray         # (8, 3)
    class_id: str = ""
    score: float | None = None

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64)
        if self.corners.shape != (8, 3):
            raise ValueError(f"expected (8, 3) corners, got {self.corners.shape}")

    @property
    def centroid(self) -> np.ndarray:
        return self.corners.mean(axis=0)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    yaw = (yaw + np.pi) % (2.0 * np.pi) - np.pi
    if yaw <= -np.pi:
        yaw += 2.0 * np.pi
    return float(yaw)


def box_axes(yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward (length) and sideways (width) unit vectors for a yaw angle."""
    f = np.array([np.cos(yaw), 0.0, -np.sin(yaw)])
    s = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
    return f, s


def corners_from_param(p: BoxParam) -> Box3D:
    """Expand center/dims/yaw into the 8 ordered corners."""
    if np.any(p.dims <= 0):
        raise DegenerateBox(f"non-positive dims {p.dims}")
    l, w, h = p.dims
    f, s = box_axes(p.yaw)
    down = np.array([0.0, 1.0, 0.0])
    # Bottom face, CCW from above, starting front-left.
    signs = [(+1, +1), (+1, -1), (-1, -1), (-1, +1)]
    bottom = [p.center + sf * (l / 2) * f + ss * (w / 2) * s + (h / 2) * down
              for sf, ss in signs]
    top = [c - h * down for c in bottom]
    return Box3D(np.array(bottom + top))


def param_from_corners(b: Box3D) -> BoxParam:
    """Fit center/dims/yaw to 8 corners (least squares over the ordering).

    Exact for boxes produced by ``corners_from_param``; for noisy corner sets
    (decoded network output) this is the centroid + mean-edge-direction fit.
    """
    c = b.corners
    center = c.mean(axis=0)
    # Height from the vertical displacement between matching top/bottom corners.
    h = float(np.mean(c[:4, 1] - c[4:, 1]))
    bev = (c[:4, [0, 2]] + c[4:, [0, 2]]) / 2.0
    # Length edges run 3->0 and 2->1; width edges 1->0 and 2->3.
    d_len = ((bev[0] - bev[3]) + (bev[1] - bev[2])) / 2.0
    d_wid = ((bev[0] - bev[1]) + (bev[3] - bev[2])) / 2.0
    l = float(np.linalg.norm(d_len))
    w = float(np.linalg.norm(d_wid))
    if min(l, w, h) < 1e-9:
        raise DegenerateBox(f"degenerate dims l={l} w={w} h={h}")
    yaw = normalize_yaw(np.arctan2(-d_len[1], d_len[0]))
    return BoxParam(center=center, dims=np.array([l, w, h]), yaw=yaw)


def validate_box(b: Box3D, rel_tol: float = 1e-6) -> None:
    """Check the parallelepiped invariants of an ordered corner set.

    Opposite edges of each face must match within ``rel_tol`` of the edge
    length, and the top face must be a pure translation of the bottom face.
    """
    c = b.corners
    bottom, top = c[:4], c[4:]
    for face in (bottom, top):
        e01 = face[1] - face[0]
        e32 = face[2] - face[3]
        e03 = face[3] - face[0]
        e12 = face[2] - face[1]
        for a, bb in ((e01, e32), (e03, e12)):
            scale = max(np.linalg.norm(a), 1e-12)
            if np.linalg.norm(a - bb) > rel_tol * scale:
                raise DegenerateBox("opposite face edges differ: not a parallelepiped")
    lift = top - bottom
    scale = max(np.linalg.norm(lift[0]), 1e-12)
    if np.max(np.linalg.norm(lift - lift[0], axis=1)) > rel_tol * scale:
        raise DegenerateBox("top face is not a translation of the bottom face")


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def canonical_rotation(intrinsics, box2d_center) -> np.ndarray:
    """Minimal rotation taking the back-projected ray of a 2D box center onto
    the camera forward (+z) axis.

    ``intrinsics`` is (f_u, f_v, c_u, c_v); ``box2d_center`` is (u, v) pixels.
    """
    f_u, f_v, c_u, c_v = intrinsics
    if f_u <= 0 or f_v <= 0:
        raise ValueError("focal lengths must be positive")
    u, v = box2d_center
    d = np.array([(u - c_u) / f_u, (v - c_v) / f_v, 1.0])
    d /= np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(d, z)
    s = np.linalg.norm(axis)
    cos = float(np.dot(d, z))
    if s < 1e-9:
        if cos > 0.0:
            return np.eye(3)
        # Ray points backward: 180 degrees about the x-axis.
        return np.diag([1.0, -1.0, -1.0])
    axis /= s
    return _rodrigues(axis, np.arctan2(s, cos))


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotate_points(points: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Apply a rotation to an (N, 3) point array: output rows are R @ p."""
    points = np.asarray(points, dtype=np.float64)
    return points @ np.asarray(R).T


# ---------------------------------------------------------------------------
# Point-in-box and anchor offsets
# ---------------------------------------------------------------------------

def points_in_box(points: np.ndarray, b: Box3D, atol: float = 1e-9) -> np.ndarray:
    """Inclusive membership test for each of N points against a box.

    Returns a boolean (N,) array. Works for arbitrarily rotated
    parallelepipeds by projecting onto the three edge axes.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = b.corners
    origin = c[0]
    axes = np.stack([c[1] - c[0], c[3] - c[0], c[4] - c[0]])   # width, length-, up
    rel = points - origin
    for ax in axes:
        n2 = float(np.dot(ax, ax))
        if n2 < 1e-18:
            return np.zeros(len(points), dtype=bool)
    t = rel @ axes.T / np.sum(axes * axes, axis=1)
    return np.all((t >= -atol) & (t <= 1.0 + atol), axis=1)


def point_in_box(p: np.ndarray, b: Box3D) -> bool:
    """True iff p lies inside or on the boundary of the box."""
    return bool(points_in_box(np.asarray(p)[None, :], b)[0])


def encode_offsets(p: np.ndarray, b: Box3D) -> np.ndarray:
    """Per-corner displacements from an anchor point: corner_j = p + offset_j."""
    return b.corners - np.asarray(p, dtype=np.float64)[None, :]


def decode_offsets(p: np.ndarray, offsets: np.ndarray, class_id: str = "",
                   score: float | None = None) -> Box3D:
    """Rebuild a raw box hypothesis from an anchor and its corner offsets."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(8, 3)
    return Box3D(np.asarray(p, dtype=np.float64)[None, :] + offsets,
                 class_id=class_id, score=score)


# ---------------------------------------------------------------------------
# Projection and frustum filtering
# ---------------------------------------------------------------------------

def project_points(points: np.ndarray, calib) -> np.ndarray:
    """Project sensor-frame points through a KITTI calibration.

    Returns an (N, 3) array of (u, v, depth) where depth is the rectified
    forward coordinate; callers exclude depth <= 0.
    """
    from .kitti_io import velo_to_rect   # circular at import time only
    rect = velo_to_rect(points, calib)
    return project_rect_points(rect, calib.P2)


def project_rect_points(rect: np.ndarray, P2: np.ndarray) -> np.ndarray:
    """Pinhole projection of rectified-frame points with a 3x4 matrix."""
    rect = np.atleast_2d(np.asarray(rect, dtype=np.float64))
    hom = np.hstack([rect, np.ones((len(rect), 1))]) @ np.asarray(P2).T
    depth = hom[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[:, :2] / depth[:, None]
    return np.column_stack([uv, depth])


def frustum_filter(points: np.ndarray, box2d, calib) -> np.ndarray:
    """Rectified-frame points whose projection lands inside a 2D box.

    ``box2d`` is (u1, v1, u2, v2); edges are inclusive, depth must be > 0.
    """
    from .kitti_io import velo_to_rect
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        return points.reshape(0, 3)
    rect = velo_to_rect(points, calib)
    uvd = project_rect_points(rect, calib.P2)
    u1, v1, u2, v2 = box2d
    keep = ((uvd[:, 2] > 0)
            & (uvd[:, 0] >= u1) & (uvd[:, 0] <= u2)
            & (uvd[:, 1] >= v1) & (uvd[:, 1] <= v2))
    return rect[keep]


# ---------------------------------------------------------------------------
# Oriented IoU (gravity-aligned boxes)
# ---------------------------------------------------------------------------

def _bev_quad(p: BoxParam) -> np.ndarray:
    """Bottom-face quadrilateral in the (x, z) plane, CCW orientation."""
    l, w = p.dims[0], p.dims[1]
    f2 = np.array([np.cos(p.yaw), -np.sin(p.yaw)])
    s2 = np.array([np.sin(p.yaw), np.cos(p.yaw)])
    c2 = p.center[[0, 2]]
    quad = np.array([c2 + sf * (l / 2) * f2 + ss * (w / 2) * s2
                     for sf, ss in ((+1, +1), (+1, -1), (-1, -1), (-1, +1))])
    if _signed_area(quad) < 0:
        quad = quad[::-1]
    return quad


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex subject by a CCW convex clip."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        input_pts = output
        output = []

        # Inside test: left of the directed edge for a CCW polygon.
        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        prev = input_pts[-1]
        prev_in = inside(prev)
        for cur in input_pts:
            cur_in = inside(cur)
            if cur_in != prev_in:
                # Edge crossing: intersect segment prev->cur with the clip line.
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                if abs(denom) > 1e-300:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _bev_intersection_area(pa: BoxParam, pb: BoxParam) -> float:
    inter = _clip_polygon(_bev_quad(pa), _bev_quad(pb))
    if len(inter) < 3:
        return 0.0
    area = abs(_signed_area(inter))
    return area if area > _AREA_FLOOR else 0.0


def _as_params(a: Box3D, b: Box3D) -> tuple[BoxParam, BoxParam]:
    pa = a if isinstance(a, BoxParam) else param_from_corners(a)
    pb = b if isinstance(b, BoxParam) else param_from_corners(b)
    if pa.volume < 1e-18 or pb.volume < 1e-18:
        raise DegenerateBox("zero-volume box in IoU")
    return pa, pb


def iou3d(a: Box3D, b: Box3D) -> float:
    """Oriented 3D IoU of two gravity-aligned boxes."""
    pa, pb = _as_params(a, b)
    inter_area = _bev_intersection_area(pa, pb)
    if inter_area == 0.0:
        return 0.0
    ya0, ya1 = pa.center[1] - pa.dims[2] / 2, pa.center[1] + pa.dims[2] / 2
    yb0, yb1 = pb.center[1] - pb.dims[2] / 2, pb.center[1] + pb.dims[2] / 2
    overlap = min(ya1, yb1) - max(ya0, yb0)
    if overlap <= 0:
        return 0.0
    inter = inter_area * overlap
    union = pa.volume + pb.volume - inter
    return float(inter / union)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Top-down (bird's-eye view) polygon IoU, no vertical term."""
    pa, pb = _as_params(a, b)
    inter = _bev_intersection_area(pa, pb)
    area_a = pa.dims[0] * pa.dims[1]
    area_b = pb.dims[0] * pb.dims[1]
    union = area_a + area_b - inter
    return float(inter / union)
