"""KITTI-format ingestion, RoI preprocessing, and prediction serialization.

On-disk formats (all documented bit-exactly):

* ``velodyne/<frame>.bin`` — little-endian float32 quadruples (x, y, z,
  intensity), sensor frame.
* ``calib/<frame>.txt`` — keyed whitespace-separated matrices: ``P2:`` (12
  values), ``R0_rect:`` (9), ``Tr_velo_to_cam:`` (12).
* ``label_2/<frame>.txt`` — 15-field KITTI label lines (an optional 16th
  score field is accepted and ignored).
* ``detections/<frame>.txt`` — one detection per line:
  ``class u1 v1 u2 v2 score``.
* predictions — one line per prediction:
  ``frame class u1 v1 u2 v2 score2d x0 y0 z0 ... x7 y7 z7 combined``
  (8 camera-frame corners in the package ordering), 6 decimal places.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom3d
from .errors import MalformedFile, ParseError, ValidationError
from .geom3d import Box3D


@dataclass
class CalibKitti:
    P2: np.ndarray               # 3x4 projection
    R0_rect: np.ndarray          # 3x3 rectification
    Tr_velo_to_cam: np.ndarray   # 3x4 rigid transform

    def __post_init__(self):
        self.P2 = np.asarray(self.P2, dtype=np.float64).reshape(3, 4)
        self.R0_rect = np.asarray(self.R0_rect, dtype=np.float64).reshape(3, 3)
        self.Tr_velo_to_cam = np.asarray(
            self.Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)

    @classmethod
    def identity(cls, f_u=500.0, f_v=500.0, c_u=320.0, c_v=240.0):
        """Camera-frame-only calibration for synthetic scenes."""
        P2 = np.array([[f_u, 0, c_u, 0], [0, f_v, c_v, 0], [0, 0, 1, 0]],
                      dtype=np.float64)
        return cls(P2, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))

    @property
    def intrinsics(self):
        """(f_u, f_v, c_u, c_v) from the left 3x3 of P2."""
        return (self.P2[0, 0], self.P2[1, 1], self.P2[0, 2], self.P2[1, 2])


@dataclass
class Label3D:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple               # (u1, v1, u2, v2)
    dims: tuple               # (h, w, l) — KITTI field order
    location: tuple           # (x, y, z), bottom-face center, rect camera frame
    yaw: float

    def to_box3d(self) -> Box3D:
        """Convert to the 8-corner representation (centroid at box center)."""
        h, w, l = self.dims
        x, y, z = self.location
        param = geom3d.BoxParam(center=np.array([x, y - h / 2.0, z]),
                                dims=np.array([l, w, h]), yaw=self.yaw)
        box = geom3d.corners_from_param(param)
        box.class_id = self.class_name
        return box


@dataclass
class Detection2D:
    class_name: str
    bbox: tuple               # (u1, v1, u2, v2) pixels
    score: float


@dataclass
class FrustumSample:
    """One training/inference example in the canonicalized frame."""

    sample_id: str
    detection: Detection2D
    points: np.ndarray              # (N, 3) rotated by R_c, N <= n_max
    R_c: np.ndarray                 # 3x3 canonical rotation
    image_feature: np.ndarray | None = None     # precomputed 2048-vector
    crop: np.ndarray | None = None               # 224x224x3 pixels in [0, 1]
    gt_box: Box3D | None = None     # canonicalized frame
    empty: bool = False


# ---------------------------------------------------------------------------
# Readers
# ---------------------------------------------------------------------------

def read_velodyne(path) -> list[tuple[np.ndarray, float]]:
    """Read little-endian float32 (x, y, z, intensity) quadruples."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise MalformedFile(f"cannot read {path}: {exc}") from exc
    if len(raw) % 16 != 0:
        raise MalformedFile(f"{path}: length {len(raw)} not divisible by 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return [(row[:3].copy(), float(row[3])) for row in data]


def read_velodyne_points(path) -> np.ndarray:
    """Point coordinates only, as an (N, 3) array; intensity discarded."""
    pts = read_velodyne(path)
    if not pts:
        return np.zeros((0, 3))
    return np.stack([p for p, _ in pts])


def write_velodyne(path, points: np.ndarray, intensities=None) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if intensities is None:
        intensities = np.zeros(len(points))
    data = np.column_stack([points, intensities]).astype("<f4")
    with open(path, "wb") as f:
        f.write(data.tobytes())


def read_calib(path) -> CalibKitti:
    mats = {}
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise ParseError("missing key separator", path, i)
            key, _, rest = line.partition(":")
            try:
                vals = [float(tok) for tok in rest.split()]
            except ValueError as exc:
                raise ParseError(f"bad number: {exc}", path, i) from exc
            mats[key.strip()] = (np.array(vals), i)
    out = {}
    for key, n in (("P2", 12), ("R0_rect", 9), ("Tr_velo_to_cam", 12)):
        if key not in mats:
            raise ParseError(f"missing {key}", path, 0)
        vals, line_no = mats[key]
        if len(vals) != n:
            raise ParseError(f"{key} needs {n} values, got {len(vals)}",
                             path, line_no)
        out[key] = vals
    return CalibKitti(out["P2"], out["R0_rect"], out["Tr_velo_to_cam"])


def write_calib(path, calib: CalibKitti) -> None:
    with open(path, "w") as f:
        for key, mat in (("P2", calib.P2), ("R0_rect", calib.R0_rect),
                         ("Tr_velo_to_cam", calib.Tr_velo_to_cam)):
            f.write(key + ": " + " ".join(repr(float(v)) for v in mat.ravel())
                    + "\n")


def read_labels(path) -> list[Label3D]:
    labels = []
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) not in (15, 16):
                raise ParseError(f"expected 15 or 16 fields, got {len(tok)}",
                                 path, i)
            try:
                labels.append(Label3D(
                    class_name=tok[0],
                    truncation=float(tok[1]),
                    occlusion=int(float(tok[2])),
                    alpha=float(tok[3]),
                    bbox=tuple(float(v) for v in tok[4:8]),
                    dims=tuple(float(v) for v in tok[8:11]),
                    location=tuple(float(v) for v in tok[11:14]),
                    yaw=float(tok[14]),
                ))
            except ValueError as exc:
                raise ParseError(f"bad field: {exc}", path, i) from exc
    return labels


def write_labels(path, labels: list[Label3D]) -> None:
    with open(path, "w") as f:
        for lab in labels:
            fields = [lab.class_name, f"{lab.truncation:.2f}", str(lab.occlusion),
                      f"{lab.alpha:.6f}"]
            fields += [f"{v:.6f}" for v in lab.bbox]
            fields += [f"{v:.6f}" for v in lab.dims]
            fields += [f"{v:.6f}" for v in lab.location]
            fields.append(f"{lab.yaw:.6f}")
            f.write(" ".join(fields) + "\n")


def read_detections(path) -> list[Detection2D]:
    dets = []
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 6:
                raise ParseError(f"expected 6 fields, got {len(tok)}", path, i)
            try:
                bbox = tuple(float(v) for v in tok[1:5])
                score = float(tok[5])
            except ValueError as exc:
                raise ParseError(f"bad field: {exc}", path, i) from exc
            dets.append(Detection2D(tok[0], bbox, score))
    return dets


def write_detections(path, dets: list[Detection2D]) -> None:
    with open(path, "w") as f:
        for d in dets:
            f.write(f"{d.class_name} " + " ".join(f"{v:.6f}" for v in d.bbox)
                    + f" {d.score:.6f}\n")


# ---------------------------------------------------------------------------
# Frame transforms and RoI preprocessing
# ---------------------------------------------------------------------------

def velo_to_rect(points: np.ndarray, calib: CalibKitti) -> np.ndarray:
    """Sensor-frame points into the rectified camera frame."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        return points.reshape(0, 3)
    hom = np.hstack([points, np.ones((len(points), 1))])
    cam = hom @ calib.Tr_velo_to_cam.T
    return cam @ calib.R0_rect.T


def jitter_box2d(bbox, rng: np.random.Generator, fraction: float = 0.10,
                 image_size=(1242, 375)):
    """Randomly rescale and shift a 2D box by up to ``fraction`` of its size."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    u1, v1, u2, v2 = bbox
    w, h = u2 - u1, v2 - v1
    cu, cv = (u1 + u2) / 2.0, (v1 + v2) / 2.0
    sw = w * (1.0 + rng.uniform(-fraction, fraction))
    sh = h * (1.0 + rng.uniform(-fraction, fraction))
    cu = cu + rng.uniform(-fraction, fraction) * w
    cv = cv + rng.uniform(-fraction, fraction) * h
    iw, ih = image_size
    nu1 = min(max(cu - sw / 2.0, 0.0), iw)
    nv1 = min(max(cv - sh / 2.0, 0.0), ih)
    nu2 = min(max(cu + sw / 2.0, 0.0), iw)
    nv2 = min(max(cv + sh / 2.0, 0.0), ih)
    return (nu1, nv1, nu2, nv2)


def sample_points(points: np.ndarray, n_max: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement down to at most n_max points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if n_max <= 0:
        return points[:0]
    if len(points) <= n_max:
        return points
    idx = rng.choice(len(points), size=n_max, replace=False)
    return points[idx]


def make_frustum_sample(scene_points: np.ndarray, detection: Detection2D,
                        calib: CalibKitti, n_max: int,
                        rng: np.random.Generator, sample_id: str = "",
                        label: Label3D | None = None) -> FrustumSample:
    """Frustum-filter, canonicalize, and subsample one RoI.

    ``scene_points`` are sensor-frame. The ground-truth box, when a label is
    given, is rotated by the same canonical rotation as the points. An RoI
    with no frustum points is returned flagged ``empty`` rather than dropped.
    """
    u1, v1, u2, v2 = detection.bbox
    center = ((u1 + u2) / 2.0, (v1 + v2) / 2.0)
    R_c = geom3d.canonical_rotation(calib.intrinsics, center)

    in_frustum = geom3d.frustum_filter(scene_points, detection.bbox, calib)
    gt_box = None
    if label is not None:
        box = label.to_box3d()
        gt_box = Box3D(geom3d.rotate_points(box.corners, R_c),
                       class_id=box.class_id)
    if len(in_frustum) == 0:
        return FrustumSample(sample_id, detection, np.zeros((0, 3)), R_c,
                             gt_box=gt_box, empty=True)
    pts = geom3d.rotate_points(in_frustum, R_c)
    pts = sample_points(pts, n_max, rng)
    return FrustumSample(sample_id, detection, pts, R_c, gt_box=gt_box)


def project_box_to_2d(box: Box3D, calib: CalibKitti, image_size) -> tuple:
    """Minimum enclosing 2D bounding box of the projected 8 corners."""
    from .errors import BehindCamera
    uvd = geom3d.project_rect_points(box.corners, calib.P2)
    front = uvd[uvd[:, 2] > 0]
    if len(front) == 0:
        raise BehindCamera("all corners have non-positive depth")
    iw, ih = image_size
    u1 = min(max(front[:, 0].min(), 0.0), iw)
    u2 = min(max(front[:, 0].max(), 0.0), iw)
    v1 = min(max(front[:, 1].min(), 0.0), ih)
    v2 = min(max(front[:, 1].max(), 0.0), ih)
    return (u1, v1, u2, v2)


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    frame: str
    detection: Detection2D
    box: Box3D            # camera-frame corners
    score: float          # combined 2D x 3D score


def write_predictions(path, preds: list[Prediction]) -> None:
    """One line per prediction; field-exact round trip at 6 decimals."""
    with open(path, "w") as f:
        for p in preds:
            if not 0.0 <= p.score <= 1.0:
                raise ValidationError(f"combined score {p.score} outside [0, 1]")
            if not 0.0 <= p.detection.score <= 1.0:
                raise ValidationError(
                    f"2D score {p.detection.score} outside [0, 1]")
            fields = [p.frame, p.detection.class_name]
            fields += [f"{v:.6f}" for v in p.detection.bbox]
            fields.append(f"{p.detection.score:.6f}")
            fields += [f"{v:.6f}" for v in p.box.corners.ravel()]
            fields.append(f"{p.score:.6f}")
            f.write(" ".join(fields) + "\n")


def read_predictions(path) -> list[Prediction]:
    preds = []
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 32:
                raise ParseError(f"expected 32 fields, got {len(tok)}", path, i)
            try:
                bbox = tuple(float(v) for v in tok[2:6])
                score2d = float(tok[6])
                corners = np.array([float(v) for v in tok[7:31]]).reshape(8, 3)
                combined = float(tok[31])
            except ValueError as exc:
                raise ParseError(f"bad field: {exc}", path, i) from exc
            det = Detection2D(tok[1], bbox, score2d)
            box = Box3D(corners, class_id=tok[1], score=combined)
            preds.append(Prediction(tok[0], det, box, combined))
    return preds
