"""Assemble on-disk datasets into frustum samples for training and inference.

A dataset directory follows the KITTI-style layout emitted by ``datagen``:

    velodyne/<frame>.bin     calib/<frame>.txt      label_2/<frame>.txt
    detections/<frame>.txt   features/features.bin(+.json)

Image features are looked up by sample id ``<frame>_<index>``, where the
index refers to the label (training) or detection (inference) row.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import kitti_io
from .datagen import IMAGE_SIZE as DEFAULT_IMAGE_SIZE
from .errors import ValidationError
from .image_features import PrecomputedExtractor, load_precomputed
from .kitti_io import CalibKitti, Detection2D, FrustumSample, Label3D


@dataclass
class Frame:
    frame_id: str
    points: np.ndarray            # sensor-frame (N, 3)
    calib: CalibKitti
    labels: list[Label3D]
    detections: list[Detection2D]


def load_frames(data_dir) -> list[Frame]:
    velo_dir = os.path.join(data_dir, "velodyne")
    if not os.path.isdir(velo_dir):
        raise ValidationError(f"not a dataset directory: {data_dir}")
    frames = []
    for name in sorted(os.listdir(velo_dir)):
        if not name.endswith(".bin"):
            continue
        frame_id = name[:-4]
        points = kitti_io.read_velodyne_points(os.path.join(velo_dir, name))
        calib = kitti_io.read_calib(
            os.path.join(data_dir, "calib", frame_id + ".txt"))
        label_path = os.path.join(data_dir, "label_2", frame_id + ".txt")
        labels = kitti_io.read_labels(label_path) if os.path.exists(label_path) else []
        det_path = os.path.join(data_dir, "detections", frame_id + ".txt")
        dets = kitti_io.read_detections(det_path) if os.path.exists(det_path) else []
        frames.append(Frame(frame_id, points, calib, labels, dets))
    return frames


def load_features(data_dir) -> PrecomputedExtractor | None:
    path = os.path.join(data_dir, "features", "features.bin")
    return load_precomputed(path) if os.path.exists(path) else None


def training_samples(frames: list[Frame],
                     features: PrecomputedExtractor | None,
                     n_max: int, rng: np.random.Generator,
                     jitter: float = 0.10,
                     image_size=DEFAULT_IMAGE_SIZE) -> list[FrustumSample]:
    """One sample per ground-truth label, with a jittered 2D crop box."""
    samples = []
    for frame in frames:
        for li, label in enumerate(frame.labels):
            bbox = (kitti_io.jitter_box2d(label.bbox, rng, jitter, image_size)
                    if jitter > 0 else label.bbox)
            det = Detection2D(label.class_name, bbox, 1.0)
            sid = f"{frame.frame_id}_{li}"
            sample = kitti_io.make_frustum_sample(
                frame.points, det, frame.calib, n_max, rng,
                sample_id=sid, label=label)
            if features is not None:
                sample.image_feature = features.extract(sample_id=sid)
            samples.append(sample)
    return samples


def training_resampler(frames: list[Frame],
                       features: PrecomputedExtractor | None,
                       n_max: int, seed: int, jitter: float = 0.10,
                       image_size=DEFAULT_IMAGE_SIZE):
    """Per-epoch jitter re-draw: returns (initial_samples, resample_fn)."""
    def build(epoch: int) -> list[FrustumSample]:
        rng = np.random.default_rng([seed, epoch])
        return training_samples(frames, features, n_max, rng, jitter,
                                image_size)
    return build(0), build


def inference_samples(frame: Frame,
                      features: PrecomputedExtractor | None,
                      n_max: int, rng: np.random.Generator,
                      top_k: int = 300) -> list[FrustumSample]:
    """Samples for the top-k detections of one frame, by 2D score."""
    order = sorted(range(len(frame.detections)),
                   key=lambda i: (-frame.detections[i].score, i))[:top_k]
    samples = []
    for di in order:
        det = frame.detections[di]
        sid = f"{frame.frame_id}_{di}"
        sample = kitti_io.make_frustum_sample(
            frame.points, det, frame.calib, n_max, rng, sample_id=sid)
        if features is not None:
            sample.image_feature = features.extract(sample_id=sid)
        samples.append(sample)
    return samples
