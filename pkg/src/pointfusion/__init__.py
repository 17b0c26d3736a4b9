"""Desk-scale 3D bounding-box estimation from fused image crops and frustum
point clouds, with dense per-point spatial-anchor box prediction and a full
oriented-3D-IoU / average-precision evaluation stack."""

__version__ = "0.1.0"
