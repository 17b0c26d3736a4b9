"""Point-cloud trunk: STN input canonicalization, shared per-point MLPs,
and a global max-pool feature. No normalization layers anywhere; the
per-point layers are plain affine + ReLU so the absolute point coordinates
survive into the features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyInput

# Trunk widths: (64, 64) with the point-feature tap at the second layer,
# then (128, 1024) into the max-pool. Scaled-down configs keep the same
# structure.
DEFAULT_WIDTHS = (64, 64, 128, 1024)
STN_HIDDEN = 32


@dataclass
class PointNetOutput:
    point_features: Tensor      # (N, widths[1])
    global_feature: Tensor      # (1, widths[3])
    stn_matrix: Tensor          # (3, 3)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(rng: np.random.Generator,
                widths=DEFAULT_WIDTHS, prefix: str = "pointnet.") -> dict:
    """Weight dict for the trunk + STN. STN's final layer starts at zero so
    the predicted transform is exactly the identity at step 0."""
    w1, w2, w3, w4 = widths
    p = {}
    layer_dims = [(3, w1), (w1, w2), (w2, w3), (w3, w4)]
    for i, (fi, fo) in enumerate(layer_dims, start=1):
        p[f"{prefix}w{i}"] = _glorot(rng, fi, fo)
        p[f"{prefix}b{i}"] = np.zeros(fo)
    p[f"{prefix}stn.w1"] = _glorot(rng, 3, STN_HIDDEN)
    p[f"{prefix}stn.b1"] = np.zeros(STN_HIDDEN)
    p[f"{prefix}stn.w2"] = _glorot(rng, STN_HIDDEN, STN_HIDDEN)
    p[f"{prefix}stn.b2"] = np.zeros(STN_HIDDEN)
    p[f"{prefix}stn.w3"] = np.zeros((STN_HIDDEN, 9))
    p[f"{prefix}stn.b3"] = np.eye(3).ravel().copy()
    return p


def layer_inventory(params: dict, prefix: str = "pointnet.") -> list[str]:
    """Names of layer kinds present — used to assert the trunk carries only
    affine weights/biases (no running statistics of any kind)."""
    kinds = set()
    for name in params:
        if not name.startswith(prefix):
            continue
        leaf = name.rsplit(".", 1)[-1]
        kinds.add("weight" if leaf.startswith("w") else
                  "bias" if leaf.startswith("b") else leaf)
    return sorted(kinds)


def stn_forward(points: Tensor, params: dict,
                prefix: str = "pointnet.") -> tuple[Tensor, Tensor]:
    """Predict a 3x3 input transform and apply it: out = points @ A^T."""
    points = ad.as_tensor(points)
    h = ad.relu(ad.add(ad.matmul(points, params[f"{prefix}stn.w1"]),
                       params[f"{prefix}stn.b1"]))
    pooled = ad.max_over_axis(h, axis=0)
    pooled = ad.reshape(pooled, (1, -1))
    h2 = ad.relu(ad.add(ad.matmul(pooled, params[f"{prefix}stn.w2"]),
                        params[f"{prefix}stn.b2"]))
    a_flat = ad.add(ad.matmul(h2, params[f"{prefix}stn.w3"]),
                    params[f"{prefix}stn.b3"])
    A = ad.reshape(a_flat, (3, 3))
    transformed = ad.matmul(points, ad.transpose(A))
    return transformed, A


def stn_loss(A: Tensor) -> Tensor:
    """Orthogonality regularizer ||I - A A^T||_F^2; zero iff A is orthogonal."""
    A = ad.as_tensor(A)
    aat = ad.matmul(A, ad.transpose(A))
    return ad.frobenius_sq(ad.sub(Tensor(np.eye(3)), aat))


def pointnet_forward(points, params: dict, widths=DEFAULT_WIDTHS,
                     prefix: str = "pointnet.") -> PointNetOutput:
    """Shared per-point MLP with a point-feature tap and a max-pool global
    feature. Raises EmptyInput for N = 0."""
    points = ad.as_tensor(points)
    if points.shape[0] == 0:
        raise EmptyInput("pointnet_forward needs at least one point")
    tparams = {k: (v if isinstance(v, Tensor) else Tensor(v))
               for k, v in params.items()}
    x, A = stn_forward(points, tparams, prefix)
    h1 = ad.relu(ad.add(ad.matmul(x, tparams[f"{prefix}w1"]),
                        tparams[f"{prefix}b1"]))
    point_features = ad.relu(ad.add(ad.matmul(h1, tparams[f"{prefix}w2"]),
                                    tparams[f"{prefix}b2"]))
    h3 = ad.relu(ad.add(ad.matmul(point_features, tparams[f"{prefix}w3"]),
                        tparams[f"{prefix}b3"]))
    h4 = ad.relu(ad.add(ad.matmul(h3, tparams[f"{prefix}w4"]),
                        tparams[f"{prefix}b4"]))
    global_feature = ad.reshape(ad.max_over_axis(h4, axis=0), (1, -1))
    return PointNetOutput(point_features, global_feature, A)
