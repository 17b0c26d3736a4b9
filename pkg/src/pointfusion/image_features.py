"""Image-crop feature extractors producing the 2048-dim appearance vector.

Two interchangeable implementations:

* ``TinyCnnExtractor`` — a small trainable CNN (three strided conv stages,
  global average pooling, linear to 2048) for end-to-end runs.
* ``PrecomputedExtractor`` — a lookup table of 2048-vectors keyed by sample
  id, loaded from the same manifest + flat-binary container as checkpoints.
  A missing id is an error, never silent zeros.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import MissingFeature, ParseError, ShapeError

FEATURE_DIM = 2048
CROP_SIZE = 224
_PIXEL_MEAN = 0.5


class PrecomputedExtractor:
    """Byte-exact feature lookup keyed by sample id."""

    def __init__(self, table: dict[str, np.ndarray]):
        for key, vec in table.items():
            if vec.shape != (FEATURE_DIM,):
                raise ShapeError(
                    f"feature for {key!r} has shape {vec.shape}, "
                    f"expected ({FEATURE_DIM},)")
        self.table = table

    def extract(self, crop=None, sample_id: str | None = None) -> np.ndarray:
        if sample_id is None or sample_id not in self.table:
            raise MissingFeature(f"no precomputed feature for id {sample_id!r}")
        return self.table[sample_id]

    @property
    def trainable(self) -> bool:
        return False


def load_precomputed(path) -> PrecomputedExtractor:
    """Load a feature table; duplicate ids in the manifest are rejected."""
    import json
    with open(str(path) + ".json") as f:
        manifest = json.load(f)
    names = [entry["name"] for entry in manifest]
    if len(names) != len(set(names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ParseError(f"duplicate feature ids: {dupes}")
    return PrecomputedExtractor(ad.load_arrays(path))


def save_precomputed(path, table: dict[str, np.ndarray]) -> None:
    ad.save_arrays(path, table)


class TinyCnnExtractor:
    """3-stage strided CNN, global average pool, linear projection to 2048.

    Channels 3 -> 8 -> 16 -> 32 with 3x3 kernels at strides 4, 4, 2
    (224 -> 56 -> 14 -> 6 spatial), mirroring the average-across-locations
    structure of a residual backbone's final block at toy scale.
    """

    STAGES = ((3, 8, 3, 4), (8, 16, 3, 4), (16, 32, 3, 2))

    def __init__(self, params: dict | None = None,
                 rng: np.random.Generator | None = None,
                 prefix: str = "imagecnn."):
        self.prefix = prefix
        if params is None:
            params = self.init_params(rng or np.random.default_rng(0), prefix)
        self.params = params

    @classmethod
    def init_params(cls, rng: np.random.Generator,
                    prefix: str = "imagecnn.") -> dict:
        p = {}
        for i, (cin, cout, k, _) in enumerate(cls.STAGES, start=1):
            fan_in = k * k * cin
            limit = np.sqrt(6.0 / (fan_in + cout))
            p[f"{prefix}conv{i}.w"] = rng.uniform(-limit, limit,
                                                  size=(fan_in, cout))
            p[f"{prefix}conv{i}.b"] = np.zeros(cout)
        cin = cls.STAGES[-1][1]
        limit = np.sqrt(6.0 / (cin + FEATURE_DIM))
        p[f"{prefix}fc.w"] = rng.uniform(-limit, limit, size=(cin, FEATURE_DIM))
        p[f"{prefix}fc.b"] = np.zeros(FEATURE_DIM)
        return p

    @property
    def trainable(self) -> bool:
        return True

    def forward(self, crop, params: dict | None = None) -> Tensor:
        """Differentiable forward pass; returns a (2048,) tensor."""
        params = params if params is not None else self.params
        crop = ad.as_tensor(crop)
        if crop.shape != (CROP_SIZE, CROP_SIZE, 3):
            raise ShapeError(f"expected ({CROP_SIZE}, {CROP_SIZE}, 3) crop, "
                             f"got {crop.shape}")
        x = ad.add(crop, Tensor(-_PIXEL_MEAN))
        size = CROP_SIZE
        for i, (cin, cout, k, stride) in enumerate(self.STAGES, start=1):
            cols = ad.im2col(x, k, stride)
            h = ad.add(ad.matmul(cols, params[f"{self.prefix}conv{i}.w"]),
                       params[f"{self.prefix}conv{i}.b"])
            h = ad.relu(h)
            size = (size - k) // stride + 1
            x = ad.reshape(h, (size, size, cout))
        # Average across the feature map locations, then project.
        flat = ad.reshape(x, (size * size, self.STAGES[-1][1]))
        pooled = ad.reshape(ad.scale(ad.sum_over_axis(flat, axis=0),
                                     1.0 / (size * size)), (1, -1))
        feat = ad.add(ad.matmul(pooled, params[f"{self.prefix}fc.w"]),
                      params[f"{self.prefix}fc.b"])
        return ad.reshape(feat, (FEATURE_DIM,))

    def extract(self, crop, sample_id=None) -> np.ndarray:
        return self.forward(crop).values
