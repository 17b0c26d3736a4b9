"""Fusion heads, loss formulations, hypothesis selection, and the training
driver.

Model variants:

* ``final``        — dense anchor-offset head with unsupervised scoring
* ``dense``        — dense head with supervised (inside-box) scoring
* ``dense-no-im``  — ``dense`` with the image feature zeroed
* ``global``       — direct 8-corner regression from the fused global vector
* ``global-no-im`` — ``global`` with the image feature zeroed
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geom3d, pointnet
from .autodiff import Tensor
from .errors import DegenerateBox, DivergenceError, ValidationError
from .geom3d import Box3D
from .image_features import FEATURE_DIM
from .kitti_io import FrustumSample

SCORE_EPS = 1e-7

VARIANTS = ("final", "dense", "dense-no-im", "global", "global-no-im")


@dataclass
class ModelConfig:
    variant: str = "final"
    w: float = 0.1                 # unsupervised-scoring tradeoff weight
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 16
    n_max: int = 400
    seed: int = 0
    jitter: float = 0.10
    feature_source: str = "precomputed"   # "precomputed" | "cnn" | "none"
    point_widths: tuple = pointnet.DEFAULT_WIDTHS
    head_widths: tuple = (512, 128)
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")
        self.point_widths = tuple(int(v) for v in self.point_widths)
        self.head_widths = tuple(int(v) for v in self.head_widths)

    @property
    def uses_image(self) -> bool:
        return not self.variant.endswith("no-im")

    @property
    def dense(self) -> bool:
        return self.variant in ("final", "dense", "dense-no-im")

    @property
    def unsupervised(self) -> bool:
        return self.variant == "final"

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        """Parse a key=value config file (unknown keys are errors)."""
        kwargs = {}
        casts = {"variant": str, "feature_source": str,
                 "w": float, "lr": float, "jitter": float,
                 "holdout_fraction": float,
                 "epochs": int, "batch": int, "n_max": int, "seed": int,
                 "point_widths": lambda s: tuple(int(v) for v in s.split(",")),
                 "head_widths": lambda s: tuple(int(v) for v in s.split(","))}
        with open(path) as f:
            for i, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{i}: expected key=value")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in casts:
                    raise ValidationError(f"{path}:{i}: unknown key {key!r}")
                kwargs[key] = casts[key](value.strip())
        return cls(**kwargs)


@dataclass
class GlobalPrediction:
    corners: Tensor            # (8, 3) absolute, canonicalized frame


@dataclass
class DensePrediction:
    offsets: Tensor            # (N, 24): per-point corner offsets
    scores: Tensor             # (N,) in (0, 1)


@dataclass
class LossBreakdown:
    offset_term: float
    score_term: float
    stn_term: float
    total: float
    total_node: Tensor = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig, rng: np.random.Generator) -> dict:
    p = pointnet.init_params(rng, config.point_widths)
    h1, h2 = config.head_widths
    if config.dense:
        in_dim = config.point_widths[1] + config.point_widths[3] + FEATURE_DIM
        dims = [(in_dim, h1), (h1, h2), (h2, 25)]
        prefix = "dense."
    else:
        in_dim = config.point_widths[3] + FEATURE_DIM
        dims = [(in_dim, h1), (h1, h2), (h2, 24)]
        prefix = "global."
    for i, (fi, fo) in enumerate(dims, start=1):
        limit = np.sqrt(6.0 / (fi + fo))
        p[f"{prefix}w{i}"] = rng.uniform(-limit, limit, size=(fi, fo))
        p[f"{prefix}b{i}"] = np.zeros(fo)
    return p


def _wrap(params: dict, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _mlp(x: Tensor, params: dict, prefix: str, n_layers: int = 3) -> Tensor:
    for i in range(1, n_layers + 1):
        x = ad.add(ad.matmul(x, params[f"{prefix}w{i}"]),
                   params[f"{prefix}b{i}"])
        if i < n_layers:
            x = ad.relu(x)
    return x


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def global_head(global_feature: Tensor, image_feature: Tensor,
                params: dict) -> GlobalPrediction:
    """Concatenate the two global vectors and regress 24 corner coordinates."""
    g = ad.reshape(ad.as_tensor(global_feature), (1, -1))
    im = ad.reshape(ad.as_tensor(image_feature), (1, -1))
    fused = ad.concat([g, im], axis=1)
    out = _mlp(fused, params, "global.")
    return GlobalPrediction(corners=ad.reshape(out, (8, 3)))


def dense_head(point_features: Tensor, global_feature: Tensor,
               image_feature: Tensor, params: dict) -> DensePrediction:
    """Shared per-point MLP over [point_feat | global_feat | image_feat]."""
    pf = ad.as_tensor(point_features)
    n = pf.shape[0]
    g = ad.repeat_rows(ad.as_tensor(global_feature), n)
    im = ad.repeat_rows(ad.as_tensor(image_feature), n)
    fused = ad.concat([pf, g, im], axis=1)
    out = _mlp(fused, params, "dense.")
    offsets = ad.slice_cols(out, 0, 24)
    logits = ad.reshape(ad.slice_cols(out, 24, 25), (-1,))
    # Affine squash into [eps, 1-eps]: keeps log(c) finite without the dead
    # gradients a hard clamp would create once the sigmoid saturates.
    scores = ad.add(ad.scale(ad.sigmoid(logits), 1.0 - 2.0 * SCORE_EPS),
                    Tensor(SCORE_EPS))
    return DensePrediction(offsets=offsets, scores=scores)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _breakdown(offset_t: Tensor, score_t: Tensor, stn_t: Tensor) -> LossBreakdown:
    total = ad.add(ad.add(offset_t, score_t), stn_t)
    return LossBreakdown(offset_term=float(offset_t.values),
                         score_term=float(score_t.values),
                         stn_term=float(stn_t.values),
                         total=float(total.values),
                         total_node=total)


def loss_global(pred: GlobalPrediction, gt_box: Box3D,
                stn_matrix: Tensor) -> LossBreakdown:
    """Summed smooth-L1 over the 24 corner coordinates + STN regularizer."""
    offset_t = ad.smooth_l1(pred.corners, Tensor(gt_box.corners),
                            reduction="sum")
    return _breakdown(offset_t, Tensor(0.0), pointnet.stn_loss(stn_matrix))


def _per_point_offset_loss(pred: DensePrediction, points: np.ndarray,
                           gt_box: Box3D) -> Tensor:
    """Smooth-L1 offset loss per point, summed over the 24 coordinates."""
    target = gt_box.corners.reshape(1, 24) - np.tile(points, (1, 8))
    elem = ad.smooth_l1(pred.offsets, Tensor(target), reduction="none")
    return ad.sum_over_axis(elem, axis=1)


def loss_dense_supervised(pred: DensePrediction, points: np.ndarray,
                          gt_box: Box3D, stn_matrix: Tensor) -> LossBreakdown:
    """Masked offset regression + inside-box score classification."""
    points = np.atleast_2d(points)
    mask = geom3d.points_in_box(points, gt_box).astype(np.float64)
    per_point = _per_point_offset_loss(pred, points, gt_box)
    offset_t = ad.mean(ad.mul(per_point, Tensor(mask)))
    score_t = ad.binary_cross_entropy(pred.scores, Tensor(mask),
                                      reduction="mean")
    return _breakdown(offset_t, score_t, pointnet.stn_loss(stn_matrix))


def loss_dense_unsupervised(pred: DensePrediction, points: np.ndarray,
                            gt_box: Box3D, stn_matrix: Tensor,
                            w: float = 0.1) -> LossBreakdown:
    """Confidence-weighted offsets against a logarithmic confidence bonus."""
    points = np.atleast_2d(points)
    per_point = _per_point_offset_loss(pred, points, gt_box)
    offset_t = ad.mean(ad.mul(per_point, pred.scores))
    score_t = ad.scale(ad.mean(ad.log(pred.scores)), -w)
    return _breakdown(offset_t, score_t, pointnet.stn_loss(stn_matrix))


# ---------------------------------------------------------------------------
# Selection and scoring
# ---------------------------------------------------------------------------

def select_hypothesis(offsets: np.ndarray, scores: np.ndarray,
                      points: np.ndarray,
                      min_dim: float = 1e-6) -> tuple[Box3D, float, int]:
    """Pick the highest-score anchor hypothesis (lowest index on ties) and
    decode it. Hypotheses whose fitted box has a near-zero dimension are
    discarded in favor of the next-best score; if every hypothesis is
    degenerate the raw argmax hypothesis is returned.
    """
    offsets = np.asarray(offsets).reshape(len(points), 8, 3)
    scores = np.asarray(scores).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    for idx in order:
        box = geom3d.decode_offsets(points[idx], offsets[idx])
        try:
            p = geom3d.param_from_corners(box)
        except DegenerateBox:
            continue
        if np.min(p.dims) < min_dim:
            continue
        return box, float(scores[idx]), int(idx)
    idx = int(order[0])
    return (geom3d.decode_offsets(points[idx], offsets[idx]),
            float(scores[idx]), idx)


def combine_scores(score2d: float, score3d: float) -> float:
    """Final detection score: product of the 2D and 3D confidences."""
    if not (0.0 <= score2d <= 1.0 and 0.0 <= score3d <= 1.0):
        raise ValidationError("scores must lie in [0, 1]")
    return score2d * score3d


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    """Parameter bundle + forward passes for one configured variant."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        if params is None:
            params = init_params(config, np.random.default_rng(config.seed))
        self.params = params

    def forward(self, points: np.ndarray, image_feature: np.ndarray | None,
                tparams: dict | None = None):
        """Run the trunk and the configured head.

        Returns (prediction, stn_matrix). ``tparams`` supplies pre-wrapped
        Tensors during training; inference wraps fresh constants.
        """
        cfg = self.config
        if tparams is None:
            tparams = _wrap(self.params, requires_grad=False)
        if image_feature is None or not cfg.uses_image:
            image_feature = np.zeros(FEATURE_DIM)
        pn = pointnet.pointnet_forward(np.atleast_2d(points), tparams,
                                       cfg.point_widths)
        if cfg.dense:
            pred = dense_head(pn.point_features, pn.global_feature,
                              Tensor(image_feature), tparams)
        else:
            pred = global_head(pn.global_feature, Tensor(image_feature),
                               tparams)
        return pred, pn.stn_matrix

    def loss(self, pred, points: np.ndarray, gt_box: Box3D,
             stn_matrix: Tensor) -> LossBreakdown:
        cfg = self.config
        if not cfg.dense:
            return loss_global(pred, gt_box, stn_matrix)
        if cfg.unsupervised:
            return loss_dense_unsupervised(pred, points, gt_box, stn_matrix,
                                           w=cfg.w)
        return loss_dense_supervised(pred, points, gt_box, stn_matrix)

    def predict_box(self, points: np.ndarray,
                    image_feature: np.ndarray | None) -> tuple[Box3D, float]:
        """Single-RoI inference in the canonicalized frame."""
        pred, _ = self.forward(points, image_feature)
        if self.config.dense:
            box, score, _ = select_hypothesis(pred.offsets.values,
                                              pred.scores.values,
                                              np.atleast_2d(points))
            return box, score
        # Global head carries no 3D confidence of its own.
        return Box3D(pred.corners.values.copy()), 1.0

    def save(self, path) -> None:
        ad.save_arrays(path, self.params)
        meta = {"variant": self.config.variant,
                "point_widths": list(self.config.point_widths),
                "head_widths": list(self.config.head_widths),
                "w": self.config.w, "n_max": self.config.n_max,
                "seed": self.config.seed}
        import json
        with open(str(path) + ".meta.json", "w") as f:
            json.dump(meta, f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Model":
        import json
        with open(str(path) + ".meta.json") as f:
            meta = json.load(f)
        config = ModelConfig(variant=meta["variant"],
                             point_widths=tuple(meta["point_widths"]),
                             head_widths=tuple(meta["head_widths"]),
                             w=meta["w"], n_max=meta["n_max"],
                             seed=meta["seed"])
        return cls(config, ad.load_arrays(path))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def corner_distance(pred_box: Box3D, gt_box: Box3D) -> float:
    """Mean Euclidean distance between corresponding corners."""
    return float(np.mean(np.linalg.norm(pred_box.corners - gt_box.corners,
                                        axis=1)))


def _usable(s: FrustumSample) -> bool:
    return not s.empty and s.gt_box is not None and len(s.points) > 0


def train(samples: list[FrustumSample], config: ModelConfig,
          metrics_path=None, log=None, resample=None) -> Model:
    """Train a model on frustum samples; returns the fitted model.

    Empty-frustum and unlabeled samples are excluded. A held-out fraction is
    split off (seeded) for the per-epoch corner-RMSE column of the metrics
    log. Gradients accumulate over ``config.batch`` RoIs per Adam step.

    ``resample``, when given, is called with the epoch index and must return
    a list parallel to ``samples`` with freshly jittered RoIs (2D-box jitter
    is re-drawn per epoch); the held-out split keeps the initial samples.
    """
    if not any(_usable(s) for s in samples):
        raise ValidationError("no trainable samples")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    n_hold = int(round(len(samples) * config.holdout_fraction))
    hold_idx = list(order[:n_hold])
    train_idx = [i for i in order[n_hold:] if _usable(samples[i])]
    if not train_idx:
        train_idx = [i for i in hold_idx if _usable(samples[i])]
    holdout = [samples[i] for i in hold_idx if _usable(samples[i])]

    model = Model(config)
    state = ad.adam_init(model.params)
    rows = []
    for epoch in range(config.epochs):
        epoch_samples = resample(epoch) if resample is not None else samples
        train_set = [epoch_samples[i] for i in train_idx
                     if _usable(epoch_samples[i])]
        perm = rng.permutation(len(train_set))
        sums = np.zeros(4)   # offset, score, stn, total
        count = 0
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        in_batch = 0
        for j, si in enumerate(perm):
            s = train_set[si]
            tparams = _wrap(model.params, requires_grad=True)
            try:
                pred, A = model.forward(s.points, s.image_feature, tparams)
                lb = model.loss(pred, s.points, s.gt_box, A)
            except FloatingPointError as exc:
                raise DivergenceError(str(exc)) from exc
            if not np.isfinite(lb.total):
                raise DivergenceError(f"loss became {lb.total} at epoch {epoch}")
            lb.total_node.backward()
            for k, t in tparams.items():
                if t.grad is not None:
                    grads[k] += t.grad
            sums += (lb.offset_term, lb.score_term, lb.stn_term, lb.total)
            count += 1
            in_batch += 1
            if in_batch == config.batch or j == len(perm) - 1:
                for k in grads:
                    grads[k] /= in_batch
                ad.adam_step(model.params, grads, state, lr=config.lr)
                grads = {k: np.zeros_like(v) for k, v in model.params.items()}
                in_batch = 0
        rmse = holdout_corner_rmse(model, holdout)
        avg = sums / max(count, 1)
        rows.append([epoch, avg[0], avg[1], avg[2], avg[3], rmse])
        if log is not None:
            log(f"epoch {epoch}: offset={avg[0]:.4f} score={avg[1]:.4f} "
                f"stn={avg[2]:.4f} total={avg[3]:.4f} holdout_rmse={rmse:.4f}")
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "offset_term", "score_term", "stn_term",
                             "total", "holdout_corner_rmse"])
            writer.writerows(rows)
    return model


def predict(model: Model, frames, features=None, top_k: int = 300,
            n_max: int = 400, seed: int = 0) -> list:
    """Run inference over the top-k detections per frame.

    Selected boxes are rotated back from the canonical frame into the camera
    frame (R_c^T) and scored by multiplying the 2D and 3D confidences.
    Empty-frustum detections yield no 3D prediction.
    """
    from .dataset import inference_samples
    from .kitti_io import Prediction
    if n_max <= 0:
        raise ValidationError("n_max must be positive for prediction")
    rng = np.random.default_rng(seed)
    preds = []
    for frame in frames:
        for s in inference_samples(frame, features, n_max, rng, top_k):
            if s.empty or len(s.points) == 0:
                continue
            box, score3d = model.predict_box(s.points, s.image_feature)
            cam_corners = box.corners @ s.R_c   # rows @ R = (R^T p)^T per row
            cam_box = Box3D(cam_corners, class_id=s.detection.class_name)
            combined = combine_scores(s.detection.score, score3d)
            cam_box.score = combined
            preds.append(Prediction(frame.frame_id, s.detection, cam_box,
                                    combined))
    return preds


def holdout_corner_rmse(model: Model, samples: list[FrustumSample]) -> float:
    """Root-mean-square corner distance over a held-out sample list."""
    errs = []
    for s in samples:
        if s.empty or s.gt_box is None or len(s.points) == 0:
            continue
        box, _ = model.predict_box(s.points, s.image_feature)
        errs.append(corner_distance(box, s.gt_box) ** 2)
    return float(np.sqrt(np.mean(errs))) if errs else float("nan")
