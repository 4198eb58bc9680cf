"""Prompt generators that need no episodic training: propagation of foreground
points across neighboring slices under an intensity-consistency test, and a
linear fg/bg point classifier over frozen encoder features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as tF

from .assist import AssistModel, TrainPair
from .backbone import ToyConvBackbone
from .core import LabelMask, SliceImage, Volume, dice
from .prompts import BG, FG, Point, PromptSet


@dataclass(frozen=True)
class PropagationConfig:
    """Threshold multiplier, seed-point count, walk direction and slice budget."""

    lambda_: float = 1.0
    n_points: int = 10
    direction: Literal["up", "down", "both"] = "both"
    max_slices: int = 64
    resample: bool = True  # re-draw points from the predicted mask when survivors thin out
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_ <= 0:
            raise ValueError("lambda_ must be > 0")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.direction not in ("up", "down", "both"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.max_slices < 1:
            raise ValueError("max_slices must be >= 1")


@dataclass
class PropagatedSlice:
    slice_index: int
    prompts: PromptSet
    mask: LabelMask
    survivors: int
    resampled: bool
    source: str  # "seed" or "propagated"


@dataclass
class PropagationResult:
    slices: dict[int, PropagatedSlice] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)

    def mask_volume(self, num_slices: int, slice_shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros((num_slices,) + slice_shape, dtype=np.uint8)
        for z, rec in self.slices.items():
            out[z] = rec.mask.pixels
        return out

    def save_trace(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for row in self.trace:
                fh.write(json.dumps(row) + "\n")


def _sample_mask_points(mask: np.ndarray, n: int, rng: np.random.Generator) -> list[Point]:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return []
    idx = rng.choice(len(ys), size=min(n, len(ys)), replace=False)
    return [Point(x=int(xs[i]), y=int(ys[i]), label=FG) for i in idx]


def propagate_prompts(
    volume: Volume,
    seed_slice: int,
    seed_label: LabelMask,
    cfg: PropagationConfig,
    assist_model: AssistModel,
    gt: np.ndarray | None = None,
) -> PropagationResult:
    """Walk foreground points to neighboring slices while the per-point intensity
    change stays within lambda * (stddev of seed-slice intensities under the seed
    label); each reached slice is segmented once with the surviving points.

    When survivors drop below n_points/2 (but above zero) and resampling is on,
    points are re-drawn from the newly predicted mask before continuing. Stops
    on zero survivors, the volume boundary, or the per-direction slice budget.
    """
    if not 0 <= seed_slice < volume.num_slices:
        raise ValueError(f"seed slice {seed_slice} outside volume of {volume.num_slices}")
    if seed_label.is_empty():
        raise ValueError("seed label has no foreground")
    if seed_label.shape != volume.slice_shape:
        raise ValueError(f"seed label shape {seed_label.shape} != volume {volume.slice_shape}")

    rng = np.random.default_rng(cfg.seed)
    seed_pixels = volume.slices[seed_slice].pixels
    x_tilde = float(seed_pixels[seed_label.astype_bool()].std())
    threshold = cfg.lambda_ * x_tilde

    seed_points = _sample_mask_points(seed_label.pixels, cfg.n_points, rng)
    result = PropagationResult()
    result.slices[seed_slice] = PropagatedSlice(
        slice_index=seed_slice,
        prompts=PromptSet(tuple(seed_points)),
        mask=seed_label,
        survivors=len(seed_points),
        resampled=False,
        source="seed",
    )
    result.trace.append({
        "slice": seed_slice,
        "survivors": len(seed_points),
        "resampled": False,
        "dice_if_gt_available": dice(seed_label, LabelMask(gt[seed_slice])) if gt is not None else None,
    })

    steps = {"up": (1,), "down": (-1,), "both": (1, -1)}[cfg.direction]
    for step in steps:
        t = seed_slice
        points = list(seed_points)
        for _ in range(cfg.max_slices):
            nxt = t + step
            if not 0 <= nxt < volume.num_slices:
                break
            cur_px = volume.slices[t].pixels
            nxt_px = volume.slices[nxt].pixels
            survivors = [
                p for p in points
                if abs(float(nxt_px[p.y, p.x]) - float(cur_px[p.y, p.x])) <= threshold
            ]
            if not survivors:
                result.trace.append({
                    "slice": nxt, "survivors": 0, "resampled": False,
                    "dice_if_gt_available": None,
                })
                break
            prompts = PromptSet(tuple(survivors))
            mask = assist_model.segment(volume.slices[nxt], prompts)
            resampled = False
            next_points = survivors
            if cfg.resample and len(survivors) < cfg.n_points / 2 and not mask.is_empty():
                drawn = _sample_mask_points(mask.pixels, cfg.n_points, rng)
                if drawn:
                    next_points = drawn
                    resampled = True
            result.slices[nxt] = PropagatedSlice(
                slice_index=nxt,
                prompts=prompts,
                mask=mask,
                survivors=len(survivors),
                resampled=resampled,
                source="propagated",
            )
            result.trace.append({
                "slice": nxt,
                "survivors": len(survivors),
                "resampled": resampled,
                "dice_if_gt_available": dice(mask, LabelMask(gt[nxt])) if gt is not None else None,
            })
            t = nxt
            points = next_points
    return result


def propagate_ensemble(
    volume: Volume,
    seeds: Sequence[tuple[int, LabelMask]],
    cfg: PropagationConfig,
    assist_model: AssistModel,
    gt: np.ndarray | None = None,
) -> tuple[np.ndarray, list[PropagationResult]]:
    """Run propagation independently per seed and combine per-slice by pixel
    majority (ties count as foreground, so two disagreeing members union)."""
    if not seeds:
        raise ValueError("need at least one seed")
    members = [
        propagate_prompts(volume, z, label, cfg, assist_model, gt=gt)
        for z, label in seeds
    ]
    shape = (volume.num_slices,) + volume.slice_shape
    combined = np.zeros(shape, dtype=np.uint8)
    for z in range(volume.num_slices):
        masks = [m.slices[z].mask.pixels for m in members if z in m.slices]
        if not masks:
            continue
        votes = np.sum(masks, axis=0, dtype=np.int32)
        combined[z] = (2 * votes >= len(masks)) & (votes >= 1)
    return combined, members


# ---------------------------------------------------------- prompt classifier


@dataclass(frozen=True)
class PointClassifier:
    """Linear fg/bg head over per-pixel (bilinearly upsampled) encoder features."""

    weights: np.ndarray  # (feature_dim,)
    bias: float
    feature_dim: int
    trained_on: str | None = None
    train_accuracy: float = float("nan")

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise ValueError("classifier weights must be finite")
        w = np.ascontiguousarray(w)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Foreground probability for each feature row."""
        logits = np.asarray(features, dtype=np.float64) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.scores(features) >= 0.5).astype(np.int64)


def pixel_features(backbone: ToyConvBackbone, image: SliceImage) -> np.ndarray:
    """Per-pixel feature map (H, W, C): frozen embedding upsampled to source size."""
    emb = backbone.encode_image(image)
    t = torch.from_numpy(np.array(emb.features))[None]
    up = tF.interpolate(t, size=image.shape, mode="bilinear", align_corners=False)[0]
    return up.permute(1, 2, 0).numpy()


def train_point_classifier(
    pairs: Sequence[TrainPair],
    backbone: ToyConvBackbone,
    seed: int = 0,
    max_per_class: int = 4000,
) -> PointClassifier:
    """Fit the linear head on class-balanced per-pixel samples from the
    annotated slices; reports training accuracy on the balanced sample."""
    from sklearn.linear_model import LogisticRegression

    if not pairs:
        raise ValueError("need at least one training pair")
    feats = []
    labels = []
    for pair in pairs:
        f = pixel_features(backbone, pair.image)
        feats.append(f.reshape(-1, f.shape[-1]))
        labels.append(pair.label.pixels.reshape(-1))
    X = np.concatenate(feats)
    y = np.concatenate(labels)
    n_fg = int((y == 1).sum())
    n_bg = int((y == 0).sum())
    if n_fg == 0 or n_bg == 0:
        raise ValueError("training data must contain both classes")

    rng = np.random.default_rng(seed)
    per_class = min(n_fg, n_bg, max_per_class)
    fg_idx = rng.choice(np.flatnonzero(y == 1), size=per_class, replace=False)
    bg_idx = rng.choice(np.flatnonzero(y == 0), size=per_class, replace=False)
    idx = np.concatenate([fg_idx, bg_idx])
    Xb, yb = X[idx], y[idx]

    clf = LogisticRegression(C=1e4, max_iter=2000, tol=1e-9)
    clf.fit(Xb, yb)
    acc = float(clf.score(Xb, yb))
    return PointClassifier(
        weights=clf.coef_[0],
        bias=float(clf.intercept_[0]),
        feature_dim=X.shape[1],
        trained_on=pairs[0].case_id,
        train_accuracy=acc,
    )


def classify_candidate_points(
    image: SliceImage,
    classifier: PointClassifier,
    backbone: ToyConvBackbone,
    grid_stride: int = 8,
    n_per_class: int = 5,
) -> PromptSet:
    """Label a stride grid of candidate pixels fg/bg and keep the top-confidence
    n per class, ordered by descending confidence within each class."""
    if grid_stride < 1:
        raise ValueError("grid_stride must be >= 1")
    h, w = image.shape
    xs = np.arange(grid_stride // 2, w, grid_stride)
    ys = np.arange(grid_stride // 2, h, grid_stride)
    if xs.size == 0 or ys.size == 0:
        return PromptSet(())
    feats = pixel_features(backbone, image)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    flat_y = gy.ravel()
    flat_x = gx.ravel()
    probs = classifier.scores(feats[flat_y, flat_x])

    fg_order = np.argsort(-probs, kind="stable")
    bg_order = np.argsort(probs, kind="stable")
    points: list[Point] = []
    for i in fg_order[: min(n_per_class, np.count_nonzero(probs >= 0.5))]:
        points.append(Point(x=int(flat_x[i]), y=int(flat_y[i]), label=FG))
    for i in bg_order[: min(n_per_class, np.count_nonzero(probs < 0.5))]:
        points.append(Point(x=int(flat_x[i]), y=int(flat_y[i]), label=BG))
    return PromptSet(tuple(points))
