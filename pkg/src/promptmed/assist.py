"""Per-case prompt learning over a frozen backbone.

Covers training-time prompt synthesis (point sampling schemes, box jitter,
composite prompts regenerated every iteration), the trainer that optimizes
only the prompt-encoder parameters, and the point / box / active-composite
evaluation protocols.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from scipy import ndimage

from .backbone import PromptEncoderState, ToyConvBackbone
from .core import LabelMask, SliceImage, dice, mask_instances
from .prompts import BG, FG, Box, Point, PromptSet

Region = Literal["fg", "bg"]


@dataclass(frozen=True)
class TrainPair:
    """An annotated slice: intensity image plus binary label."""

    image: SliceImage
    label: LabelMask
    case_id: str | None = None

    def __post_init__(self) -> None:
        if self.image.shape != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} differ")


@dataclass(frozen=True)
class PointSamplingConfig:
    """How many points to draw and where: uniform over the region, from the
    deep interior (distance-transform top decile), or near the boundary."""

    scheme: Literal["uniform", "center", "boundary"] = "uniform"
    n_min: int = 1
    n_max: int = 2  # exclusive upper bound
    boundary_band: int = 2
    shared_background: bool = True  # bg points drawn once per slice, not per instance

    def __post_init__(self) -> None:
        if not (1 <= self.n_min < self.n_max):
            raise ValueError(f"need 1 <= n_min < n_max, got [{self.n_min}, {self.n_max})")
        if self.scheme not in ("uniform", "center", "boundary"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.boundary_band < 1:
            raise ValueError("boundary_band must be >= 1")


@dataclass(frozen=True)
class BoxJitterConfig:
    """Per-edge random displacement range: d_in inward, d_out outward pixels."""

    d_in: int = 0
    d_out: int = 0

    def __post_init__(self) -> None:
        if self.d_in < 0 or self.d_out < 0:
            raise ValueError("jitter margins must be >= 0")


@dataclass(frozen=True)
class AssistTrainConfig:
    prompt_mode: Literal["points", "boxes", "composite"] = "points"
    epochs: int = 150
    lr: float = 1e-2
    loss: Literal["dice", "cross_entropy", "dice_plus_ce"] = "dice_plus_ce"
    seed: int = 0
    point_cfg: PointSamplingConfig = field(default_factory=lambda: PointSamplingConfig(n_min=1, n_max=11))
    box_cfg: BoxJitterConfig = field(default_factory=lambda: BoxJitterConfig(d_in=3, d_out=3))

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.prompt_mode not in ("points", "boxes", "composite"):
            raise ValueError(f"unknown prompt mode {self.prompt_mode!r}")
        if self.loss not in ("dice", "cross_entropy", "dice_plus_ce"):
            raise ValueError(f"unknown loss {self.loss!r}")


def _interior_distances(region: np.ndarray) -> np.ndarray:
    """Euclidean distance to the region's outside; the image border counts as outside."""
    padded = np.pad(region.astype(np.uint8), 1)
    dt = ndimage.distance_transform_edt(padded)
    return dt[1:-1, 1:-1]


def sample_points(
    label: LabelMask,
    cfg: PointSamplingConfig,
    region: Region,
    rng: np.random.Generator,
) -> list[Point]:
    """Draw n ~ UniformInt[n_min, n_max) points from the requested region.

    `uniform` draws anywhere in the region, `center` restricts candidates to
    the deep interior (distance values >= max(90th percentile, 0.9 * max)),
    `boundary` to pixels within boundary_band px of the region's edge. An
    empty region yields an empty list with a warning.
    """
    if region not in ("fg", "bg"):
        raise ValueError(f"region must be 'fg' or 'bg', got {region!r}")
    want = label.pixels == (1 if region == "fg" else 0)
    if not want.any():
        warnings.warn(f"requested {region} region is empty; no points sampled", stacklevel=2)
        return []
    n = int(rng.integers(cfg.n_min, cfg.n_max))

    if cfg.scheme == "uniform":
        candidates = want
    else:
        dt = _interior_distances(want)
        dts = dt[want]
        if cfg.scheme == "center":
            thresh = max(float(np.quantile(dts, 0.9)), 0.9 * float(dts.max()))
            candidates = want & (dt >= thresh - 1e-12)
        else:
            candidates = want & (dt <= cfg.boundary_band)
        if not candidates.any():
            candidates = want & (dt == dts.max())

    ys, xs = np.nonzero(candidates)
    idx = rng.choice(len(ys), size=n, replace=len(ys) < n)
    point_label = FG if region == "fg" else BG
    return [Point(x=int(xs[i]), y=int(ys[i]), label=point_label) for i in idx]


def tight_box(label: LabelMask) -> Box:
    """Half-open bounding box of the mask's foreground."""
    if label.is_empty():
        raise ValueError("mask has no foreground; cannot derive a box")
    ys, xs = np.nonzero(label.pixels)
    return Box(x1=int(xs.min()), y1=int(ys.min()), x2=int(xs.max()) + 1, y2=int(ys.max()) + 1)


def jitter_box(label: LabelMask, cfg: BoxJitterConfig, rng: np.random.Generator) -> Box:
    """Displace each edge of the tight box independently by UniformInt[-d_in, d_out]
    (outward positive), clamped to image bounds; degenerate draws are retried."""
    base = tight_box(label)
    h, w = label.shape
    for _ in range(200):
        dl, dt_, dr, db = (int(rng.integers(-cfg.d_in, cfg.d_out + 1)) for _ in range(4))
        x1 = max(0, base.x1 - dl)
        y1 = max(0, base.y1 - dt_)
        x2 = min(w, base.x2 + dr)
        y2 = min(h, base.y2 + db)
        if x1 < x2 and y1 < y2:
            return Box(x1=x1, y1=y1, x2=x2, y2=y2)
    return Box(x1=max(0, base.x1), y1=max(0, base.y1), x2=min(w, base.x2), y2=min(h, base.y2))


def synthesize_prompts(
    pair: TrainPair,
    mode: str,
    point_cfg: PointSamplingConfig,
    box_cfg: BoxJitterConfig,
    rng: np.random.Generator,
) -> PromptSet:
    """Fresh training prompts for one slice: per-instance boxes and/or fg points,
    plus shared background points when the mode includes points."""
    prompts: list = []
    instances = mask_instances(pair.label)
    with_points = mode in ("points", "composite")
    with_boxes = mode in ("boxes", "composite")
    for inst in instances:
        inst_mask = LabelMask(inst.astype(np.uint8))
        if with_boxes:
            prompts.append(jitter_box(inst_mask, box_cfg, rng))
        if with_points:
            prompts.extend(sample_points(inst_mask, point_cfg, "fg", rng))
    if with_points:
        if point_cfg.shared_background:
            prompts.extend(sample_points(pair.label, point_cfg, "bg", rng))
        else:
            for inst in instances:
                prompts.extend(sample_points(LabelMask(inst.astype(np.uint8)), point_cfg, "bg", rng))
    return PromptSet(tuple(prompts))


@dataclass(frozen=True)
class AssistModel:
    """A backbone plus trained prompt-encoder parameters, ready to segment."""

    backbone: ToyConvBackbone
    state: PromptEncoderState
    threshold: float = 0.0

    def segment(self, image: SliceImage, prompts: PromptSet) -> LabelMask:
        return self.backbone.segment(image, prompts, self.state, self.threshold)


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    total_seconds: float = 0.0

    def record(self, epoch: int, loss: float, seconds: float) -> None:
        self.epochs.append({"epoch": epoch, "loss": loss, "seconds": seconds})
        self.total_seconds = seconds

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_jsonable(self) -> dict:
        return {"epochs": self.epochs, "total_seconds": self.total_seconds}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_jsonable(), indent=1))


def _soft_dice_loss(logits: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(logits)
    num = 2.0 * (p * gt).sum() + smooth
    den = p.sum() + gt.sum() + smooth
    return 1.0 - num / den


def _train_loss(logits: torch.Tensor, gt: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "dice":
        return _soft_dice_loss(logits, gt)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, gt)
    if kind == "cross_entropy":
        return bce
    return _soft_dice_loss(logits, gt) + bce


def train_prompt_encoder(
    pairs: Sequence[TrainPair],
    backbone: ToyConvBackbone,
    cfg: AssistTrainConfig,
    init_state: PromptEncoderState | None = None,
    progress=None,
    should_stop=None,
) -> tuple[PromptEncoderState, TrainingLog]:
    """Optimize the prompt-encoder parameters on annotated slices.

    Prompts are regenerated from the labels on every iteration per
    cfg.prompt_mode; the image encoder and mask decoder never change. Returns
    the final state and a per-epoch loss/seconds log.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    fg_pairs = [p for p in pairs if not p.label.is_empty()]
    if not fg_pairs:
        raise ValueError("no training pair contains foreground")

    rng = np.random.default_rng(cfg.seed)
    state = init_state if init_state is not None else backbone.init_prompt_state(seed=cfg.seed)
    theta = backbone.theta_tensors(state, requires_grad=True)
    opt = torch.optim.Adam(list(theta.values()), lr=cfg.lr)

    embeddings = [
        (torch.from_numpy(np.array(backbone.encode_image(p.image).features)), p)
        for p in fg_pairs
    ]
    gts = [torch.from_numpy(p.label.pixels.astype(np.float64)) for p in fg_pairs]

    log = TrainingLog()
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for (emb_t, pair), gt in zip(embeddings, gts):
            prompts = synthesize_prompts(pair, cfg.prompt_mode, cfg.point_cfg, cfg.box_cfg, rng)
            logits = backbone.predict_logits_t(emb_t, prompts, theta, pair.image.shape)
            loss = _train_loss(logits, gt, cfg.loss)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} (case {pair.case_id!r}, "
                    f"mode {cfg.prompt_mode}, lr {cfg.lr})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        log.record(epoch, float(np.mean(epoch_losses)), time.perf_counter() - start)
        if progress is not None:
            progress((epoch + 1) / cfg.epochs)
        if should_stop is not None and should_stop():
            break
    return backbone.state_from_tensors(theta), log


# ----------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    @property
    def dices(self) -> np.ndarray:
        return np.array([r["dice"] for r in self.rows], dtype=np.float64)

    def summary(self) -> dict:
        d = self.dices
        return {
            "n": int(d.size),
            "mean": float(d.mean()) if d.size else float("nan"),
            "std": float(d.std()) if d.size else float("nan"),
            "empty_predictions": int(sum(bool(r.get("empty_prediction")) for r in self.rows)),
        }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "n_points", "dice"])
            for r in self.rows:
                writer.writerow([r["case_id"], r.get("n_points", ""), f"{r['dice']:.6f}"])

    def save_summary(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.summary()
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=1))


def _uniform_points(mask: np.ndarray, n: int, point_label: int, rng: np.random.Generator) -> list[Point]:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0 or n == 0:
        return []
    idx = rng.choice(len(ys), size=n, replace=len(ys) < n)
    return [Point(x=int(xs[i]), y=int(ys[i]), label=point_label) for i in idx]


def eval_points(
    model: AssistModel,
    cases: Sequence[TrainPair],
    n_points: int,
    seed: int = 0,
) -> EvalReport:
    """Point-prompt validation: n uniform fg points per instance plus n shared
    bg points per slice, one segmentation per case, Dice against ground truth."""
    rng = np.random.default_rng(seed)
    report = EvalReport()
    for idx, case in enumerate(cases):
        prompts: list[Point] = []
        for inst in mask_instances(case.label):
            prompts.extend(_uniform_points(inst, n_points, FG, rng))
        prompts.extend(_uniform_points(case.label.pixels == 0, n_points, BG, rng))
        pred = model.segment(case.image, PromptSet(tuple(prompts)))
        report.rows.append({
            "case_id": case.case_id or f"case{idx}",
            "n_points": n_points,
            "dice": dice(pred, case.label),
            "empty_prediction": pred.is_empty() and not case.label.is_empty(),
        })
    return report


def eval_boxes(
    model: AssistModel,
    cases: Sequence[TrainPair],
    box_cfg: BoxJitterConfig,
    seed: int = 0,
) -> EvalReport:
    """Box-prompt validation: one jittered box per instance, Dice per case."""
    rng = np.random.default_rng(seed)
    report = EvalReport()
    for idx, case in enumerate(cases):
        boxes = [
            jitter_box(LabelMask(inst.astype(np.uint8)), box_cfg, rng)
            for inst in mask_instances(case.label)
        ]
        pred = model.segment(case.image, PromptSet(tuple(boxes)))
        report.rows.append({
            "case_id": case.case_id or f"case{idx}",
            "n_points": 0,
            "dice": dice(pred, case.label),
            "empty_prediction": pred.is_empty() and not case.label.is_empty(),
        })
    return report


def _interior_most_pixel(region: np.ndarray) -> tuple[int, int]:
    """(x, y) of the deepest pixel of the region's largest component."""
    labels, count = ndimage.label(region, structure=ndimage.generate_binary_structure(2, 2))
    if count == 0:
        raise ValueError("region is empty")
    sizes = np.bincount(labels.ravel())[1:]
    largest = int(np.argmax(sizes)) + 1  # argmax returns first max: lowest label wins ties
    comp = labels == largest
    dt = _interior_distances(comp)
    y, x = np.unravel_index(int(np.argmax(dt)), dt.shape)
    return int(x), int(y)


def eval_composite_active(
    model: AssistModel,
    cases: Sequence[TrainPair],
    box_cfg: BoxJitterConfig | None = None,
    max_boxes: int = 1,
    max_points: int = 5,
    seed: int = 0,
) -> EvalReport:
    """Active composite validation, per instance: one jittered box, then up to
    max_points refinement clicks — a fg point at the deepest pixel of the
    largest false-negative component when FN area >= FP area, else a bg point
    in the largest false-positive component. Reports the best Dice over the
    prefix of steps (box-only included)."""
    if max_boxes != 1:
        raise ValueError("protocol uses exactly one box per instance")
    box_cfg = box_cfg or BoxJitterConfig()
    rng = np.random.default_rng(seed)
    report = EvalReport()
    for idx, case in enumerate(cases):
        for inst_id, inst in enumerate(mask_instances(case.label)):
            gt = LabelMask(inst.astype(np.uint8))
            prompts = PromptSet((jitter_box(gt, box_cfg, rng),))
            pred = model.segment(case.image, prompts)
            box_dice = dice(pred, gt)
            best = box_dice
            trace: list[dict] = []
            for _ in range(max_points):
                fn = gt.astype_bool() & ~pred.astype_bool()
                fp = pred.astype_bool() & ~gt.astype_bool()
                if not fn.any() and not fp.any():
                    break
                if fn.sum() >= fp.sum() and fn.any():
                    x, y = _interior_most_pixel(fn)
                    point = Point(x=x, y=y, label=FG)
                    in_region = bool(fn[y, x])
                else:
                    x, y = _interior_most_pixel(fp)
                    point = Point(x=x, y=y, label=BG)
                    in_region = bool(fp[y, x])
                trace.append({"x": x, "y": y, "label": point.label, "in_target_region": in_region})
                prompts = prompts.extend([point])
                pred = model.segment(case.image, prompts)
                best = max(best, dice(pred, gt))
            report.rows.append({
                "case_id": f"{case.case_id or f'case{idx}'}/inst{inst_id}",
                "n_points": len(trace),
                "dice": best,
                "box_dice": box_dice,
                "points": trace,
                "empty_prediction": pred.is_empty() and not gt.is_empty(),
            })
    return report
