"""Raster containers, binary-mask algebra, Dice metrics and losses.

Everything in this module is a pure function over immutable inputs; the
container types freeze their pixel buffers on construction so they can be
shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import ndimage


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SliceImage:
    """A single 2-D intensity image, optionally positioned inside a volume."""

    pixels: np.ndarray
    slice_index: int | None = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be 2-D and non-empty, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image intensities must be finite")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(str(self.pixels.shape).encode())
        h.update(self.pixels.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class LabelMask:
    """Binary annotation mask over {0, 1}, shape-matched to its image."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.dtype == bool:
            px = px.astype(np.uint8)
        px = px.astype(np.uint8, copy=True)
        if px.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {px.shape}")
        if not np.isin(px, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    def is_empty(self) -> bool:
        return self.area == 0

    def astype_bool(self) -> np.ndarray:
        return self.pixels.astype(bool)


@dataclass(frozen=True)
class Volume:
    """Ordered stack of same-shape slices with physical spacing (dz, dy, dx) mm."""

    slices: tuple[SliceImage, ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        slices = tuple(self.slices)
        if len(slices) < 1:
            raise ValueError("volume needs at least one slice")
        shape = slices[0].shape
        for pos, sl in enumerate(slices):
            if sl.shape != shape:
                raise ValueError(f"slice {pos} shape {sl.shape} != {shape}")
            if sl.slice_index != pos:
                raise ValueError("slice_index must be contiguous from 0")
        object.__setattr__(self, "slices", slices)

    @classmethod
    def from_array(cls, voxels: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> "Volume":
        voxels = np.asarray(voxels, dtype=np.float64)
        if voxels.ndim != 3:
            raise ValueError(f"expected 3-D array, got shape {voxels.shape}")
        return cls(tuple(SliceImage(voxels[z], slice_index=z) for z in range(voxels.shape[0])), spacing)

    def to_array(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.slices])

    @property
    def num_slices(self) -> int:
        return len(self.slices)

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.slices[0].shape

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(str((self.num_slices,) + self.slice_shape).encode())
        for s in self.slices:
            h.update(s.pixels.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class LossConfig:
    """Dice-style loss knobs: `beta` weights false positives, `smooth` guards 0/0."""

    beta: float = 1.0
    smooth: float = 1e-6

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.smooth < 0:
            raise ValueError("smooth must be >= 0")


def _as_pixels(mask: Any) -> Any:
    """Accept LabelMask, numpy array, or torch tensor; return the raw 2-D data."""
    if isinstance(mask, LabelMask):
        return mask.pixels
    return mask


def _check_same_shape(a: Any, b: Any) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice(a: LabelMask | np.ndarray, b: LabelMask | np.ndarray) -> float:
    """Dice overlap 2|a∩b| / (|a|+|b|) between two binary masks.

    Two empty masks count as perfect agreement (1.0); empty vs non-empty is 0.0.
    """
    pa = np.asarray(_as_pixels(a)).astype(bool)
    pb = np.asarray(_as_pixels(b)).astype(bool)
    _check_same_shape(pa, pb)
    sa = int(pa.sum())
    sb = int(pb.sum())
    if sa == 0 and sb == 0:
        return 1.0
    inter = int(np.logical_and(pa, pb).sum())
    return 2.0 * inter / (sa + sb)


def confusion(pred: LabelMask | np.ndarray, gt: LabelMask | np.ndarray) -> ConfusionCounts:
    """Exact per-pixel confusion counts between a binary prediction and ground truth."""
    pp = np.asarray(_as_pixels(pred)).astype(bool)
    pg = np.asarray(_as_pixels(gt)).astype(bool)
    _check_same_shape(pp, pg)
    tp = int(np.logical_and(pp, pg).sum())
    fp = int(np.logical_and(pp, ~pg).sum())
    fn = int(np.logical_and(~pp, pg).sum())
    tn = int(np.logical_and(~pp, ~pg).sum())
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def biased_dice_loss(pred: Any, gt: Any, cfg: LossConfig | None = None) -> Any:
    """Dice-style loss with a false-positive bias weight.

    Computes ``1 - (2*TP + smooth) / (2*TP + beta*FP + FN + smooth)`` on soft
    counts (TP = sum pred*gt, FP = sum pred*(1-gt), FN = sum (1-pred)*gt).

    Works on numpy arrays (returns float) and torch tensors (returns a 0-dim
    tensor on the autograd graph). `pred` may be a soft map in [0, 1]; `gt`
    is binary.
    """
    if cfg is None:
        cfg = LossConfig()
    p = _as_pixels(pred)
    g = _as_pixels(gt)
    _check_same_shape(p, g)
    if isinstance(p, np.ndarray) or np.isscalar(p):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.size and (float(p.min()) < -1e-9 or float(p.max()) > 1 + 1e-9):
            raise ValueError("pred values must lie in [0, 1]")
    tp = (p * g).sum()
    fp = (p * (1 - g)).sum()
    fn = ((1 - p) * g).sum()
    num = 2.0 * tp + cfg.smooth
    den = 2.0 * tp + cfg.beta * fp + fn + cfg.smooth
    loss = 1.0 - num / den
    if isinstance(loss, (np.floating, float)):
        return float(loss)
    return loss


_STRUCTURES = {
    (2, 4): ndimage.generate_binary_structure(2, 1),
    (2, 8): ndimage.generate_binary_structure(2, 2),
    (3, 6): ndimage.generate_binary_structure(3, 1),
    (3, 26): ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: np.ndarray, connectivity: int | None = None) -> tuple[np.ndarray, int]:
    """Label connected components in scan order; default 8-neigh in 2-D, 26 in 3-D."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim not in (2, 3):
        raise ValueError("mask must be 2-D or 3-D")
    if connectivity is None:
        connectivity = 8 if mask.ndim == 2 else 26
    try:
        structure = _STRUCTURES[(mask.ndim, connectivity)]
    except KeyError:
        raise ValueError(f"unsupported connectivity {connectivity} for {mask.ndim}-D") from None
    labels, count = ndimage.label(mask, structure=structure)
    return labels, int(count)


def top_k_components(mask: LabelMask | np.ndarray, k: int, connectivity: int | None = None):
    """Keep the k largest connected components, zeroing the rest.

    Size ties break toward the component whose seed pixel comes first in scan
    order (scipy labels in raster order, so lower label id wins). If the mask
    has at most k components it is returned unchanged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    wrap = isinstance(mask, LabelMask)
    arr = np.asarray(_as_pixels(mask))
    labels, count = connected_components(arr, connectivity)
    if count <= k:
        return mask
    sizes = np.bincount(labels.ravel())[1:]  # skip background
    order = sorted(range(1, count + 1), key=lambda lab: (-sizes[lab - 1], lab))
    keep = set(order[:k])
    out = np.isin(labels, sorted(keep)).astype(np.uint8)
    return LabelMask(out) if wrap else out.astype(arr.dtype)


def mask_to_rle(mask: LabelMask | np.ndarray) -> dict:
    """Run-length encode a binary mask, row-major, counts starting with zeros."""
    arr = np.asarray(_as_pixels(mask)).astype(np.uint8)
    if arr.ndim != 2:
        raise ValueError("mask must be 2-D")
    flat = arr.ravel(order="C")
    counts: list[int] = []
    if flat.size:
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0] == 1:
            counts.append(0)
        counts.extend(int(r) for r in runs)
    return {"size": [int(arr.shape[0]), int(arr.shape[1])], "counts": counts}


def rle_to_mask(payload: dict) -> LabelMask:
    """Decode the {size, counts} run-length payload produced by mask_to_rle."""
    h, w = (int(v) for v in payload["size"])
    counts = [int(c) for c in payload["counts"]]
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for run in counts:
        if run < 0 or pos + run > flat.size:
            raise ValueError("invalid run-length payload")
        if val:
            flat[pos : pos + run] = 1
        pos += run
        val ^= 1
    if pos != flat.size:
        raise ValueError(f"run lengths cover {pos} of {flat.size} pixels")
    return LabelMask(flat.reshape(h, w))


def mask_instances(mask: LabelMask | np.ndarray, connectivity: int | None = None) -> list[np.ndarray]:
    """Split a mask into per-instance boolean arrays, scan-order."""
    arr = np.asarray(_as_pixels(mask))
    labels, count = connected_components(arr, connectivity)
    return [labels == lab for lab in range(1, count + 1)]
