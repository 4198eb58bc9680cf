"""Dataset ingestion, annotated-slice selection, and synthetic phantoms.

Volumes travel as NIfTI-1 (.nii / .nii.gz) for 3-D data and PNG/TIFF pairs
for 2-D data; a JSON manifest (schema promptmed-manifest/1) indexes cases.
The NIfTI codec here is intentionally minimal: little-endian, identity
orientation, float32/uint8/int16 payloads.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .core import LabelMask, SliceImage, Volume

MANIFEST_SCHEMA = "promptmed-manifest/1"


# ------------------------------------------------------------ slice selection


@dataclass(frozen=True)
class SliceSelectionPolicy:
    """Foreground slices drawn from round(N(m, s^2)) where m is the median
    foreground slice index; background slices drawn uniformly."""

    n_slices: int = 2
    background_count: int = 0
    spread: Literal["index_std", "range_quarter"] = "index_std"

    def __post_init__(self) -> None:
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.background_count < 0:
            raise ValueError("background_count must be >= 0")


def foreground_slice_indices(labels: np.ndarray) -> list[int]:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError("labels must be 3-D")
    return [z for z in range(labels.shape[0]) if labels[z].any()]


def slice_selection_params(labels: np.ndarray, spread: str = "index_std") -> tuple[float, float]:
    """(m, s) of the selection distribution for a 3-D label volume."""
    fg = foreground_slice_indices(labels)
    if not fg:
        raise ValueError("volume has no foreground slices")
    m = float(np.median(fg))
    if spread == "range_quarter":
        s = (max(fg) - min(fg)) / 4.0
    else:
        s = float(np.std(fg))
    return m, s


def _draw_fg_slice(
    fg_set: set[int],
    lo: int,
    hi: int,
    m: float,
    s: float,
    rng: np.random.Generator,
) -> int:
    x = int(round(m))
    for _ in range(10):
        x = int(round(rng.normal(m, s))) if s > 0 else int(round(m))
        if x in fg_set:
            return x
    x = min(max(x, lo), hi)
    if x in fg_set:
        return x
    return min(fg_set, key=lambda z: (abs(z - x), z))


def select_training_slices(
    labels: np.ndarray,
    policy: SliceSelectionPolicy,
    rng: np.random.Generator,
) -> tuple[list[int], list[int]]:
    """Pick unique annotated-slice indices: foreground ones normally around the
    median foreground slice, background ones uniformly over background slices."""
    fg = foreground_slice_indices(labels)
    if not fg:
        raise ValueError("volume has no foreground slices")
    if policy.n_slices > len(fg):
        raise ValueError(f"requested {policy.n_slices} foreground slices, only {len(fg)} exist")
    m, s = slice_selection_params(labels, policy.spread)
    fg_set = set(fg)
    lo, hi = min(fg), max(fg)

    chosen: list[int] = []
    guard = 0
    while len(chosen) < policy.n_slices:
        guard += 1
        if guard > 10000:
            for z in sorted(fg, key=lambda z: (abs(z - m), z)):
                if z not in chosen:
                    chosen.append(z)
                if len(chosen) == policy.n_slices:
                    break
            break
        x = _draw_fg_slice(fg_set, lo, hi, m, s, rng)
        if x not in chosen:
            chosen.append(x)

    bg = [z for z in range(np.asarray(labels).shape[0]) if z not in fg_set]
    if policy.background_count > len(bg):
        raise ValueError(f"requested {policy.background_count} background slices, only {len(bg)} exist")
    bg_chosen = sorted(int(z) for z in rng.choice(bg, size=policy.background_count, replace=False)) \
        if policy.background_count else []
    return sorted(chosen), bg_chosen


# ------------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomBody:
    geometry: Literal["ellipsoid", "cylinder", "two_lobe"]
    center: tuple[float, float, float]  # (z, y, x)
    radii: tuple[float, float, float]  # (rz, ry, rx)
    intensity: float = 1.0
    lobe_offset: float = 0.0  # x-distance between lobe centers (two_lobe only)
    labeled: bool = True  # False: distractor tissue present in the image but not the ground truth
    wobble_sigma: float = 0.0  # per-slice in-plane radius jitter (px), cylinders only

    def __post_init__(self) -> None:
        if self.geometry not in ("ellipsoid", "cylinder", "two_lobe"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int]  # (D, H, W)
    bodies: tuple[PhantomBody, ...]
    bg_intensity: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "bodies", tuple(self.bodies))
        if len(self.shape) != 3 or any(d < 1 for d in self.shape):
            raise ValueError(f"bad shape {self.shape}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _body_mask(body: PhantomBody, shape: tuple[int, int, int], seed: int = 0) -> np.ndarray:
    d, h, w = shape
    zz, yy, xx = np.ogrid[0:d, 0:h, 0:w]
    cz, cy, cx = body.center
    rz, ry, rx = body.radii
    if body.geometry == "ellipsoid":
        return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if body.geometry == "cylinder":
        inside_z = np.abs(zz - cz) <= rz
        if body.wobble_sigma > 0:
            # Slice-to-slice boundary variation, seeded: the mask stays the
            # exact analytic truth for the wobbled radii.
            rng = np.random.default_rng((seed, int(cy), int(cx)))
            deltas = rng.normal(0.0, body.wobble_sigma, size=d)
            ry_z = np.maximum(1.0, ry + deltas)[:, None, None]
            rx_z = np.maximum(1.0, rx + deltas)[:, None, None]
            inside_xy = ((yy - cy) / ry_z) ** 2 + ((xx - cx) / rx_z) ** 2 <= 1.0
        else:
            inside_xy = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        return inside_z & inside_xy
    off = body.lobe_offset / 2.0
    lobe1 = ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - (cx - off)) / rx) ** 2 <= 1.0
    lobe2 = ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - (cx + off)) / rx) ** 2 <= 1.0
    return lobe1 | lobe2


def _check_bounds(body: PhantomBody, shape: tuple[int, int, int]) -> None:
    extents = list(body.radii)
    if body.geometry == "two_lobe":
        extents[2] += abs(body.lobe_offset) / 2.0
    for c, r, dim in zip(body.center, extents, shape):
        if c - r < -0.5 or c + r > dim - 0.5:
            raise ValueError(f"body {body.geometry} at {body.center} exceeds volume bounds {shape}")


def perturb_label_boundary(mask: np.ndarray, shift: float) -> np.ndarray:
    """Uniformly move a 2-D mask's boundary outward (shift > 0) or inward by
    |shift| pixels, via the signed distance field. Simulates annotator
    variability for synthetic training labels."""
    from scipy import ndimage as ndi

    m = np.asarray(mask).astype(bool)
    if not m.any() or m.all():
        return m.astype(np.uint8)
    inside = ndi.distance_transform_edt(m)
    outside = ndi.distance_transform_edt(~m)
    signed = inside - outside  # positive inside
    return (signed > -shift).astype(np.uint8)


def make_phantom(cfg: PhantomConfig) -> tuple[Volume, np.ndarray]:
    """Deterministic synthetic volume plus its analytic ground-truth mask."""
    for body in cfg.bodies:
        _check_bounds(body, cfg.shape)
    vals = np.full(cfg.shape, cfg.bg_intensity, dtype=np.float64)
    mask = np.zeros(cfg.shape, dtype=np.uint8)
    for body in cfg.bodies:
        bm = _body_mask(body, cfg.shape, seed=cfg.seed)
        vals[bm] = body.intensity
        if body.labeled:
            mask[bm] = 1
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        vals = vals + rng.normal(0.0, cfg.noise_sigma, size=cfg.shape)
    return Volume.from_array(vals), mask


# ----------------------------------------------------------------- NIfTI codec


_DTYPE_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_nifti(path: str | Path, array: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> None:
    """Write a (D, H, W) array as single-file NIfTI-1 (gzipped when .gz)."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValueError("expected a 3-D array")
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    code = _DTYPE_CODES[arr.dtype]
    bitpix = arr.dtype.itemsize * 8
    nz, ny, nx = arr.shape
    dz, dy, dx = spacing

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, dx, dy, dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    struct.pack_into("<b", header, 123, 10)  # xyzt_units: mm + sec
    struct.pack_into("<4s", header, 344, b"n+1\x00")
    payload = bytes(header) + b"\x00" * 4 + np.ascontiguousarray(arr).tobytes()

    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a single-file NIfTI-1 volume back as ((D, H, W) array, (dz, dy, dx))."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise ValueError(f"truncated NIfTI file: {path}")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError(f"not a NIfTI-1 file: {path}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise ValueError(f"only 3-D volumes supported, got ndim={dim[0]} in {path}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    code = struct.unpack_from("<h", raw, 70)[0]
    if code not in _CODE_DTYPES:
        raise ValueError(f"unsupported NIfTI datatype code {code} in {path}")
    dtype = _CODE_DTYPES[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    count = nx * ny * nz
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    arr = data.reshape(nz, ny, nx).copy()
    return arr, (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))


# ----------------------------------------------------------- 2-D image formats


def _read_image_2d(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr.astype(np.float64)


def _write_image_2d(path: Path, array: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        lo, hi = float(arr.min()), float(arr.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        arr = ((arr - lo) * scale).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ------------------------------------------------------------------- manifest


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"manifest schema {manifest.get('schema')!r} != {MANIFEST_SCHEMA!r}")
    return manifest


def load_case(entry: dict, base_dir: str | Path = ".") -> tuple[Volume, np.ndarray | None]:
    """Load one manifest case: canonical orientation, float intensities, and a
    binarized mask (filtered to entry['label_ids'] when given)."""
    base = Path(base_dir)
    image_path = base / entry["image"]
    if not image_path.exists():
        raise FileNotFoundError(f"no such image: {image_path}")

    suffixes = "".join(image_path.suffixes)
    if suffixes.endswith((".nii", ".nii.gz")):
        arr, spacing = read_nifti(image_path)
        volume = Volume.from_array(arr.astype(np.float64), spacing)
    elif image_path.suffix.lower() in (".png", ".tif", ".tiff"):
        volume = Volume.from_array(_read_image_2d(image_path)[None])
    else:
        raise ValueError(f"unsupported image format: {image_path}")

    mask: np.ndarray | None = None
    if entry.get("mask"):
        mask_path = base / entry["mask"]
        if not mask_path.exists():
            raise FileNotFoundError(f"no such mask: {mask_path}")
        msuffixes = "".join(mask_path.suffixes)
        if msuffixes.endswith((".nii", ".nii.gz")):
            raw, _ = read_nifti(mask_path)
        else:
            raw = _read_image_2d(mask_path)[None]
        label_ids = entry.get("label_ids")
        mask = np.isin(raw, label_ids).astype(np.uint8) if label_ids else (raw > 0).astype(np.uint8)
        if mask.shape != (volume.num_slices,) + volume.slice_shape:
            raise ValueError(f"mask shape {mask.shape} does not match image "
                             f"{(volume.num_slices,) + volume.slice_shape}")
    return volume, mask


def save_phantom_case(
    out_dir: str | Path,
    case_id: str,
    volume: Volume,
    mask: np.ndarray,
    modality: str = "synthetic",
) -> dict:
    """Write image+mask NIfTI files and return the manifest entry for them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_name = f"{case_id}_img.nii.gz"
    mask_name = f"{case_id}_mask.nii.gz"
    write_nifti(out / img_name, volume.to_array().astype(np.float32), volume.spacing)
    write_nifti(out / mask_name, mask.astype(np.uint8), volume.spacing)
    return {
        "case_id": case_id,
        "image": img_name,
        "mask": mask_name,
        "modality": modality,
        "has_ground_truth": True,
    }


def write_manifest(path: str | Path, entries: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps({"schema": MANIFEST_SCHEMA, "cases": list(entries)}, indent=1))
