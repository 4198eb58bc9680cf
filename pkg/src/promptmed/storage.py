"""Named-array containers and model checkpoints.

Containers are plain zip files holding ``manifest.json`` plus one ``.npy``
member per array. Members are written in sorted order with a fixed timestamp
so identical content always produces identical bytes (content-addressing and
round-trip tests rely on this).
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

CKPT_FORMAT = "promptmed-ckpt/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_array_container(
    target: str | Path | io.BytesIO,
    manifest: dict,
    arrays: Mapping[str, np.ndarray],
) -> None:
    """Write a deterministic zip with manifest.json and arrays/<name>.npy members."""
    buf = target if isinstance(target, io.BytesIO) else None
    if buf is None:
        buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for name in sorted(arrays):
            arr_io = io.BytesIO()
            np.save(arr_io, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH)
            zf.writestr(info, arr_io.getvalue())
    if not isinstance(target, io.BytesIO):
        Path(target).write_bytes(buf.getvalue())


def read_array_container(source: str | Path | bytes | io.BytesIO) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, io.BytesIO):
        data = source.getvalue()
    else:
        data = source
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(io.BytesIO(data)) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                arrays[name[len("arrays/") : -len(".npy")]] = arr
    return manifest, arrays


def save_checkpoint(
    path: str | Path,
    backbone_name: str,
    descriptor: dict,
    theta: Mapping[str, np.ndarray],
    created: str | None = None,
    sections: Mapping[str, tuple[dict, Mapping[str, np.ndarray]]] | None = None,
) -> None:
    """Save prompt-encoder parameters (and optional extra sections) to a checkpoint.

    `sections` maps a section tag (e.g. "sapnet/1") to (metadata, arrays); the
    arrays are stored under "<tag>/<name>".
    """
    manifest: dict = {
        "format": CKPT_FORMAT,
        "backbone": backbone_name,
        "descriptor": descriptor,
        "theta": sorted(theta),
        "sections": {},
    }
    if created is not None:
        manifest["created"] = created
    arrays: dict[str, np.ndarray] = {f"theta/{k}": v for k, v in theta.items()}
    for tag, (meta, sec_arrays) in (sections or {}).items():
        manifest["sections"][tag] = {"meta": meta, "arrays": sorted(sec_arrays)}
        for k, v in sec_arrays.items():
            arrays[f"{tag}/{k}"] = v
    write_array_container(path, manifest, arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, tuple[dict, dict[str, np.ndarray]]]]:
    """Load a checkpoint; returns (manifest, theta arrays, sections)."""
    manifest, arrays = read_array_container(path)
    if manifest.get("format") != CKPT_FORMAT:
        raise ValueError(f"not a {CKPT_FORMAT} checkpoint: {manifest.get('format')!r}")
    theta = {k[len("theta/") :]: v for k, v in arrays.items() if k.startswith("theta/")}
    sections: dict[str, tuple[dict, dict[str, np.ndarray]]] = {}
    for tag, info in manifest.get("sections", {}).items():
        prefix = f"{tag}/"
        sec = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        sections[tag] = (info.get("meta", {}), sec)
    return manifest, theta, sections
