"""Stateful annotation service: sessions over uploaded volumes, synchronous
prompt-based prediction, background prompt-learning and auto-annotation jobs,
proposal review, and deterministic export/import.

Committed masks are only written by explicit commit/accept/import calls;
background jobs produce proposals and swap the session's prompt-encoder state
atomically (a racing predict sees the old state or the new one, never a mix).
"""

from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from pydantic import BaseModel

from . import storage
from .assist import (
    AssistModel,
    AssistTrainConfig,
    BoxJitterConfig,
    PointSamplingConfig,
    TrainPair,
    train_prompt_encoder,
)
from .backbone import PromptEncoderState, ToyConvBackbone
from .core import LabelMask, SliceImage, Volume, mask_to_rle, rle_to_mask
from .data import read_nifti
from .prompts import PromptSet
from .promptgen import PropagationConfig, classify_candidate_points, propagate_ensemble, train_point_classifier
from .sapnet import (
    EpisodeSplit,
    PostProcessConfig,
    SapTrainConfig,
    auto_segment,
    build_feature_extractor,
    train_sapnet,
)

EXPORT_SCHEMA = "promptmed-export/1"


@dataclass
class ServiceConfig:
    data_dir: str = "./promptmed-data"
    host: str = "127.0.0.1"
    port: int = 8777
    backbone_seed: int = 7
    threshold: float = 0.0

    @classmethod
    def from_file(cls, path: str | Path | None = None, env: dict | None = None) -> "ServiceConfig":
        """Load from a TOML or JSON file, then apply PROMPTMED_* env overrides."""
        cfg = cls()
        if path is not None:
            text = Path(path).read_bytes()
            if str(path).endswith(".json"):
                raw = json.loads(text)
            else:
                try:
                    import tomllib  # py311+
                except ModuleNotFoundError:
                    import tomli as tomllib
                raw = tomllib.loads(text.decode())
            for key, value in raw.items():
                if hasattr(cfg, key):
                    setattr(cfg, key, value)
                else:
                    raise ValueError(f"unknown config key {key!r}")
        env = os.environ if env is None else env
        if env.get("PROMPTMED_DATA_DIR"):
            cfg.data_dir = env["PROMPTMED_DATA_DIR"]
        if env.get("PROMPTMED_HOST"):
            cfg.host = env["PROMPTMED_HOST"]
        if env.get("PROMPTMED_PORT"):
            cfg.port = int(env["PROMPTMED_PORT"])
        if env.get("PROMPTMED_BACKBONE_SEED"):
            cfg.backbone_seed = int(env["PROMPTMED_BACKBONE_SEED"])
        return cfg


@dataclass
class JobTicket:
    job_id: str
    kind: str
    progress: float = 0.0
    state: str = "queued"  # queued | running | done | failed | cancelled
    error: str | None = None
    seconds: float = 0.0
    result: dict = field(default_factory=dict)
    _cancel: threading.Event = field(default_factory=threading.Event, repr=False)

    def to_jsonable(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "progress": self.progress,
            "state": self.state,
            "error": self.error,
            "seconds": self.seconds,
            "result": self.result,
        }


class Session:
    """In-memory session state; persisted as JSON + checkpoint files."""

    def __init__(self, session_id: str, volume: Volume, volume_hash: str) -> None:
        self.session_id = session_id
        self.volume = volume
        self.volume_hash = volume_hash
        self.committed: dict[int, dict] = {}  # idx -> {"rle", "version"}
        self.proposals: dict[int, dict] = {}  # idx -> {"rle", "provenance"}
        self.audit: list[dict] = []
        self.theta: PromptEncoderState | None = None
        self.status = "idle"
        self.active_job: JobTicket | None = None
        self.lock = threading.RLock()
        self._last_ts = 0.0

    def log_event(self, event: str, **payload: Any) -> None:
        with self.lock:
            ts = max(time.time(), self._last_ts + 1e-6)
            self._last_ts = ts
            self.audit.append({"ts": ts, "event": event, **payload})

    def committed_pairs(self) -> list[TrainPair]:
        pairs = []
        for idx in sorted(self.committed):
            mask = rle_to_mask(self.committed[idx]["rle"])
            pairs.append(TrainPair(self.volume.slices[idx], mask, case_id=f"slice{idx}"))
        return pairs


class AnnotationService:
    """Owns sessions, jobs, persistence, and the shared backbone."""

    def __init__(self, config: ServiceConfig) -> None:
        self.config = config
        self.backbone = ToyConvBackbone(seed=config.backbone_seed)
        self.data_dir = Path(config.data_dir)
        (self.data_dir / "volumes").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "sessions").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.jobs: dict[str, JobTicket] = {}
        self._registry_lock = threading.Lock()

    # ------------------------------------------------------------ persistence

    def _session_path(self, sid: str) -> Path:
        return self.data_dir / "sessions" / f"{sid}.json"

    def _ckpt_path(self, sid: str) -> Path:
        return self.data_dir / "checkpoints" / f"{sid}.ckpt"

    def _volume_path(self, vhash: str) -> Path:
        return self.data_dir / "volumes" / f"{vhash}.vol"

    def _store_volume(self, volume: Volume) -> str:
        vhash = volume.content_hash()
        path = self._volume_path(vhash)
        if not path.exists():
            storage.write_array_container(
                path,
                {"kind": "volume", "spacing": list(volume.spacing)},
                {"voxels": volume.to_array().astype(np.float32)},
            )
        return vhash

    def _load_volume(self, vhash: str) -> Volume:
        manifest, arrays = storage.read_array_container(self._volume_path(vhash))
        return Volume.from_array(arrays["voxels"].astype(np.float64), tuple(manifest["spacing"]))

    def persist_session(self, session: Session) -> None:
        with session.lock:
            record = {
                "session_id": session.session_id,
                "volume_hash": session.volume_hash,
                "committed": {str(k): v for k, v in session.committed.items()},
                "proposals": {str(k): v for k, v in session.proposals.items()},
                "audit": session.audit,
                "has_theta": session.theta is not None,
            }
            if session.theta is not None:
                self.backbone.save_weights(self._ckpt_path(session.session_id), session.theta)
            self._session_path(session.session_id).write_text(json.dumps(record))

    def get_session(self, sid: str) -> Session:
        with self._registry_lock:
            if sid in self.sessions:
                return self.sessions[sid]
        path = self._session_path(sid)
        if not path.exists():
            raise KeyError(sid)
        record = json.loads(path.read_text())
        volume = self._load_volume(record["volume_hash"])
        session = Session(sid, volume, record["volume_hash"])
        session.committed = {int(k): v for k, v in record.get("committed", {}).items()}
        session.proposals = {int(k): v for k, v in record.get("proposals", {}).items()}
        session.audit = record.get("audit", [])
        session._last_ts = max((e["ts"] for e in session.audit), default=0.0)
        if record.get("has_theta") and self._ckpt_path(sid).exists():
            session.theta = self.backbone.load_weights(self._ckpt_path(sid))
        with self._registry_lock:
            self.sessions.setdefault(sid, session)
            return self.sessions[sid]

    # --------------------------------------------------------------- sessions

    def create_session(self, payload: bytes, filename: str = "volume.npz") -> Session:
        volume = _parse_volume_upload(payload, filename)
        vhash = self._store_volume(volume)
        sid = uuid.uuid4().hex[:12]
        session = Session(sid, volume, vhash)
        session.log_event("session_created", volume_hash=vhash, filename=filename)
        with self._registry_lock:
            self.sessions[sid] = session
        self.persist_session(session)
        return session

    def assist_model(self, session: Session) -> AssistModel:
        with session.lock:
            state = session.theta
        if state is None:
            state = self.backbone.init_prompt_state(seed=0)
        return AssistModel(self.backbone, state, self.config.threshold)

    def predict(self, session: Session, slice_index: int, prompts: PromptSet,
                threshold: float | None = None) -> tuple[LabelMask, float]:
        if not 0 <= slice_index < session.volume.num_slices:
            raise ValueError(f"slice {slice_index} out of range")
        image = session.volume.slices[slice_index]
        prompts.validate_bounds(*image.shape)
        model = self.assist_model(session)
        emb = self.backbone.encode_image(image)
        pe = self.backbone.encode_prompts(prompts, model.state, emb.source_shape)
        pred = self.backbone.decode_mask(emb, pe)
        thr = self.config.threshold if threshold is None else threshold
        return pred.to_mask(thr), pred.quality

    def commit_mask(self, session: Session, slice_index: int, mask: LabelMask) -> int:
        if not 0 <= slice_index < session.volume.num_slices:
            raise ValueError(f"slice {slice_index} out of range")
        if mask.shape != session.volume.slice_shape:
            raise ValueError(f"mask shape {mask.shape} != slice shape {session.volume.slice_shape}")
        with session.lock:
            prev = session.committed.get(slice_index)
            version = (prev["version"] + 1) if prev else 1
            session.committed[slice_index] = {"rle": mask_to_rle(mask), "version": version}
        session.log_event("mask_committed", slice_index=slice_index, version=version)
        self.persist_session(session)
        return version

    # ------------------------------------------------------------------- jobs

    def _start_job(self, session: Session, kind: str, target) -> JobTicket:
        with session.lock:
            if session.active_job is not None and session.active_job.state in ("queued", "running"):
                raise RuntimeError("a job is already running for this session")
            ticket = JobTicket(job_id=uuid.uuid4().hex[:12], kind=kind)
            session.active_job = ticket
            session.status = "training" if "train" in kind else "auto_running"
        with self._registry_lock:
            self.jobs[ticket.job_id] = ticket

        def runner() -> None:
            started = time.perf_counter()
            ticket.state = "running"
            try:
                target(ticket)
                ticket.seconds = time.perf_counter() - started
                ticket.state = "cancelled" if ticket._cancel.is_set() else "done"
                ticket.progress = 1.0 if ticket.state == "done" else ticket.progress
            except Exception as exc:  # surfaced through the ticket
                ticket.seconds = time.perf_counter() - started
                ticket.error = str(exc)
                ticket.state = "failed"
            finally:
                with session.lock:
                    session.status = "idle"
            self.persist_session(session)

        threading.Thread(target=runner, daemon=True).start()
        return ticket

    def start_assist_training(self, session: Session, cfg: AssistTrainConfig) -> JobTicket:
        pairs = session.committed_pairs()
        if not pairs:
            raise ValueError("no committed slices to train from")

        def target(ticket: JobTicket) -> None:
            def on_progress(frac: float) -> None:
                ticket.progress = frac

            state, log = train_prompt_encoder(
                pairs, self.backbone, cfg,
                progress=on_progress, should_stop=ticket._cancel.is_set,
            )
            if ticket._cancel.is_set():
                return  # cancelled: leave the session state untouched
            with session.lock:
                session.theta = state  # atomic reference swap
            session.log_event("assist_trained", epochs=cfg.epochs,
                              final_loss=log.losses[-1], seconds=log.total_seconds)
            ticket.result = {"final_loss": log.losses[-1], "epochs": len(log.epochs),
                             "train_seconds": log.total_seconds}

        session.log_event("assist_training_started", mode=cfg.prompt_mode)
        return self._start_job(session, "assist_train", target)

    def start_auto(self, session: Session, strategy: str, options: dict | None = None) -> JobTicket:
        options = options or {}
        pairs = session.committed_pairs()
        if strategy not in ("propagate", "classify", "sapnet"):
            raise ValueError(f"unknown strategy {strategy!r}")
        if strategy == "sapnet" and len(pairs) < 2:
            raise ValueError("sapnet strategy needs at least 2 committed slices")
        if strategy in ("propagate", "classify") and not pairs:
            raise ValueError(f"{strategy} strategy needs at least 1 committed slice")

        def target(ticket: JobTicket) -> None:
            model = self.assist_model(session)
            committed_idx = set(session.committed)
            proposals: dict[int, dict] = {}
            if strategy == "propagate":
                cfg = PropagationConfig(
                    lambda_=float(options.get("lambda_", 1.0)),
                    n_points=int(options.get("n_points", 10)),
                    max_slices=int(options.get("max_slices", session.volume.num_slices)),
                    seed=int(options.get("seed", 0)),
                )
                seeds = [(idx, rle_to_mask(session.committed[idx]["rle"])) for idx in sorted(committed_idx)]
                combined, members = propagate_ensemble(session.volume, seeds, cfg, model)
                ticket.progress = 0.9
                for z in range(session.volume.num_slices):
                    if z in committed_idx or not combined[z].any():
                        continue
                    proposals[z] = {
                        "rle": mask_to_rle(LabelMask(combined[z])),
                        "provenance": {"generator": "propagate", "seeds": [s for s, _ in seeds]},
                    }
            elif strategy == "classify":
                classifier = train_point_classifier(pairs, self.backbone,
                                                    seed=int(options.get("seed", 0)))
                stride = int(options.get("grid_stride", 8))
                total = session.volume.num_slices
                for z in range(total):
                    if ticket._cancel.is_set():
                        return
                    if z in committed_idx:
                        continue
                    image = session.volume.slices[z]
                    prompts = classify_candidate_points(image, classifier, self.backbone,
                                                        grid_stride=stride,
                                                        n_per_class=int(options.get("n_per_class", 5)))
                    mask = model.segment(image, prompts)
                    if mask.is_empty():
                        continue
                    proposals[z] = {
                        "rle": mask_to_rle(mask),
                        "provenance": {"generator": "classify", "prompts": prompts.to_jsonable(),
                                       "classifier_accuracy": classifier.train_accuracy},
                    }
                    ticket.progress = (z + 1) / total
            else:
                sap_cfg = SapTrainConfig(
                    epochs=int(options.get("epochs", 200)),
                    lr=float(options.get("lr", 1e-2)),
                    beta=float(options.get("beta", 1.0)),
                    d=int(options.get("d", 32)),
                    seed=int(options.get("seed", 0)),
                    use_position=bool(options.get("use_position", True)),
                )
                fx0 = build_feature_extractor(self.backbone, sap_cfg,
                                              volumetric=bool(options.get("volumetric", True)))
                half = max(1, len(pairs) // 2 + len(pairs) % 2)
                split = EpisodeSplit(support=tuple(pairs[:half]), query=tuple(pairs[half:]))
                fx, _ = train_sapnet(split, fx0, sap_cfg,
                                     progress=lambda f: setattr(ticket, "progress", 0.5 * f),
                                     should_stop=ticket._cancel.is_set)
                if ticket._cancel.is_set():
                    return
                post = PostProcessConfig(
                    k_components=int(options.get("k_components", 1)),
                    n_points=int(options.get("n_points", 3)),
                    prompt_type=options.get("prompt_type", "points"),
                )
                queries = [session.volume.slices[z] for z in range(session.volume.num_slices)
                           if z not in committed_idx]
                results = auto_segment(queries, pairs, fx, model, post, alpha=sap_cfg.alpha)
                ticket.progress = 0.95
                for res in results:
                    if res.mask.is_empty():
                        continue
                    proposals[res.slice_index] = {"rle": mask_to_rle(res.mask),
                                                  "provenance": res.provenance}
            if ticket._cancel.is_set():
                return
            with session.lock:
                session.proposals = proposals
            session.log_event("auto_finished", strategy=strategy, proposals=len(proposals))
            ticket.result = {"proposals": len(proposals), "strategy": strategy}

        session.log_event("auto_started", strategy=strategy)
        return self._start_job(session, f"auto_{strategy}", target)

    def accept_proposal(self, session: Session, slice_index: int) -> int:
        with session.lock:
            if slice_index not in session.proposals:
                raise KeyError(slice_index)
            proposal = session.proposals.pop(slice_index)
        version = self.commit_mask(session, slice_index, rle_to_mask(proposal["rle"]))
        session.log_event("proposal_accepted", slice_index=slice_index, version=version)
        self.persist_session(session)
        return version

    def reject_proposal(self, session: Session, slice_index: int) -> None:
        with session.lock:
            if slice_index not in session.proposals:
                raise KeyError(slice_index)
            session.proposals.pop(slice_index)
        session.log_event("proposal_rejected", slice_index=slice_index)
        self.persist_session(session)

    # ---------------------------------------------------------- export/import

    def export_session(self, session: Session, fmt: str) -> tuple[bytes, str]:
        if fmt not in ("npz", "png"):
            raise LookupError(f"unsupported export format {fmt!r}")
        with session.lock:
            committed = dict(session.committed)
            audit = list(session.audit)
        session.log_event("exported", fmt=fmt, slices=len(committed))
        self.persist_session(session)
        if fmt == "npz":
            import zipfile

            # The mask payload is a fully deterministic container; the audit log
            # rides as a separate sidecar member (it records export/import
            # events, so it cannot itself be part of the byte-stable payload).
            manifest = {
                "schema": EXPORT_SCHEMA,
                "volume_hash": session.volume_hash,
                "shape": [session.volume.num_slices, *session.volume.slice_shape],
                "versions": {str(k): committed[k]["version"] for k in sorted(committed)},
            }
            arrays = {
                f"mask_{idx:05d}": rle_to_mask(committed[idx]["rle"]).pixels
                for idx in sorted(committed)
            }
            inner = io.BytesIO()
            storage.write_array_container(inner, manifest, arrays)
            buf = io.BytesIO()
            with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
                zf.writestr(zipfile.ZipInfo("masks.npz", date_time=(1980, 1, 1, 0, 0, 0)),
                            inner.getvalue())
                zf.writestr(zipfile.ZipInfo("audit.json", date_time=(1980, 1, 1, 0, 0, 0)),
                            json.dumps(audit))
            return buf.getvalue(), "application/zip"
        # png: zip of per-slice PNGs plus the audit sidecar
        import zipfile
        from PIL import Image

        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            for idx in sorted(committed):
                png_io = io.BytesIO()
                arr = rle_to_mask(committed[idx]["rle"]).pixels * 255
                Image.fromarray(arr).save(png_io, format="PNG")
                zf.writestr(zipfile.ZipInfo(f"mask_{idx:05d}.png", date_time=(1980, 1, 1, 0, 0, 0)),
                            png_io.getvalue())
            zf.writestr(zipfile.ZipInfo("audit.json", date_time=(1980, 1, 1, 0, 0, 0)),
                        json.dumps(audit))
        return buf.getvalue(), "application/zip"

    def import_masks(self, session: Session, payload: bytes) -> int:
        import zipfile

        # Accept either the outer export zip (masks.npz + audit sidecar) or the
        # bare mask container.
        try:
            with zipfile.ZipFile(io.BytesIO(payload)) as zf:
                if "masks.npz" in zf.namelist():
                    payload = zf.read("masks.npz")
        except zipfile.BadZipFile:
            raise ValueError("not a zip archive")
        manifest, arrays = storage.read_array_container(payload)
        if manifest.get("schema") != EXPORT_SCHEMA:
            raise ValueError(f"not a {EXPORT_SCHEMA} archive")
        expected = [session.volume.num_slices, *session.volume.slice_shape]
        if manifest.get("shape") != expected:
            raise ValueError(f"archive shape {manifest.get('shape')} != session {expected}")
        versions = manifest.get("versions", {})
        with session.lock:
            for name in sorted(arrays):
                idx = int(name.split("_")[1])
                mask = LabelMask(arrays[name])
                session.committed[idx] = {
                    "rle": mask_to_rle(mask),
                    "version": int(versions.get(str(idx), 1)),
                }
        session.log_event("imported", slices=len(arrays))
        self.persist_session(session)
        return len(arrays)


def _parse_volume_upload(payload: bytes, filename: str) -> Volume:
    name = filename.lower()
    try:
        if name.endswith((".nii", ".nii.gz")):
            import gzip as _gzip
            import tempfile

            with tempfile.NamedTemporaryFile(suffix=".nii.gz" if name.endswith(".gz") else ".nii",
                                             delete=False) as tmp:
                tmp.write(payload)
                tmp_path = tmp.name
            try:
                arr, spacing = read_nifti(tmp_path)
            finally:
                os.unlink(tmp_path)
            return Volume.from_array(arr.astype(np.float64), spacing)
        if name.endswith((".vol", ".npz", ".zip")):
            manifest, arrays = storage.read_array_container(payload)
            spacing = tuple(manifest.get("spacing", (1.0, 1.0, 1.0)))
            return Volume.from_array(arrays["voxels"].astype(np.float64), spacing)
        raise ValueError(f"unsupported volume format: {filename}")
    except (KeyError, ValueError, OSError, EOFError) as exc:
        raise ValueError(f"could not parse volume upload {filename!r}: {exc}") from exc
    except Exception as exc:  # zipfile.BadZipFile and friends
        raise ValueError(f"could not parse volume upload {filename!r}: {exc}") from exc


def _slice_png_b64(image: SliceImage) -> str:
    from PIL import Image

    px = image.pixels
    lo, hi = float(px.min()), float(px.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    arr = ((px - lo) * scale).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


class PredictBody(BaseModel):
    slice_index: int
    prompts: list[dict] = []
    threshold: float | None = None


class CommitBody(BaseModel):
    mask: dict


class TrainBody(BaseModel):
    prompt_mode: str = "points"
    epochs: int = 150
    lr: float = 1e-2
    loss: str = "dice_plus_ce"
    seed: int = 0
    n_min: int = 1
    n_max: int = 11
    scheme: str = "uniform"
    d_in: int = 3
    d_out: int = 3


class AutoBody(BaseModel):
    strategy: str
    options: dict = {}


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    """Build the FastAPI application around one AnnotationService."""
    service = AnnotationService(config or ServiceConfig())
    app = FastAPI(title="promptmed annotation service", version="1")
    app.state.service = service

    def session_or_404(sid: str) -> Session:
        try:
            return service.get_session(sid)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")

    @app.get("/api/v1/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/api/v1/sessions", status_code=201)
    async def create_session(request: Request) -> dict:
        filename = request.headers.get("x-filename", "volume.vol")
        payload = await request.body()
        if not payload:
            raise HTTPException(status_code=400, detail="empty upload")
        try:
            session = service.create_session(payload, filename)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {
            "session_id": session.session_id,
            "volume_hash": session.volume_hash,
            "num_slices": session.volume.num_slices,
            "height": session.volume.slice_shape[0],
            "width": session.volume.slice_shape[1],
        }

    @app.get("/api/v1/sessions/{sid}")
    def session_info(sid: str) -> dict:
        session = session_or_404(sid)
        with session.lock:
            return {
                "session_id": session.session_id,
                "volume_hash": session.volume_hash,
                "num_slices": session.volume.num_slices,
                "height": session.volume.slice_shape[0],
                "width": session.volume.slice_shape[1],
                "status": session.status,
                "committed": {str(k): v["version"] for k, v in session.committed.items()},
                "proposals": sorted(session.proposals),
                "has_trained_state": session.theta is not None,
            }

    @app.get("/api/v1/sessions/{sid}/slices/{idx}")
    def get_slice(sid: str, idx: int) -> dict:
        session = session_or_404(sid)
        if not 0 <= idx < session.volume.num_slices:
            raise HTTPException(status_code=404, detail=f"slice {idx} out of range")
        image = session.volume.slices[idx]
        return {
            "slice_index": idx,
            "height": image.height,
            "width": image.width,
            "png_b64": _slice_png_b64(image),
        }

    @app.post("/api/v1/sessions/{sid}/predict")
    def predict(sid: str, body: PredictBody) -> dict:
        session = session_or_404(sid)
        try:
            prompts = PromptSet.from_jsonable(body.prompts)
            mask, quality = service.predict(session, body.slice_index, prompts, body.threshold)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"mask": mask_to_rle(mask), "quality": quality}

    @app.post("/api/v1/sessions/{sid}/slices/{idx}/mask")
    def commit(sid: str, idx: int, body: CommitBody) -> dict:
        session = session_or_404(sid)
        try:
            mask = rle_to_mask(body.mask)
            version = service.commit_mask(session, idx, mask)
        except (ValueError, KeyError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"slice_index": idx, "version": version}

    @app.get("/api/v1/sessions/{sid}/slices/{idx}/mask")
    def get_committed(sid: str, idx: int) -> dict:
        session = session_or_404(sid)
        with session.lock:
            rec = session.committed.get(idx)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"no committed mask for slice {idx}")
        return {"slice_index": idx, "mask": rec["rle"], "version": rec["version"]}

    @app.post("/api/v1/sessions/{sid}/train", status_code=202)
    def train(sid: str, body: TrainBody) -> dict:
        session = session_or_404(sid)
        try:
            cfg = AssistTrainConfig(
                prompt_mode=body.prompt_mode,  # type: ignore[arg-type]
                epochs=body.epochs,
                lr=body.lr,
                loss=body.loss,  # type: ignore[arg-type]
                seed=body.seed,
                point_cfg=PointSamplingConfig(scheme=body.scheme, n_min=body.n_min, n_max=body.n_max),  # type: ignore[arg-type]
                box_cfg=BoxJitterConfig(d_in=body.d_in, d_out=body.d_out),
            )
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            ticket = service.start_assist_training(session, cfg)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"job": ticket.to_jsonable()}

    @app.post("/api/v1/sessions/{sid}/auto", status_code=202)
    def auto(sid: str, body: AutoBody) -> dict:
        session = session_or_404(sid)
        try:
            ticket = service.start_auto(session, body.strategy, body.options)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"job": ticket.to_jsonable()}

    @app.get("/api/v1/jobs/{jid}")
    def job(jid: str) -> dict:
        ticket = service.jobs.get(jid)
        if ticket is None:
            raise HTTPException(status_code=404, detail=f"unknown job {jid!r}")
        return ticket.to_jsonable()

    @app.post("/api/v1/jobs/{jid}/cancel")
    def cancel(jid: str) -> dict:
        ticket = service.jobs.get(jid)
        if ticket is None:
            raise HTTPException(status_code=404, detail=f"unknown job {jid!r}")
        ticket._cancel.set()
        return ticket.to_jsonable()

    @app.get("/api/v1/sessions/{sid}/proposals")
    def proposals(sid: str) -> dict:
        session = session_or_404(sid)
        with session.lock:
            return {
                "proposals": [
                    {"slice_index": idx, "mask": p["rle"], "provenance": p["provenance"]}
                    for idx, p in sorted(session.proposals.items())
                ]
            }

    @app.post("/api/v1/sessions/{sid}/proposals/{idx}/accept")
    def accept(sid: str, idx: int) -> dict:
        session = session_or_404(sid)
        try:
            version = service.accept_proposal(session, idx)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no proposal for slice {idx}")
        return {"slice_index": idx, "version": version}

    @app.post("/api/v1/sessions/{sid}/proposals/{idx}/reject")
    def reject(sid: str, idx: int) -> dict:
        session = session_or_404(sid)
        try:
            service.reject_proposal(session, idx)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no proposal for slice {idx}")
        return {"slice_index": idx, "rejected": True}

    @app.get("/api/v1/sessions/{sid}/export")
    def export(sid: str, format: str = "npz") -> Response:
        session = session_or_404(sid)
        try:
            payload, media = service.export_session(session, format)
        except LookupError as exc:
            raise HTTPException(status_code=415, detail=str(exc))
        return Response(content=payload, media_type=media,
                        headers={"content-disposition": f"attachment; filename={sid}.{format}.zip"})

    @app.post("/api/v1/sessions/{sid}/import")
    async def import_masks(sid: str, request: Request) -> dict:
        session = session_or_404(sid)
        payload = await request.body()
        try:
            count = service.import_masks(session, payload)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"imported": count}

    @app.get("/api/v1/sessions/{sid}/audit")
    def audit(sid: str) -> dict:
        session = session_or_404(sid)
        with session.lock:
            return {"events": list(session.audit)}

    return app
