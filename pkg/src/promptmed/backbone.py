"""Promptable segmentation backbone contract and a desk-scale implementation.

The backbone splits into three parts: a frozen image encoder, a frozen mask
decoder, and a prompt encoder whose parameters are the only trainable state.
``ToyConvBackbone`` is a small deterministic convolutional instance of that
contract, precise enough for gradient checking (float64 throughout) and fast
enough to train on CPU in seconds. External pretrained backbones plug in by
implementing the same three operations plus the weight-loading hook.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as tF

from .core import LabelMask, SliceImage
from .prompts import Box, MaskPrompt, Point, PromptSet
from . import storage

_DTYPE = torch.float64


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    embed_dim: int
    input_size: tuple[int, int]
    trainable_scope: str = "prompt_encoder_only"

    def __post_init__(self) -> None:
        if self.trainable_scope != "prompt_encoder_only":
            raise ValueError("only prompt_encoder_only backbones are supported")

    def to_jsonable(self) -> dict:
        return {
            "name": self.name,
            "embed_dim": self.embed_dim,
            "input_size": list(self.input_size),
            "trainable_scope": self.trainable_scope,
        }


@dataclass(frozen=True)
class ImageEmbedding:
    """Low-resolution feature grid for one image."""

    features: np.ndarray  # (C, He, We)
    source_shape: tuple[int, int]
    scale: float  # source pixels per embedding cell (x axis)

    def __post_init__(self) -> None:
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3 or f.shape[1] < 1 or f.shape[2] < 1:
            raise ValueError(f"embedding must be (C, He, We), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("embedding values must be finite")
        f = np.ascontiguousarray(f)
        f.flags.writeable = False
        object.__setattr__(self, "features", f)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


@dataclass(frozen=True)
class PromptEncoderState:
    """The trainable parameters of the prompt encoder (named flat arrays)."""

    parameters: "OrderedDict[str, np.ndarray]"
    prompt_types_supported: frozenset[str] = frozenset({"point", "box", "mask"})

    def __post_init__(self) -> None:
        params: OrderedDict[str, np.ndarray] = OrderedDict()
        seen = set()
        for name, arr in self.parameters.items():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            a = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name!r} has non-finite values")
            a = np.ascontiguousarray(a)
            a.flags.writeable = False
            params[name] = a
        object.__setattr__(self, "parameters", params)

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.parameters):
            h.update(name.encode())
            h.update(self.parameters[name].tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PromptEmbedding:
    """Encoded prompts: one sparse token per point, two per box, plus the
    always-present bias token; mask prompts land in the dense grid."""

    sparse: np.ndarray  # (n_tokens, C)
    bias_token: np.ndarray  # (C,)
    dense: np.ndarray | None  # (C, He, We) or None
    source_shape: tuple[int, int]


@dataclass(frozen=True)
class MaskPrediction:
    logits: np.ndarray  # (H, W) at source resolution
    quality: float

    def __post_init__(self) -> None:
        lg = np.asarray(self.logits, dtype=np.float64)
        if not np.all(np.isfinite(lg)):
            raise ValueError("logits must be finite")
        if not (0.0 <= self.quality <= 1.0):
            raise ValueError("quality must lie in [0, 1]")
        lg = np.ascontiguousarray(lg)
        lg.flags.writeable = False
        object.__setattr__(self, "logits", lg)

    def to_mask(self, threshold: float = 0.0) -> LabelMask:
        return LabelMask((self.logits > threshold).astype(np.uint8))


@runtime_checkable
class PromptableBackbone(Protocol):
    """Adapter contract for any promptable backbone (three ops + weight hook)."""

    descriptor: BackboneDescriptor

    def encode_image(self, image: SliceImage) -> ImageEmbedding: ...

    def encode_prompts(self, prompts: PromptSet, state: PromptEncoderState,
                       source_shape: tuple[int, int]) -> PromptEmbedding: ...

    def decode_mask(self, embedding: ImageEmbedding, prompt_embedding: PromptEmbedding) -> MaskPrediction: ...

    def init_prompt_state(self, seed: int = 0) -> PromptEncoderState: ...

    def load_weights(self, path: str | Path) -> PromptEncoderState: ...


def _randn(g: torch.Generator, *shape: int, std: float = 1.0) -> torch.Tensor:
    return torch.randn(shape, generator=g, dtype=_DTYPE) * std


def _tensor_dict_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().numpy().tobytes())
    return h.hexdigest()


class ToyConvBackbone:
    """Deterministic stride-4 convolutional backbone with a 16x16, C=32 grid.

    The encoder and decoder weights are drawn once from a seeded generator and
    never change; prompt tokens are built from shared Fourier position codes,
    which also ride on the decoder's key grid so trained tokens can localize.
    """

    GRID = 16
    CHANNELS = 32

    def __init__(self, seed: int = 7) -> None:
        self.descriptor = BackboneDescriptor(
            name=f"toy-conv{self.CHANNELS}",
            embed_dim=self.CHANNELS,
            input_size=(64, 64),
        )
        g = torch.Generator().manual_seed(seed)
        c = self.CHANNELS
        self._enc = {
            "w1": _randn(g, 16, 1, 3, 3, std=1.0 / 3.0),
            "b1": torch.zeros(16, dtype=_DTYPE),
            "w2": _randn(g, c, 16, 3, 3, std=1.0 / 12.0),
            "b2": torch.zeros(c, dtype=_DTYPE),
            "w3": _randn(g, c, c, 3, 3, std=1.0 / 17.0),
            "b3": torch.zeros(c, dtype=_DTYPE),
        }
        # Shared Fourier position codes (frequency matrix used by both the
        # prompt tokens and the decoder key grid).
        self._pe_b = _randn(g, 2, c // 2, std=1.0)
        self._dec = {
            "wk": _randn(g, c, c, std=1.0 / np.sqrt(c)),
            "bk": torch.zeros(c, dtype=_DTYPE),
            "u": _randn(g, c, c, std=1.0 / np.sqrt(c)),
            "v": _randn(g, c, c, std=1.0 / np.sqrt(c)),
            "r": _randn(g, c, std=1.0 / np.sqrt(c)),
        }
        self._cache: OrderedDict[str, ImageEmbedding] = OrderedDict()
        self._cache_lock = threading.Lock()
        self._cache_cap = 256

    # ------------------------------------------------------------------ state

    def init_prompt_state(self, seed: int = 0) -> PromptEncoderState:
        rng = np.random.default_rng(seed)
        c = self.CHANNELS
        std = 0.2

        def n(*shape: int) -> np.ndarray:
            return rng.normal(0.0, std, size=shape)

        # box_mix, bias_token and mask_proj start at zero: boxes begin as plain
        # corner tokens, an empty prompt set decodes to background, and mask
        # prompts are inert until trained.
        params = OrderedDict(
            mlp_w1=n(c, c),
            mlp_b1=n(c),
            mlp_w2=n(c, c),
            mlp_b2=n(c),
            type_fg=n(c),
            type_bg=n(c),
            type_box_tl=n(c),
            type_box_br=n(c),
            box_mix=np.zeros((c, c)),
            bias_token=np.zeros(c),
            mask_proj=np.zeros(c),
        )
        return PromptEncoderState(parameters=params)

    def theta_tensors(self, state: PromptEncoderState, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        out = {}
        for name, arr in state.parameters.items():
            t = torch.from_numpy(np.array(arr, dtype=np.float64))
            t.requires_grad_(requires_grad)
            out[name] = t
        return out

    @staticmethod
    def state_from_tensors(tensors: Mapping[str, torch.Tensor]) -> PromptEncoderState:
        params = OrderedDict((k, t.detach().numpy().copy()) for k, t in tensors.items())
        return PromptEncoderState(parameters=params)

    def load_weights(self, path: str | Path) -> PromptEncoderState:
        manifest, theta, _ = storage.load_checkpoint(path)
        if manifest["backbone"] != self.descriptor.name:
            raise ValueError(f"checkpoint is for backbone {manifest['backbone']!r}, "
                             f"this is {self.descriptor.name!r}")
        return PromptEncoderState(parameters=OrderedDict(sorted(theta.items())))

    def save_weights(self, path: str | Path, state: PromptEncoderState, created: str | None = None,
                     sections=None) -> None:
        storage.save_checkpoint(
            path,
            backbone_name=self.descriptor.name,
            descriptor=self.descriptor.to_jsonable(),
            theta=dict(state.parameters),
            created=created,
            sections=sections,
        )

    # ------------------------------------------------------------- frozen side

    def encoder_hash(self) -> str:
        return _tensor_dict_hash(self._enc)

    def decoder_hash(self) -> str:
        return _tensor_dict_hash({**self._dec, "pe_b": self._pe_b})

    def _encode_tensor(self, pixels: np.ndarray) -> torch.Tensor:
        x = torch.from_numpy(np.array(pixels, dtype=np.float64))
        mean = x.mean()
        std = x.std()
        x = (x - mean) / torch.clamp(std, min=1e-6)
        x = x[None, None]
        if tuple(x.shape[-2:]) != self.descriptor.input_size:
            x = tF.interpolate(x, size=self.descriptor.input_size, mode="bilinear", align_corners=False)
        e = self._enc
        with torch.no_grad():
            h = torch.tanh(tF.conv2d(x, e["w1"], e["b1"], stride=2, padding=1))
            h = torch.tanh(tF.conv2d(h, e["w2"], e["b2"], stride=2, padding=1))
            h = torch.tanh(tF.conv2d(h, e["w3"], e["b3"], stride=1, padding=1))
        return h[0]  # (C, 16, 16)

    def encode_image(self, image: SliceImage | np.ndarray) -> ImageEmbedding:
        """Embed an image on the frozen encoder; results are cached by content hash."""
        if not isinstance(image, SliceImage):
            image = SliceImage(np.asarray(image))
        key = image.content_hash()
        with self._cache_lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        feats = self._encode_tensor(image.pixels).numpy()
        emb = ImageEmbedding(
            features=feats,
            source_shape=image.shape,
            scale=image.width / feats.shape[2],
        )
        with self._cache_lock:
            self._cache[key] = emb
            while len(self._cache) > self._cache_cap:
                self._cache.popitem(last=False)
        return emb

    def _position_code(self, coords: torch.Tensor) -> torch.Tensor:
        """Fourier features of normalized (x, y) in [0,1]^2; output dim C."""
        proj = 2.0 * np.pi * coords @ self._pe_b
        return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)

    def _grid_position_codes(self, grid_h: int, grid_w: int) -> torch.Tensor:
        ys = (torch.arange(grid_h, dtype=_DTYPE) + 0.5) / grid_h
        xs = (torch.arange(grid_w, dtype=_DTYPE) + 0.5) / grid_w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([gx, gy], dim=-1).reshape(-1, 2)
        return self._position_code(coords).reshape(grid_h, grid_w, -1).permute(2, 0, 1)

    # ------------------------------------------------------ differentiable path

    def prompt_tokens_t(
        self,
        prompts: PromptSet,
        theta: Mapping[str, torch.Tensor],
        source_shape: tuple[int, int],
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        """Return (sparse tokens (n,C), bias token (C,), dense grid or None).

        Differentiable with respect to every theta tensor.
        """
        h, w = source_shape
        prompts.validate_bounds(h, w)

        def mlp(u: torch.Tensor) -> torch.Tensor:
            z = torch.tanh(u @ theta["mlp_w1"].T + theta["mlp_b1"])
            return z @ theta["mlp_w2"].T + theta["mlp_b2"]

        coords: list[tuple[float, float]] = []
        types: list[torch.Tensor] = []
        box_pairs: list[tuple[int, int]] = []
        for p in prompts:
            if isinstance(p, Point):
                coords.append(((p.x + 0.5) / w, (p.y + 0.5) / h))
                types.append(theta["type_fg"] if p.label == 1 else theta["type_bg"])
            elif isinstance(p, Box):
                box_pairs.append((len(coords), len(coords) + 1))
                coords.append((p.x1 / w, p.y1 / h))
                types.append(theta["type_box_tl"])
                coords.append((p.x2 / w, p.y2 / h))
                types.append(theta["type_box_br"])
        if coords:
            cs = torch.tensor(coords, dtype=_DTYPE)
            sparse = mlp(self._position_code(cs)) + torch.stack(types)
            if box_pairs:
                # Mix each box's corner pair so either token carries the full
                # extent; points are untouched and the token count is unchanged.
                mixed = sparse
                for i, j in box_pairs:
                    mixed = mixed.clone()
                    mixed[i] = sparse[i] + sparse[j] @ theta["box_mix"].T
                    mixed[j] = sparse[j] + sparse[i] @ theta["box_mix"].T
                sparse = mixed
        else:
            sparse = torch.zeros((0, self.CHANNELS), dtype=_DTYPE)

        dense: torch.Tensor | None = None
        for mp in prompts.mask_prompts:
            m = torch.from_numpy(mp.mask.pixels.astype(np.float64))[None, None]
            pooled = tF.adaptive_avg_pool2d(m, (self.GRID, self.GRID))[0, 0]
            contrib = theta["mask_proj"][:, None, None] * pooled[None]
            dense = contrib if dense is None else dense + contrib
        return sparse, theta["bias_token"], dense

    def logits_t(
        self,
        embedding: torch.Tensor,
        sparse: torch.Tensor,
        bias_token: torch.Tensor,
        dense: torch.Tensor | None,
        source_shape: tuple[int, int],
    ) -> torch.Tensor:
        """Frozen decoder: gated signed token contributions, upsampled to source."""
        c = self.CHANNELS
        feats = embedding if dense is None else embedding + dense
        grid_h, grid_w = feats.shape[1], feats.shape[2]
        k = torch.einsum("oc,chw->ohw", self._dec["wk"], feats) + self._dec["bk"][:, None, None]
        k = k + self._grid_position_codes(grid_h, grid_w)
        tokens = torch.cat([bias_token[None], sparse], dim=0)  # (n+1, C)
        keys = tokens @ self._dec["u"].T  # (n+1, C)
        gates = torch.sigmoid(torch.einsum("nc,chw->nhw", keys, k) / np.sqrt(c))
        contribs = (tokens @ self._dec["v"].T) @ self._dec["r"]  # (n+1,)
        grid_logits = torch.einsum("nhw,n->hw", gates, contribs)
        return tF.interpolate(grid_logits[None, None], size=source_shape,
                              mode="bilinear", align_corners=False)[0, 0]

    # ------------------------------------------------------------- public ops

    def encode_prompts(
        self,
        prompts: PromptSet,
        state: PromptEncoderState,
        source_shape: tuple[int, int],
    ) -> PromptEmbedding:
        theta = self.theta_tensors(state)
        with torch.no_grad():
            sparse, bias, dense = self.prompt_tokens_t(prompts, theta, source_shape)
        return PromptEmbedding(
            sparse=sparse.numpy(),
            bias_token=bias.numpy(),
            dense=None if dense is None else dense.numpy(),
            source_shape=source_shape,
        )

    def decode_mask(self, embedding: ImageEmbedding, prompt_embedding: PromptEmbedding) -> MaskPrediction:
        if embedding.features.shape[0] != self.CHANNELS:
            raise ValueError(f"embedding channel dim {embedding.features.shape[0]} != {self.CHANNELS}")
        if prompt_embedding.sparse.shape[0] and prompt_embedding.sparse.shape[1] != self.CHANNELS:
            raise ValueError("prompt token dimension mismatch")
        if prompt_embedding.source_shape != embedding.source_shape:
            raise ValueError(f"prompt source shape {prompt_embedding.source_shape} "
                             f"!= embedding source shape {embedding.source_shape}")
        with torch.no_grad():
            logits = self.logits_t(
                torch.from_numpy(np.array(embedding.features)),
                torch.from_numpy(np.array(prompt_embedding.sparse)),
                torch.from_numpy(np.array(prompt_embedding.bias_token)),
                None if prompt_embedding.dense is None else torch.from_numpy(np.array(prompt_embedding.dense)),
                embedding.source_shape,
            )
        lg = logits.numpy()
        quality = float(np.abs(2.0 / (1.0 + np.exp(-lg)) - 1.0).mean())
        return MaskPrediction(logits=lg, quality=quality)

    def segment(
        self,
        image: SliceImage,
        prompts: PromptSet,
        state: PromptEncoderState,
        threshold: float = 0.0,
    ) -> LabelMask:
        emb = self.encode_image(image)
        pe = self.encode_prompts(prompts, state, emb.source_shape)
        return self.decode_mask(emb, pe).to_mask(threshold)

    def predict_logits_t(
        self,
        embedding_t: torch.Tensor,
        prompts: PromptSet,
        theta: Mapping[str, torch.Tensor],
        source_shape: tuple[int, int],
    ) -> torch.Tensor:
        """One differentiable forward pass (training-side convenience)."""
        sparse, bias, dense = self.prompt_tokens_t(prompts, theta, source_shape)
        return self.logits_t(embedding_t, sparse, bias, dense, source_shape)


def default_backbone(seed: int = 7) -> ToyConvBackbone:
    return ToyConvBackbone(seed=seed)
