"""Spatial-aware prototypical coarse segmenter over frozen backbone features.

A small trainable convolutional head tunes the frozen encoder's features;
optional Fourier position channels are appended so that organs sitting at a
consistent (x, y) across slices of one case can be told apart from look-alike
tissue elsewhere. Class prototypes come from masked global average pooling
over a support set; query pixels are scored by temperature-weighted cosine
distance to the prototypes. Training minimizes a false-positive-biased Dice
loss on the queries plus a reverse-episode alignment loss that scores the
support set with query-derived prototypes. The coarse masks only exist to
generate prompts for the assist model, never as final segmentations.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as tF

from . import storage
from .assist import AssistModel, TrainPair, TrainingLog, sample_points, tight_box, PointSamplingConfig
from .backbone import ToyConvBackbone
from .core import LabelMask, LossConfig, SliceImage, biased_dice_loss, mask_instances, top_k_components
from .prompts import PromptSet

SAPNET_SECTION = "sapnet/1"
_DTYPE = torch.float64


@dataclass(frozen=True)
class PositionEncoder:
    """Fourier position features: gamma(x, y) = [cos(2*pi*B.(x,y)), sin(...)]."""

    B: np.ndarray  # (2, d)
    sigma: float
    d: int

    def __post_init__(self) -> None:
        b = np.asarray(self.B, dtype=np.float64)
        if b.shape != (2, self.d):
            raise ValueError(f"B must be (2, {self.d}), got {b.shape}")
        if self.sigma <= 0 or self.d < 1:
            raise ValueError("sigma must be > 0 and d >= 1")
        b = np.ascontiguousarray(b)
        b.flags.writeable = False
        object.__setattr__(self, "B", b)

    @classmethod
    def create(cls, d: int = 64, sigma: float = 1.0, seed: int = 0) -> "PositionEncoder":
        rng = np.random.default_rng(seed)
        return cls(B=rng.normal(0.0, sigma, size=(2, d)), sigma=sigma, d=d)

    def encode(self, coords: np.ndarray) -> np.ndarray:
        """coords (..., 2) with normalized (x, y) in [0,1]^2 -> (..., 2d)."""
        proj = 2.0 * np.pi * np.asarray(coords, dtype=np.float64) @ self.B
        return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)

    def grid(self, h: int, w: int) -> np.ndarray:
        """(2d, h, w) position channels at cell centers of an h x w grid."""
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        gx, gy = np.meshgrid(xs, ys)
        coords = np.stack([gx, gy], axis=-1)
        return np.moveaxis(self.encode(coords), -1, 0)


def position_encoding(x: float, y: float, pos: PositionEncoder) -> np.ndarray:
    """Position code of one normalized coordinate pair; cosines first, sines last."""
    return pos.encode(np.array([x, y], dtype=np.float64))


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: dict[str, np.ndarray]  # class -> feature vector
    alpha: float

    def __post_init__(self) -> None:
        if set(self.prototypes) != {"fg", "bg"}:
            raise ValueError("prototypes must cover exactly {fg, bg}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        protos = {}
        for name, vec in self.prototypes.items():
            v = np.asarray(vec, dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"prototype {name!r} has non-finite values")
            v = np.ascontiguousarray(v)
            v.flags.writeable = False
            protos[name] = v
        object.__setattr__(self, "prototypes", protos)


@dataclass(frozen=True)
class SapTrainConfig:
    epochs: int = 200
    lr: float = 1e-2
    beta: float = 1.0
    alpha: float = 20.0
    sigma: float = 1.0
    d: int = 64
    seed: int = 0
    w_seg: float = 1.0
    w_align: float = 1.0
    use_position: bool = True

    def __post_init__(self) -> None:
        if min(self.epochs, self.d) < 1 or min(self.lr, self.alpha, self.sigma) <= 0:
            raise ValueError("epochs/d must be >= 1 and lr/alpha/sigma > 0")
        if self.beta < 0 or self.w_seg < 0 or self.w_align < 0:
            raise ValueError("beta and loss weights must be >= 0")


@dataclass(frozen=True)
class EpisodeSplit:
    support: tuple[TrainPair, ...]
    query: tuple[TrainPair, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        if len(self.support) < 1 or len(self.query) < 1:
            raise ValueError("need at least one support and one query pair")
        sup = {p.image.content_hash() for p in self.support}
        qry = {p.image.content_hash() for p in self.query}
        if sup & qry:
            raise ValueError("support and query sets must be disjoint")


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen backbone encoder + trainable tuning head + optional position codes.

    `beta` is the false-positive cost ratio the head was trained with; the
    coarse decision layer reuses it as the inclusion threshold beta/(1+beta)
    (cost-sensitive argmax; 0.5 when beta = 1)."""

    backbone: ToyConvBackbone
    tuner: dict[str, np.ndarray]
    pos: PositionEncoder | None = None
    tuner_channels: int = 64
    beta: float = 1.0

    @property
    def out_channels(self) -> int:
        return self.tuner_channels + (2 * self.pos.d if self.pos is not None else 0)

    def tuner_tensors(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        out = {}
        for name, arr in self.tuner.items():
            t = torch.from_numpy(np.array(arr, dtype=np.float64))
            t.requires_grad_(requires_grad)
            out[name] = t
        return out

    def with_tuner(self, tensors: dict[str, torch.Tensor]) -> "FeatureExtractor":
        return replace(self, tuner={k: t.detach().numpy().copy() for k, t in tensors.items()})


def build_feature_extractor(
    backbone: ToyConvBackbone,
    cfg: SapTrainConfig,
    volumetric: bool = True,
) -> FeatureExtractor:
    """Construct the trainable head; position channels require volumetric data
    (slices of one case share a coordinate frame -- 2-D datasets must disable them)."""
    if cfg.use_position and not volumetric:
        raise ValueError("position encoding needs volumetric (single-case) data; "
                         "set use_position=False for 2-D datasets")
    rng = np.random.default_rng(cfg.seed)
    c_in = backbone.CHANNELS
    c_out = 64
    tuner = {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), size=(c_out, c_in, 3, 3)),
        "b1": np.zeros(c_out),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(9 * c_out), size=(c_out, c_out, 3, 3)),
        "b2": np.zeros(c_out),
        "pos_gain": np.array(2.0),
        "fg_margin": np.array(0.0),
    }
    pos = PositionEncoder.create(d=cfg.d, sigma=cfg.sigma, seed=cfg.seed + 1) if cfg.use_position else None
    return FeatureExtractor(backbone=backbone, tuner=tuner, pos=pos, tuner_channels=c_out, beta=cfg.beta)


def _tuned_features_t(
    emb: torch.Tensor,
    tuner: dict[str, torch.Tensor],
    pos_grid: torch.Tensor | None,
    eps: float = 1e-8,
) -> torch.Tensor:
    h = torch.tanh(tF.conv2d(emb[None], tuner["w1"], tuner["b1"], padding=1))
    h = tF.conv2d(h, tuner["w2"], tuner["b2"], padding=1)[0]
    # Unit-normalize the content block per cell so its magnitude cannot drown
    # the position channels; the trainable gain sets their relative weight.
    h = h / torch.linalg.norm(h, dim=0, keepdim=True).clamp_min(eps)
    if pos_grid is not None:
        n_pairs = pos_grid.shape[0] / 2.0  # each frequency contributes cos^2+sin^2 = 1
        h = torch.cat([h * np.sqrt(n_pairs), tuner["pos_gain"] * pos_grid], dim=0)
    return h


def extract_features(image: SliceImage, fx: FeatureExtractor) -> np.ndarray:
    """Per-cell feature map (C_tuner [+ 2d], h, w); position channels appended last."""
    emb = fx.backbone.encode_image(image)
    emb_t = torch.from_numpy(np.array(emb.features))
    pos_grid = None
    if fx.pos is not None:
        pos_grid = torch.from_numpy(fx.pos.grid(*emb.grid_shape))
    with torch.no_grad():
        feats = _tuned_features_t(emb_t, fx.tuner_tensors(), pos_grid)
    return feats.numpy()


def label_to_grid(mask: LabelMask | np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Downsample a binary mask to the feature grid (area coverage >= 0.5)."""
    px = mask.pixels if isinstance(mask, LabelMask) else np.asarray(mask)
    t = torch.from_numpy(px.astype(np.float64))[None, None]
    pooled = tF.adaptive_avg_pool2d(t, grid_shape)[0, 0].numpy()
    return (pooled >= 0.5).astype(np.uint8)


def compute_prototypes(
    support_features: Sequence[np.ndarray],
    support_masks: Sequence[np.ndarray],
    alpha: float = 20.0,
) -> PrototypeSet:
    """Masked global average pooling, jointly over all support pixels:
    p_c = sum of features at class-c pixels / count of class-c pixels."""
    if len(support_features) != len(support_masks) or not support_features:
        raise ValueError("need matching, non-empty feature and mask lists")
    sums = {"fg": None, "bg": None}
    counts = {"fg": 0, "bg": 0}
    for feats, mask in zip(support_features, support_masks):
        f = np.asarray(feats, dtype=np.float64)
        m = np.asarray(mask)
        if f.ndim != 3 or m.shape != f.shape[1:]:
            raise ValueError(f"features {f.shape} and mask {m.shape} are inconsistent")
        for cls, sel in (("fg", m == 1), ("bg", m == 0)):
            if sel.any():
                s = f[:, sel].sum(axis=1)
                sums[cls] = s if sums[cls] is None else sums[cls] + s
                counts[cls] += int(sel.sum())
    for cls in ("fg", "bg"):
        if counts[cls] == 0:
            raise ValueError(f"support set has no {cls} pixels at feature resolution")
    return PrototypeSet(
        prototypes={cls: sums[cls] / counts[cls] for cls in ("fg", "bg")},
        alpha=alpha,
    )


def _cosine_distance_np(features: np.ndarray, proto: np.ndarray) -> np.ndarray:
    """1 - cosine similarity per pixel; zero vectors count as orthogonal (distance 1)."""
    f = np.asarray(features, dtype=np.float64)
    fn = np.linalg.norm(f, axis=0)
    pn = float(np.linalg.norm(proto))
    dot = np.einsum("chw,c->hw", f, proto)
    zero = (fn == 0) | (pn == 0)
    if zero.any():
        warnings.warn("zero-norm feature or prototype: cosine distance set to 1", stacklevel=2)
    denom = np.where(zero, 1.0, fn * pn)
    sim = np.where(zero, 0.0, dot / denom)
    return 1.0 - sim


def predict_query(
    query_features: np.ndarray,
    protos: PrototypeSet,
) -> tuple[dict[str, np.ndarray], LabelMask]:
    """Per-pixel class scores softmax(-alpha * cosdist) and the argmax mask."""
    f = np.asarray(query_features, dtype=np.float64)
    for cls, p in protos.prototypes.items():
        if p.shape[0] != f.shape[0]:
            raise ValueError(f"feature dim {f.shape[0]} != prototype {cls!r} dim {p.shape[0]}")
    d_fg = _cosine_distance_np(f, protos.prototypes["fg"])
    d_bg = _cosine_distance_np(f, protos.prototypes["bg"])
    a = protos.alpha
    e_fg = np.exp(-a * d_fg)
    e_bg = np.exp(-a * d_bg)
    z = e_fg + e_bg
    soft = {"fg": e_fg / z, "bg": e_bg / z}
    hard = LabelMask((soft["fg"] > soft["bg"]).astype(np.uint8))
    return soft, hard


def _soft_fg_t(
    feats: torch.Tensor,
    p_fg: torch.Tensor,
    p_bg: torch.Tensor,
    alpha: float,
    margin: torch.Tensor | float = 0.0,
    eps: float = 1e-12,
) -> torch.Tensor:
    """Foreground probability sigmoid(alpha * (d_bg - d_fg - margin)).

    `margin` is a trainable foreground decision offset: the loss's FP-bias
    weight needs an operating point that the class prototypes (which recompute
    as means and so normalize any threshold shift away) cannot absorb.
    """
    fn = torch.linalg.norm(feats, dim=0).clamp_min(eps)
    d_fg = 1.0 - torch.einsum("chw,c->hw", feats, p_fg) / (fn * torch.linalg.norm(p_fg).clamp_min(eps))
    d_bg = 1.0 - torch.einsum("chw,c->hw", feats, p_bg) / (fn * torch.linalg.norm(p_bg).clamp_min(eps))
    return torch.sigmoid(alpha * (d_bg - d_fg - margin))


def _prototypes_t(
    feats: Sequence[torch.Tensor],
    masks: Sequence[torch.Tensor],
    eps: float = 1e-12,
) -> tuple[torch.Tensor, torch.Tensor]:
    fg_sum = sum((f * m).sum(dim=(1, 2)) for f, m in zip(feats, masks))
    fg_cnt = sum(m.sum() for m in masks)
    bg_sum = sum((f * (1 - m)).sum(dim=(1, 2)) for f, m in zip(feats, masks))
    bg_cnt = sum((1 - m).sum() for m in masks)
    return fg_sum / fg_cnt.clamp_min(eps), bg_sum / bg_cnt.clamp_min(eps)


def episode_loss_t(
    tuner: dict[str, torch.Tensor],
    support_embs: Sequence[torch.Tensor],
    support_labels: Sequence[torch.Tensor],
    query_embs: Sequence[torch.Tensor],
    query_labels: Sequence[torch.Tensor],
    pos_grid: torch.Tensor | None,
    cfg: SapTrainConfig,
) -> torch.Tensor:
    """One episode's training loss (segmentation + alignment), differentiable
    with respect to the tuner tensors only."""
    sup_feats = [_tuned_features_t(e, tuner, pos_grid) for e in support_embs]
    qry_feats = [_tuned_features_t(e, tuner, pos_grid) for e in query_embs]
    p_fg, p_bg = _prototypes_t(sup_feats, support_labels)

    margin = tuner["fg_margin"]
    seg_cfg = LossConfig(beta=cfg.beta, smooth=1e-6)
    soft_fgs = [_soft_fg_t(f, p_fg, p_bg, cfg.alpha, margin) for f in qry_feats]
    l_seg = sum(biased_dice_loss(s, g, seg_cfg) for s, g in zip(soft_fgs, query_labels)) / len(qry_feats)

    # Reverse episode: prototypes from the (detached) predicted query masks
    # score the support set with a plain Dice loss.
    hard = [(s > 0.5).detach().to(_DTYPE) for s in soft_fgs]
    fg_px = sum(float(h.sum()) for h in hard)
    bg_px = sum(float((1 - h).sum()) for h in hard)
    if fg_px > 0 and bg_px > 0:
        q_fg, q_bg = _prototypes_t(qry_feats, hard)
        align_cfg = LossConfig(beta=1.0, smooth=1e-6)
        sup_soft = [_soft_fg_t(f, q_fg, q_bg, cfg.alpha, margin) for f in sup_feats]
        l_align = sum(biased_dice_loss(s, g, align_cfg) for s, g in zip(sup_soft, support_labels)) / len(sup_feats)
    else:
        l_align = torch.zeros((), dtype=_DTYPE)
    return cfg.w_seg * l_seg + cfg.w_align * l_align


def train_sapnet(
    split: EpisodeSplit,
    fx: FeatureExtractor,
    cfg: SapTrainConfig,
    progress=None,
    should_stop=None,
) -> tuple[FeatureExtractor, TrainingLog]:
    """Optimize the tuning head on a support/query episode; the backbone encoder
    stays frozen (its hash is unchanged by training)."""
    backbone = fx.backbone
    grid = backbone.GRID

    def prep(pairs: Sequence[TrainPair]) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        embs, labels = [], []
        for p in pairs:
            embs.append(torch.from_numpy(np.array(backbone.encode_image(p.image).features)))
            labels.append(torch.from_numpy(label_to_grid(p.label, (grid, grid)).astype(np.float64)))
        return embs, labels

    sup_embs, sup_labels = prep(split.support)
    qry_embs, qry_labels = prep(split.query)
    if not any(float(l.sum()) > 0 for l in sup_labels):
        raise ValueError("support set has no foreground at feature resolution")

    pos_grid = None
    if fx.pos is not None:
        pos_grid = torch.from_numpy(fx.pos.grid(grid, grid))

    tuner = fx.tuner_tensors(requires_grad=True)
    opt = torch.optim.Adam(list(tuner.values()), lr=cfg.lr)
    log = TrainingLog()
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        loss = episode_loss_t(tuner, sup_embs, sup_labels, qry_embs, qry_labels, pos_grid, cfg)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at epoch {epoch} (beta={cfg.beta}, lr={cfg.lr})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.record(epoch, float(loss.detach()), time.perf_counter() - start)
        if progress is not None:
            progress((epoch + 1) / cfg.epochs)
        if should_stop is not None and should_stop():
            break
    return fx.with_tuner(tuner), log


# --------------------------------------------------------------- auto pipeline


@dataclass(frozen=True)
class PostProcessConfig:
    k_components: int = 1
    n_points: int = 3
    prompt_type: Literal["points", "boxes"] = "points"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k_components < 1 or self.n_points < 1:
            raise ValueError("k_components and n_points must be >= 1")
        if self.prompt_type not in ("points", "boxes"):
            raise ValueError(f"unknown prompt type {self.prompt_type!r}")


def generate_prompts_from_coarse(
    coarse: LabelMask,
    post: PostProcessConfig,
    rng: np.random.Generator | None = None,
) -> PromptSet:
    """Top-K filter the coarse mask, then emit interior points or tight boxes
    per retained component. An empty coarse mask yields an empty prompt set."""
    if coarse.is_empty():
        return PromptSet(())
    rng = rng if rng is not None else np.random.default_rng(post.seed)
    kept = top_k_components(coarse, post.k_components)
    prompts: list = []
    point_cfg = PointSamplingConfig(scheme="center", n_min=post.n_points, n_max=post.n_points + 1)
    for inst in mask_instances(kept):
        inst_mask = LabelMask(inst.astype(np.uint8))
        if post.prompt_type == "boxes":
            prompts.append(tight_box(inst_mask))
        else:
            prompts.extend(sample_points(inst_mask, point_cfg, "fg", rng))
    return PromptSet(tuple(prompts))


def support_prototypes(
    annotated: Sequence[TrainPair],
    fx: FeatureExtractor,
    alpha: float,
) -> PrototypeSet:
    """Prototypes from every annotated pair (inference uses all of them as support)."""
    grid = fx.backbone.GRID
    feats = [extract_features(p.image, fx) for p in annotated]
    masks = [label_to_grid(p.label, (grid, grid)) for p in annotated]
    return compute_prototypes(feats, masks, alpha=alpha)


def coarse_predict(image: SliceImage, fx: FeatureExtractor, protos: PrototypeSet) -> LabelMask:
    """Source-resolution coarse mask from the prototype classifier.

    Applies the trained foreground decision margin and the cost-sensitive
    inclusion threshold beta/(1+beta): a pixel only counts as foreground when
    the expected miss cost outweighs beta times the false-positive cost."""
    feats = torch.from_numpy(extract_features(image, fx))
    margin = float(fx.tuner.get("fg_margin", 0.0))
    with torch.no_grad():
        soft_fg = _soft_fg_t(
            feats,
            torch.from_numpy(np.array(protos.prototypes["fg"])),
            torch.from_numpy(np.array(protos.prototypes["bg"])),
            protos.alpha,
            margin,
        )
    # Bilinear soft upsampling gives sub-cell boundary placement; the cost
    # threshold then moves the decision contour continuously.
    tau = fx.beta / (1.0 + fx.beta)
    up = tF.interpolate(soft_fg[None, None], size=image.shape, mode="bilinear",
                        align_corners=False)[0, 0].numpy()
    return LabelMask((up > tau).astype(np.uint8))


@dataclass
class AutoSliceResult:
    slice_index: int
    mask: LabelMask
    provenance: dict


def auto_segment(
    query_slices: Sequence[SliceImage],
    annotated: Sequence[TrainPair],
    fx: FeatureExtractor,
    assist_model: AssistModel,
    post: PostProcessConfig,
    alpha: float = 20.0,
) -> list[AutoSliceResult]:
    """Full automatic pipeline: coarse-segment each query slice, turn retained
    components into prompts, and run the frozen assist model on those prompts."""
    protos = support_prototypes(annotated, fx, alpha)
    rng = np.random.default_rng(post.seed)
    results: list[AutoSliceResult] = []
    for pos_idx, image in enumerate(query_slices):
        coarse = coarse_predict(image, fx, protos)
        prompts = generate_prompts_from_coarse(coarse, post, rng)
        if len(prompts):
            mask = assist_model.segment(image, prompts)
        else:
            mask = LabelMask(np.zeros(image.shape, dtype=np.uint8))
        idx = image.slice_index if image.slice_index is not None else pos_idx
        results.append(AutoSliceResult(
            slice_index=idx,
            mask=mask,
            provenance={
                "generator": "sapnet",
                "prompts": prompts.to_jsonable(),
                "coarse_area": coarse.area,
                "kept_components": len(mask_instances(top_k_components(coarse, post.k_components)))
                if not coarse.is_empty() else 0,
            },
        ))
    return results


# ----------------------------------------------------------------- checkpoints


def sapnet_section(fx: FeatureExtractor, cfg: SapTrainConfig) -> tuple[dict, dict[str, np.ndarray]]:
    """Checkpoint section payload for the coarse segmenter."""
    meta = {
        "alpha": cfg.alpha,
        "sigma": cfg.sigma,
        "d": cfg.d,
        "beta": cfg.beta,
        "use_position": fx.pos is not None,
        "tuner_channels": fx.tuner_channels,
    }
    arrays = {f"tuner_{k}": v for k, v in fx.tuner.items()}
    if fx.pos is not None:
        arrays["pos_B"] = fx.pos.B
    return meta, arrays


def load_sapnet_section(
    backbone: ToyConvBackbone,
    meta: dict,
    arrays: dict[str, np.ndarray],
) -> tuple[FeatureExtractor, SapTrainConfig]:
    cfg = SapTrainConfig(
        alpha=float(meta["alpha"]),
        sigma=float(meta["sigma"]),
        d=int(meta["d"]),
        beta=float(meta["beta"]),
        use_position=bool(meta["use_position"]),
    )
    tuner = {k[len("tuner_") :]: v for k, v in arrays.items() if k.startswith("tuner_")}
    pos = None
    if meta.get("use_position"):
        pos = PositionEncoder(B=arrays["pos_B"], sigma=cfg.sigma, d=cfg.d)
    fx = FeatureExtractor(backbone=backbone, tuner=tuner, pos=pos,
                          tuner_channels=int(meta.get("tuner_channels", 64)),
                          beta=cfg.beta)
    return fx, cfg
