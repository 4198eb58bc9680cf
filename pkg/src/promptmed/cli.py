"""Batch command-line entry points: phantom generation, per-case prompt
training and evaluation, automatic pipelines with ablation toggles, report
aggregation, and the HTTP service runner.

Exit codes: 0 ok, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import storage
from .assist import (
    AssistModel,
    AssistTrainConfig,
    BoxJitterConfig,
    PointSamplingConfig,
    TrainPair,
    eval_boxes,
    eval_composite_active,
    eval_points,
    train_prompt_encoder,
)
from .backbone import ToyConvBackbone
from .core import LabelMask, confusion, dice, mask_instances, top_k_components
from .data import (
    PhantomBody,
    PhantomConfig,
    SliceSelectionPolicy,
    load_case,
    load_manifest,
    make_phantom,
    save_phantom_case,
    select_training_slices,
    write_manifest,
)
from .promptgen import PropagationConfig, propagate_ensemble, train_point_classifier, classify_candidate_points
from .sapnet import (
    EpisodeSplit,
    PostProcessConfig,
    SapTrainConfig,
    auto_segment,
    build_feature_extractor,
    coarse_predict,
    sapnet_section,
    support_prototypes,
    train_sapnet,
)

CONFIG_ERROR = 2
RUNTIME_ERROR = 3


def _load_cli_config(ctx: click.Context, param: click.Parameter, value: str | None):
    """--config file contents become option defaults (explicit flags still win).

    Keys may be spelled as the flag (e.g. "points") or the parameter name
    (e.g. "max_points")."""
    if not value:
        return value
    path = Path(value)
    if not path.exists():
        raise click.exceptions.Exit(CONFIG_ERROR)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
    else:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(path.read_text())
    defaults = dict(data)
    for p in ctx.command.params:
        for opt in p.opts:
            key = opt.lstrip("-").replace("-", "_")
            if key in data:
                defaults[p.name] = data[key]
    ctx.default_map = {**(ctx.default_map or {}), **defaults}
    return value


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main() -> None:
    """Annotation experiment toolkit."""


# -------------------------------------------------------------------- phantom


@main.group()
def phantom() -> None:
    """Synthetic phantom datasets."""


def _phantom_from_dict(raw: dict) -> PhantomConfig:
    bodies = tuple(
        PhantomBody(
            geometry=b["geometry"],
            center=tuple(b["center"]),
            radii=tuple(b["radii"]),
            intensity=float(b.get("intensity", 1.0)),
            lobe_offset=float(b.get("lobe_offset", 0.0)),
            labeled=bool(b.get("labeled", True)),
            wobble_sigma=float(b.get("wobble_sigma", 0.0)),
        )
        for b in raw["bodies"]
    )
    return PhantomConfig(
        shape=tuple(raw["shape"]),
        bodies=bodies,
        bg_intensity=float(raw.get("bg_intensity", 0.0)),
        noise_sigma=float(raw.get("noise_sigma", 0.0)),
        seed=int(raw.get("seed", 0)),
    )


@phantom.command("gen")
@click.option("--config", "config_path", required=True, type=click.Path(), help="phantom JSON config")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--case-id", default="phantom0", show_default=True)
@click.option("--force", is_flag=True, help="overwrite existing output files")
def phantom_gen(config_path: str, out_dir: str, case_id: str, force: bool) -> None:
    """Generate a phantom volume + mask and a manifest for them."""
    try:
        raw = json.loads(Path(config_path).read_text())
        cfg = _phantom_from_dict(raw)
    except (OSError, KeyError, ValueError, TypeError) as exc:
        _fail(f"bad phantom config: {exc}", CONFIG_ERROR)
    out = Path(out_dir)
    img_path = out / f"{case_id}_img.nii.gz"
    if img_path.exists() and not force:
        _fail(f"{img_path} exists; pass --force to overwrite", CONFIG_ERROR)
    try:
        volume, mask = make_phantom(cfg)
        entry = save_phantom_case(out, case_id, volume, mask)
        write_manifest(out / "manifest.json", [entry])
    except ValueError as exc:
        _fail(str(exc), CONFIG_ERROR)
    except OSError as exc:
        _fail(str(exc), RUNTIME_ERROR)
    click.echo(f"wrote {img_path} and mask; manifest at {out / 'manifest.json'}")


# --------------------------------------------------------------------- assist


def _load_manifest_cases(data_dir: str) -> list[tuple[str, "np.ndarray", np.ndarray]]:
    manifest = load_manifest(Path(data_dir) / "manifest.json")
    cases = []
    for entry in manifest["cases"]:
        volume, mask = load_case(entry, data_dir)
        if mask is None:
            raise ValueError(f"case {entry['case_id']} has no ground-truth mask")
        cases.append((entry["case_id"], volume, mask))
    return cases


def _select_pairs(volume, mask, n_slices: int, seed: int) -> tuple[list[TrainPair], list[int]]:
    policy = SliceSelectionPolicy(n_slices=n_slices)
    rng = np.random.default_rng(seed)
    fg_idx, _ = select_training_slices(mask, policy, rng)
    pairs = [TrainPair(volume.slices[z], LabelMask(mask[z]), case_id=f"z{z}") for z in fg_idx]
    return pairs, fg_idx


def _eval_cases(volume, mask, train_idx: list[int], limit: int = 16) -> list[TrainPair]:
    fg = [z for z in range(volume.num_slices) if mask[z].any() and z not in train_idx]
    if len(fg) > limit:
        step = max(1, len(fg) // limit)
        fg = fg[::step][:limit]
    return [TrainPair(volume.slices[z], LabelMask(mask[z]), case_id=f"z{z}") for z in fg]


@main.group()
def assist() -> None:
    """Per-case prompt learning."""


@assist.command("train")
@click.option("--config", callback=_load_cli_config, expose_value=False, is_eager=True,
              type=click.Path(), help="TOML/JSON file with option defaults")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["points", "boxes", "composite"]), default="points", show_default=True)
@click.option("--slices", "n_slices", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=150, show_default=True)
@click.option("--lr", default=1e-2, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def assist_train(data_dir: str, mode: str, n_slices: int, seed: int, epochs: int, lr: float, out_dir: str) -> None:
    """Train the prompt encoder per case and record timings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cases = _load_manifest_cases(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc), CONFIG_ERROR)
    backbone = ToyConvBackbone()
    timing_rows = []
    try:
        for case_id, volume, mask in cases:
            pairs, train_idx = _select_pairs(volume, mask, n_slices, seed)
            cfg = AssistTrainConfig(prompt_mode=mode, epochs=epochs, lr=lr, seed=seed)
            state, log = train_prompt_encoder(pairs, backbone, cfg)
            backbone.save_weights(out / f"checkpoint-{case_id}.ckpt", state)
            log.save(out / f"train_log-{case_id}.json")
            timing_rows.append((case_id, mode, n_slices, log.total_seconds))
            (out / f"train_meta-{case_id}.json").write_text(json.dumps({
                "case_id": case_id, "mode": mode, "slices": train_idx,
                "seed": seed, "epochs": epochs, "lr": lr,
            }, indent=1))
    except (ValueError, RuntimeError) as exc:
        _fail(str(exc), RUNTIME_ERROR)
    with open(out / "timing.csv", "w") as fh:
        fh.write("case_id,mode,n_slices,train_seconds\n")
        for row in timing_rows:
            fh.write(f"{row[0]},{row[1]},{row[2]},{row[3]:.3f}\n")
    click.echo(f"trained {len(timing_rows)} case(s); timing table at {out / 'timing.csv'}")


@assist.command("eval")
@click.option("--config", callback=_load_cli_config, expose_value=False, is_eager=True,
              type=click.Path(), help="TOML/JSON file with option defaults")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True),
              help="directory produced by `assist train`")
@click.option("--mode", type=click.Choice(["points", "boxes", "composite"]), default="points", show_default=True)
@click.option("--points", "max_points", default=10, show_default=True, help="evaluate 1..P points")
@click.option("--seed", default=0, show_default=True)
@click.option("--jobs", default=1, show_default=True, help="parallel case workers")
@click.option("--out", "out_dir", required=True, type=click.Path())
def assist_eval(data_dir: str, run_dir: str, mode: str, max_points: int, seed: int, jobs: int, out_dir: str) -> None:
    """Evaluate trained prompts: Dice-vs-points curve data and summaries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cases = _load_manifest_cases(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc), CONFIG_ERROR)
    backbone = ToyConvBackbone()
    run = Path(run_dir)

    def eval_case(item) -> list[dict]:
        case_id, volume, mask = item
        ckpt = run / f"checkpoint-{case_id}.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"no checkpoint for case {case_id} in {run}")
        meta = json.loads((run / f"train_meta-{case_id}.json").read_text())
        state = backbone.load_weights(ckpt)
        model = AssistModel(backbone, state)
        eval_pairs = _eval_cases(volume, mask, meta["slices"])
        rows: list[dict] = []
        if mode == "points":
            for n in range(1, max_points + 1):
                rep = eval_points(model, eval_pairs, n, seed=seed + n)
                for r in rep.rows:
                    rows.append({"case_id": f"{case_id}/{r['case_id']}", "n_points": n, "dice": r["dice"]})
        elif mode == "boxes":
            rep = eval_boxes(model, eval_pairs, BoxJitterConfig(d_in=3, d_out=3), seed=seed)
            for r in rep.rows:
                rows.append({"case_id": f"{case_id}/{r['case_id']}", "n_points": 0, "dice": r["dice"]})
        else:
            rep = eval_composite_active(model, eval_pairs, BoxJitterConfig(d_in=3, d_out=3),
                                        max_points=min(5, max_points), seed=seed)
            for r in rep.rows:
                rows.append({"case_id": f"{case_id}/{r['case_id']}", "n_points": r["n_points"], "dice": r["dice"]})
        return rows

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                all_rows = [row for rows in pool.map(eval_case, cases) for row in rows]
        else:
            all_rows = [row for item in cases for row in eval_case(item)]
    except (OSError, ValueError, RuntimeError) as exc:
        _fail(str(exc), RUNTIME_ERROR)

    csv_path = out / f"eval-{mode}.csv"
    with open(csv_path, "w") as fh:
        fh.write("case_id,n_points,dice\n")
        for r in all_rows:
            fh.write(f"{r['case_id']},{r['n_points']},{r['dice']:.6f}\n")
    by_n: dict[int, list[float]] = {}
    for r in all_rows:
        by_n.setdefault(r["n_points"], []).append(r["dice"])
    summary = {
        "mode": mode,
        "seed": seed,
        "per_point_count": {
            str(n): {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
            for n, v in sorted(by_n.items())
        },
        "overall": {"mean": float(np.mean([r["dice"] for r in all_rows])),
                    "std": float(np.std([r["dice"] for r in all_rows]))},
    }
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=1))
    click.echo(f"wrote {csv_path} and {out / 'eval_summary.json'}")


# ----------------------------------------------------------------------- auto


def _mask_hash(masks: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for m in masks:
        h.update(m.tobytes())
    return h.hexdigest()


@main.group()
def auto() -> None:
    """Automatic prompt generation pipelines."""


@auto.command("run")
@click.option("--config", callback=_load_cli_config, expose_value=False, is_eager=True,
              type=click.Path(), help="TOML/JSON file with option defaults")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(["propagate", "classify", "sapnet"]), default="sapnet",
              show_default=True)
@click.option("--slices", "n_slices", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--ablation", default="", help="comma list from {pe,biasdice,post}: emit the ablation table")
@click.option("--out", "out_dir", required=True, type=click.Path())
def auto_run(data_dir: str, strategy: str, n_slices: int, seed: int, ablation: str, out_dir: str) -> None:
    """Run an automatic pipeline; with --ablation, emit the feature-toggle table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cases = _load_manifest_cases(data_dir)
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc), CONFIG_ERROR)
    backbone = ToyConvBackbone()
    toggles = [t.strip() for t in ablation.split(",") if t.strip()]
    unknown = set(toggles) - {"pe", "biasdice", "post"}
    if unknown:
        _fail(f"unknown ablation toggles: {sorted(unknown)}", CONFIG_ERROR)
    try:
        if toggles:
            _run_ablation(cases, backbone, n_slices, seed, out)
        else:
            _run_strategy(cases, backbone, strategy, n_slices, seed, out)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        _fail(str(exc), RUNTIME_ERROR)


def _run_strategy(cases, backbone, strategy: str, n_slices: int, seed: int, out: Path) -> None:
    rows = []
    for case_id, volume, mask in cases:
        pairs, train_idx = _select_pairs(volume, mask, n_slices, seed)
        cfg = AssistTrainConfig(prompt_mode="points", seed=seed)
        state, _ = train_prompt_encoder(pairs, backbone, cfg)
        model = AssistModel(backbone, state)
        if strategy == "propagate":
            pcfg = PropagationConfig(n_points=10, max_slices=volume.num_slices, seed=seed)
            seeds = [(z, LabelMask(mask[z])) for z in train_idx]
            combined, _ = propagate_ensemble(volume, seeds, pcfg, model, gt=mask)
            inter = np.logical_and(combined, mask).sum()
            d3 = 2.0 * inter / max(combined.sum() + mask.sum(), 1)
            rows.append({"case_id": case_id, "dice": float(d3)})
        elif strategy == "classify":
            classifier = train_point_classifier(pairs, backbone, seed=seed)
            ds = []
            for pair in _eval_cases(volume, mask, train_idx):
                prompts = classify_candidate_points(pair.image, classifier, backbone)
                pred = model.segment(pair.image, prompts)
                ds.append(dice(pred, pair.label))
            rows.append({"case_id": case_id, "dice": float(np.mean(ds))})
        else:
            sap_cfg = SapTrainConfig(seed=seed, d=32)
            fx0 = build_feature_extractor(backbone, sap_cfg, volumetric=True)
            half = max(1, len(pairs) // 2 + len(pairs) % 2)
            fx, _ = train_sapnet(EpisodeSplit(tuple(pairs[:half]), tuple(pairs[half:])), fx0, sap_cfg)
            eval_pairs = _eval_cases(volume, mask, train_idx)
            results = auto_segment([p.image for p in eval_pairs], pairs, fx, model,
                                   PostProcessConfig(k_components=1, n_points=3), alpha=sap_cfg.alpha)
            ds = [dice(res.mask, pair.label) for res, pair in zip(results, eval_pairs)]
            rows.append({"case_id": case_id, "dice": float(np.mean(ds))})
    payload = {"strategy": strategy, "seed": seed, "cases": rows,
               "mean_dice": float(np.mean([r["dice"] for r in rows]))}
    (out / "auto_summary.json").write_text(json.dumps(payload, indent=1))
    click.echo(f"{strategy}: mean dice {payload['mean_dice']:.4f} -> {out / 'auto_summary.json'}")


def _run_ablation(cases, backbone, n_slices: int, seed: int, out: Path) -> None:
    """Train/evaluate the coarse segmenter with feature toggles and emit the
    4-row table plus per-stage hashes."""
    variants = [
        ("none", False, 1.0, False),
        ("pe", True, 1.0, False),
        ("pe+biasdice", True, 3.0, False),
        ("pe+biasdice+post", True, 3.0, True),
    ]
    table_rows = []
    for name, use_pe, beta, use_post in variants:
        dices, fps = [], []
        coarse_masks: list[np.ndarray] = []
        post_masks: list[np.ndarray] = []
        for case_id, volume, mask in cases:
            pairs, train_idx = _select_pairs(volume, mask, n_slices, seed)
            sap_cfg = SapTrainConfig(seed=seed, beta=beta, use_position=use_pe, d=32)
            fx0 = build_feature_extractor(backbone, sap_cfg, volumetric=True)
            half = max(1, len(pairs) // 2 + len(pairs) % 2)
            fx, _ = train_sapnet(EpisodeSplit(tuple(pairs[:half]), tuple(pairs[half:])), fx0, sap_cfg)
            protos = support_prototypes(pairs, fx, alpha=sap_cfg.alpha)
            for pair in _eval_cases(volume, mask, train_idx):
                coarse = coarse_predict(pair.image, fx, protos)
                final = top_k_components(coarse, 1) if use_post else coarse
                coarse_masks.append(coarse.pixels)
                post_masks.append(final.pixels)
                dices.append(dice(final, pair.label))
                fps.append(confusion(final, pair.label).fp)
        table_rows.append({
            "variant": name,
            "pe": use_pe,
            "biasdice": beta > 1,
            "post": use_post,
            "dice_mean": float(np.mean(dices)),
            "dice_std": float(np.std(dices)),
            "fp_total": int(np.sum(fps)),
            "coarse_stage_hash": _mask_hash(coarse_masks),
            "post_stage_hash": _mask_hash(post_masks),
        })
    (out / "ablation.json").write_text(json.dumps({"seed": seed, "rows": table_rows}, indent=1))
    with open(out / "ablation.csv", "w") as fh:
        fh.write("variant,pe,biasdice,post,dice_mean,dice_std,fp_total\n")
        for r in table_rows:
            fh.write(f"{r['variant']},{r['pe']},{r['biasdice']},{r['post']},"
                     f"{r['dice_mean']:.4f},{r['dice_std']:.4f},{r['fp_total']}\n")
    lines = ["| variant | PE | biasDice | Post | Dice (mean ± std) | FP px |",
             "|---|---|---|---|---|---|"]
    for r in table_rows:
        mark = lambda b: "yes" if b else "no"
        lines.append(f"| {r['variant']} | {mark(r['pe'])} | {mark(r['biasdice'])} | {mark(r['post'])} "
                     f"| {r['dice_mean']:.3f} ± {r['dice_std']:.3f} | {r['fp_total']} |")
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    click.echo("\n".join(lines))


# --------------------------------------------------------------------- report


@main.command("report")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def report(in_dir: str, out_path: str) -> None:
    """Aggregate run summaries into a markdown report; absent runs are listed
    and produce a nonzero exit code."""
    root = Path(in_dir)
    run_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    lines = ["# Run report", ""]
    absent = []
    for run in run_dirs:
        summary_path = run / "eval_summary.json"
        ablation_path = run / "ablation.json"
        auto_path = run / "auto_summary.json"
        if summary_path.exists():
            summary = json.loads(summary_path.read_text())
            lines.append(f"## {run.name} ({summary['mode']})")
            lines.append("")
            lines.append("| points | dice mean | dice std | n |")
            lines.append("|---|---|---|---|")
            for n, stats in summary["per_point_count"].items():
                lines.append(f"| {n} | {stats['mean']:.4f} | {stats['std']:.4f} | {stats['n']} |")
            lines.append("")
        elif ablation_path.exists():
            data = json.loads(ablation_path.read_text())
            lines.append(f"## {run.name} (ablation)")
            lines.append("")
            lines.append("| variant | dice mean ± std | FP px |")
            lines.append("|---|---|---|")
            for r in data["rows"]:
                lines.append(f"| {r['variant']} | {r['dice_mean']:.4f} ± {r['dice_std']:.4f} | {r['fp_total']} |")
            lines.append("")
        elif auto_path.exists():
            data = json.loads(auto_path.read_text())
            lines.append(f"## {run.name} ({data['strategy']})")
            lines.append("")
            lines.append(f"mean dice: {data['mean_dice']:.4f} over {len(data['cases'])} case(s)")
            lines.append("")
        else:
            absent.append(run.name)
    if absent:
        lines.append("## Absent runs")
        lines.append("")
        for name in absent:
            lines.append(f"- {name}: no summary found")
        lines.append("")
    Path(out_path).write_text("\n".join(lines))
    click.echo(f"wrote {out_path}")
    if absent:
        sys.exit(RUNTIME_ERROR)


# ---------------------------------------------------------------------- serve


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML/JSON service config")
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
@click.option("--data-dir", default=None, type=click.Path())
def serve(config_path: str | None, host: str | None, port: int | None, data_dir: str | None) -> None:
    """Run the annotation HTTP service."""
    import uvicorn

    from .service import ServiceConfig, create_app

    try:
        cfg = ServiceConfig.from_file(config_path)
    except (OSError, ValueError) as exc:
        _fail(f"bad service config: {exc}", CONFIG_ERROR)
    if host:
        cfg.host = host
    if port:
        cfg.port = port
    if data_dir:
        cfg.data_dir = data_dir
    uvicorn.run(create_app(cfg), host=cfg.host, port=cfg.port, log_level="warning")


if __name__ == "__main__":
    main()
