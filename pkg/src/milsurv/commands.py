"""Implementations of the command-line subcommands.

Every command reads its inputs, writes outputs under ``--out-dir`` through an
:class:`Outputs` tracker and returns. The caller records a run manifest with
the SHA-256 of every tracked file.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from milsurv import fileio
from milsurv.errors import ValidationError
from milsurv.manifest import file_sha256
from milsurv.mil.ensemble import Ensemble
from milsurv.mil.search import DEFAULT_SPACE, hyperparam_search
from milsurv.mil.training import TrainConfig, train
from milsurv.mil.training import best_checkpoint
from milsurv.pipeline import (
    ClinicoSpec,
    build_ensemble,
    ensemble_case_scores,
    evaluate,
    explain_report,
    gate_bags,
    train_models,
)
from milsurv.records import load_cohort, records_to_json
from milsurv.roi import (
    MaskParams,
    build_mask,
    patch_inclusion,
    pooled_seg_metrics,
    resolve_threshold,
)
from milsurv.synth import GeneratorConfig, generate, tissue_slides

log = logging.getLogger(__name__)

class Outputs:
    """Creates output paths under a root and remembers every file written."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: set[str] = set()

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.add(Path(rel).as_posix())
        return p

    def register(self, paths) -> None:
        for p in paths:
            self.files.add(Path(p).relative_to(self.root).as_posix())

    def hashes(self) -> dict[str, str]:
        return {rel: file_sha256(self.root / rel) for rel in sorted(self.files)}

    def csv(self, name: str, table) -> None:
        header, rows = table
        fileio.write_csv(self.path(name), header, rows)


def section(config: dict, name: str) -> dict:
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    return dict(sec)


# inputs --------------------------------------------------------------------------


def load_data(data_dir: str | Path):
    d = Path(data_dir)
    if not (d / "cohort.json").exists():
        raise ValidationError(f"missing cohort file: {d / 'cohort.json'}")
    return load_cohort(d / "cohort.json"), fileio.load_bags(d / "patches")


def load_inclusion(mask_dir: str | Path | None):
    if mask_dir is None:
        return None
    raw = fileio.read_json(Path(mask_dir) / "inclusion.json")
    return {sid: [tuple(c) for c in coords] for sid, coords in raw.items()}


def load_gated(args):
    records, bags = load_data(args.data)
    return records, gate_bags(bags, load_inclusion(args.masks))


def snapshot_paths(model_dirs) -> list[tuple[str, Path]]:
    """``(label, path)`` of every ``best.snap`` under the given directories."""
    found = []
    for d in model_dirs:
        d = Path(d)
        if d.is_dir():
            found += [(p.relative_to(d).as_posix(), p) for p in sorted(d.rglob("best.snap"))]
        else:
            found.append((d.name, d))
    if not found:
        raise ValidationError("no model snapshots (best.snap) found")
    return found


def load_ensemble(args, records, bags) -> tuple[Ensemble, list[dict]]:
    """Top-k ensemble of the snapshots, plus a description of its members."""
    found = snapshot_paths(args.models)
    cands, labels = [], []
    for label, p in found:
        snap = fileio.load_snapshot(p)
        score = (snap.extra or {}).get("smoothed_metric")
        cands.append((snap.model, float(snap.tune_metric if score is None else score)))
        labels.append(label)
    ensemble = build_ensemble(cands, records, bags, args.k)
    order = sorted(range(len(cands)), key=lambda i: (-cands[i][1], i))[: args.k]
    members = [
        {"member": j, "snapshot": labels[i], "tune_score": cands[i][1], "tune_mean": mu, "tune_std": sd}
        for j, (i, mu, sd) in enumerate(zip(order, ensemble.means, ensemble.stds))
    ]
    return ensemble, members


def clinico_spec(args) -> ClinicoSpec:
    return ClinicoSpec(tuple(args.numeric), tuple(args.categorical), tuple(args.per_decade))


# generate ------------------------------------------------------------------------


def cmd_generate(args, config: dict, out: Outputs) -> dict:
    opts = section(config, "generate")
    for flag, key in (("n_cases", "n_cases"), ("feature_dim", "feature_dim"), ("censor_rate", "censor_rate")):
        v = getattr(args, flag)
        if v is not None:
            opts[key] = v
    opts["seed"] = args.seed
    cfg = GeneratorConfig.from_dict(opts)
    cohort = generate(cfg)
    fileio.write_json(out.path("cohort.json"), records_to_json(cohort.records))
    fileio.write_json(out.path("generator_config.json"), cfg.to_dict())
    fileio.write_json(out.path("ground_truth.json"), cohort.ground_truth.to_json())
    if args.tumor_only:
        out.register(fileio.save_bags(out.root / "patches", cohort.bags))
    else:
        slides = tissue_slides(cohort)
        for bag in cohort.bags:
            for s in bag.slides:
                out.register(fileio.save_slide(out.root / "patches", bag.case_id, slides[s.slide_id]))
    for sid in sorted(cohort.heatmaps):
        out.register(fileio.save_heatmap(out.root / "heatmaps", sid, cohort.heatmaps[sid]))
        out.register(fileio.save_mask(out.root / "truth_masks", sid, cohort.truth_masks[sid]))
    return {"generate": cfg.to_dict()}


# mask ----------------------------------------------------------------------------


def cmd_mask(args, config: dict, out: Outputs) -> dict:
    data = Path(args.data)
    heat_dir = data / "heatmaps"
    truth_dir = Path(args.truth) if args.truth else data / "truth_masks"
    slide_ids = fileio.grid_ids(heat_dir)
    if not slide_ids:
        raise ValidationError(f"no heatmaps in {heat_dir}")
    heatmaps = {sid: fileio.load_heatmap(heat_dir, sid) for sid in slide_ids}
    truths = {}
    if truth_dir.is_dir():
        truths = {sid: fileio.load_mask(truth_dir, sid) for sid in fileio.grid_ids(truth_dir) if sid in heatmaps}
    split_of = _slide_splits(data, slide_ids)

    opts = section(config, "mask")
    recall_target = args.recall_target if args.recall_target is not None else opts.get("recall_target")
    threshold = args.threshold if args.threshold is not None else opts.get("threshold")
    if (threshold is None) == (recall_target is None):
        raise ValidationError("give exactly one of --threshold or --recall-target")
    if recall_target is not None:
        tune_ids = [s for s in slide_ids if split_of.get(s) == "tune" and s in truths]
        if not tune_ids:
            raise ValidationError("recall target needs ground-truth masks for tune slides")
        threshold = resolve_threshold([heatmaps[s] for s in tune_ids], [truths[s] for s in tune_ids], recall_target)
    params = MaskParams(
        threshold,
        args.dilation if args.dilation is not None else opts.get("dilation", 0),
        args.min_component if args.min_component is not None else opts.get("min_component", 8),
        args.connectivity if args.connectivity is not None else opts.get("connectivity", 8),
    )

    inclusion = {}
    for sid in slide_ids:
        m = build_mask(heatmaps[sid], params)
        out.register(fileio.save_mask(out.root / "masks", sid, m, heatmaps[sid].superpixel_um))
        inclusion[sid] = [list(c) for c in patch_inclusion(m, params.patch_side)]
    fileio.write_json(out.path("inclusion.json"), inclusion)
    fileio.write_json(
        out.path("mask_params.json"),
        {**dataclasses.asdict(params), "recall_target": recall_target},
    )

    rows = []
    if truths:
        extra = [t for t in args.report_thresholds if t != threshold]
        for t in [threshold, *extra]:
            p = dataclasses.replace(params, threshold=t)
            for split in ("all", "train", "tune", "val1", "val2"):
                ids = [s for s in slide_ids if s in truths and (split == "all" or split_of.get(s) == split)]
                if not ids:
                    continue
                met = pooled_seg_metrics([build_mask(heatmaps[s], p) for s in ids], [truths[s] for s in ids])
                rows.append([t, split, len(ids), met.recall, met.precision, met.iou, met.tp, met.fp, met.fn])
    out.csv("mask_metrics.csv", (
        ["threshold", "split", "slides", "recall", "precision", "iou", "tp", "fp", "fn"], rows))
    return {"mask": {**dataclasses.asdict(params), "recall_target": recall_target}}


def _slide_splits(data: Path, slide_ids) -> dict[str, str]:
    """Map slide id to split through the patch sidecars and the cohort file."""
    out = {}
    cohort = data / "cohort.json"
    patches = data / "patches"
    if not cohort.exists() or not patches.is_dir():
        return out
    split_of_case = {r.case_id: r.split for r in load_cohort(cohort)}
    for sid in slide_ids:
        side = patches / f"{sid}.json"
        if side.exists():
            out[sid] = split_of_case.get(fileio.read_json(side)["case_id"])
    return out


# train / search --------------------------------------------------------------


_TRAIN_FLAGS = {
    "steps": "total_steps",
    "eval_every": "eval_every",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "bag_size": "bag_size",
    "l2": "l2_weight",
    "eval_patches": "eval_patches_per_case",
    "window": "rolling_window",
}


def train_config(args, config: dict) -> TrainConfig:
    opts = section(config, "train")
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            opts[key] = v
    if getattr(args, "per_slide", False):
        opts["per_slide_sampling"] = True
    opts["seed"] = args.seed
    return TrainConfig.from_dict(opts)


def _write_run(out: Outputs, prefix: str, cfg: TrainConfig, result, best, window) -> list:
    fileio.save_snapshot(
        out.path(f"{prefix}/best.snap"), best.model, cfg.to_dict(), best.step, best.tune_metric,
        extra={"smoothed_metric": best.smoothed_metric, "window": window},
    )
    fileio.save_snapshot(
        out.path(f"{prefix}/last.snap"), result.model, cfg.to_dict(), result.step,
        result.checkpoints[-1].tune_metric if result.checkpoints else None, adam=result.adam,
    )
    out.csv(f"{prefix}/train_log.csv", (
        ["step", "loss", "tune_cindex", "smoothed"],
        [[r["step"], r["loss"], r["tune_cindex"], r["smoothed"]] for r in result.log_rows],
    ))
    return [best.step, best.tune_metric, best.smoothed_metric, window]


def cmd_train(args, config: dict, out: Outputs) -> dict:
    records, bags = load_gated(args)
    if args.resume:
        snap = fileio.load_snapshot(args.resume)
        if snap.adam is None:
            raise ValidationError("resume needs a snapshot with optimizer state (last.snap)")
        cfg = TrainConfig.from_dict(snap.config)
        if args.steps is not None:
            cfg = dataclasses.replace(cfg, total_steps=args.steps)
        if cfg.total_steps <= snap.step:
            raise ValidationError(f"snapshot is at step {snap.step}; raise --steps to continue")
        result = train(records, list(bags.values()), cfg, model=snap.model, adam=snap.adam, start_step=snap.step)
        best, w = best_checkpoint(result.checkpoints, cfg.rolling_window)
        row = _write_run(out, "models/model_0", cfg, result, best, w)
        out.csv("models.csv", (["model", "seed", "best_step", "tune_cindex", "smoothed", "window"], [[0, cfg.seed, *row]]))
        return {"train": cfg.to_dict(), "resumed_from_step": snap.step}
    cfg = train_config(args, config)
    runs = train_models(records, bags, cfg, args.n_models)
    rows = []
    for m, run in enumerate(runs):
        rcfg = dataclasses.replace(cfg, seed=run.seed)
        rows.append([m, run.seed, *_write_run(out, f"models/model_{m}", rcfg, run.result, run.best, run.window)])
    out.csv("models.csv", (["model", "seed", "best_step", "tune_cindex", "smoothed", "window"], rows))
    return {"train": cfg.to_dict(), "n_models": args.n_models}


def cmd_search(args, config: dict, out: Outputs) -> dict:
    records, bags = load_gated(args)
    base = train_config(args, config)
    space = section(config, "search").get("space", DEFAULT_SPACE)
    if args.space:
        space = fileio.read_json(args.space)
    space = {k: tuple(v) for k, v in space.items()}
    unknown = set(space) - {f.name for f in dataclasses.fields(TrainConfig)}
    if unknown:
        raise ValidationError(f"unknown search fields: {sorted(unknown)}")

    results = hyperparam_search(
        records, list(bags.values()), space, args.configs, args.seed, base, args.exhaustive
    )
    keys = sorted(space)
    rows = []
    for rank, r in enumerate(results, 1):
        cfgd = r.config.to_dict()
        rows.append([rank, r.index, "ok" if r.ok else "failed", r.score,
                     r.checkpoint.step if r.ok else None, r.error or "", *(cfgd[k] for k in keys)])
        if r.ok:
            fileio.save_snapshot(
                out.path(f"configs/config_{r.index:03d}/best.snap"), r.checkpoint.model, cfgd,
                r.checkpoint.step, r.checkpoint.tune_metric, extra={"smoothed_metric": r.score},
            )
    out.csv("search.csv", (["rank", "index", "status", "score", "best_step", "error", *keys], rows))
    return {"search": {"space": {k: list(v) for k, v in space.items()}, "base": base.to_dict(),
                       "configs": args.configs, "exhaustive": args.exhaustive}}


# eval ----------------------------------------------------------------------------


def cmd_eval(args, config: dict, out: Outputs) -> dict:
    records, _ = load_data(args.data) if args.scores else (None, None)
    if args.scores:
        table = {r["case_id"]: float(r["score"]) for r in fileio.read_csv(args.scores)}
        missing = [r.case_id for r in records if r.case_id not in table]
        if missing:
            raise ValidationError(f"no score for cases {missing[:5]}")
        scores = np.array([table[r.case_id] for r in records])
        members = []
    else:
        if not args.models:
            raise ValidationError("give --models or --scores")
        records, bags = load_gated(args)
        ensemble, members = load_ensemble(args, records, bags)
        scores = ensemble_case_scores(ensemble, records, bags)
    report = evaluate(records, scores, clinico_spec(args), args.horizon, args.bootstrap, args.seed)
    for name, table in report.tables.items():
        out.csv(f"{name}.csv", table)
    fileio.write_json(out.path("thresholds.json"), report.thresholds)
    if members:
        fileio.write_json(out.path("ensemble.json"), members)
    return {"eval": {"horizon": args.horizon, "bootstrap": args.bootstrap, "k": args.k}}


# explain -------------------------------------------------------------------------


def cmd_explain(args, config: dict, out: Outputs) -> dict:
    records, bags = load_gated(args)
    ensemble, members = load_ensemble(args, records, bags)
    report = explain_report(
        records, bags, ensemble,
        k=args.k_clusters,
        k_candidates=tuple(args.k_candidates),
        n_select=args.n_select,
        embedding=args.embedding,
        sample_size=args.sample_size,
        n_boot=args.bootstrap,
        spec=clinico_spec(args),
        seed=args.seed,
    )
    out.register(fileio.save_cluster_model(out.root / "clusters", report.cluster_model))
    fileio.write_json(out.path("ensemble.json"), members)
    for name, table in report.tables.items():
        out.csv(f"{name}.csv", table)
    return {"explain": {"k": report.k, "k_candidates": list(args.k_candidates), "n_select": args.n_select,
                        "embedding": args.embedding}}


__all__ = [
    "Outputs",
    "cmd_eval",
    "cmd_explain",
    "cmd_generate",
    "cmd_mask",
    "cmd_search",
    "cmd_train",
]
