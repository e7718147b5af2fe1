"""Experiment orchestration: training runs, mask generation, evaluation,
ablations and plot-ready reports.

Every command is a deterministic function of the resolved config, its seeds
and input files.  Artifacts carry the config hash so stale combinations are
caught.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import cam as cam_engine
from .config import RunConfig, config_hash, format_config, with_overrides
from .curriculum import (
    ShuffleState,
    decay_threshold,
    feedback_update,
    format_history,
    parse_history,
    shuffle_batch,
)
from .data import DatasetSplit, batches, derive_rng, generate_synthetic, load_directory, split
from .evaluation import PseudoMask, cam_to_mask, evaluate

log = logging.getLogger(__name__)

VARIANT_NAMES = ("baseline_cam", "no_fl", "group", "back", "full")
LOSS_HEADER = ["iteration", "epoch", "loss_total", "loss_orig", "loss_mixed", "loss_ema"]


@dataclass
class TrainRecord:
    params: dict
    state: ShuffleState
    losses: list = field(default_factory=list)
    config_hash: str = ""
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# data

def build_split(cfg: RunConfig) -> DatasetSplit:
    ds = cfg.dataset
    if ds.source == "synthetic":
        samples = generate_synthetic(ds.synth, ds.seed)
    else:
        samples = load_directory(ds.path)
        bad = [s.sample_id for s in samples
               if any(s.image.shape[1] % p or s.image.shape[2] % p for p in cfg.schedule.patch_sizes)]
        if bad:
            raise ValueError(f"images not divisible by every patch size: {', '.join(bad)}")
    return split(samples, ds.ratios, ds.seed)


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """Config for one ablation arm, derived from the base config."""
    if variant == "full":
        return cfg
    if variant == "baseline_cam":
        return with_overrides(cfg, {"schedule.enabled": False, "schedule.mode": "frozen", "eval.cam": "raw"})
    if variant == "no_fl":
        size = cfg.dataset.synth.size
        p = 32 if size >= 64 else max(1, size // 2)
        return with_overrides(cfg, {
            "schedule.mode": "frozen", "schedule.patch_sizes": (p,),
            "schedule.f_init": 0.3, "schedule.f_min": min(cfg.schedule.f_min, 0.3),
            "schedule.f_max": max(cfg.schedule.f_max, 0.3),
        })
    if variant == "group":
        return with_overrides(cfg, {"schedule.variant": "group"})
    if variant == "back":
        return with_overrides(cfg, {"schedule.mode": "back"})
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANT_NAMES}")


# ---------------------------------------------------------------------------
# training

def train(cfg: RunConfig, data: DatasetSplit | None = None) -> TrainRecord:
    """Run the curriculum training loop and return the trained parameters."""
    start = time.perf_counter()
    data = data or build_split(cfg)
    tr, sched = cfg.training, cfg.schedule
    seed = tr.seed
    if not data.train:
        raise ValueError("training split is empty")
    c = data.train[0].image.shape[0]
    k = len(data.train[0].label)
    params = cam_engine.init_params(derive_rng(seed, "init"), c, k, cfg.model.widths, cfg.model.theta_dim)
    pixels = np.stack([s.image for s in data.train])
    params["input.shift"] = pixels.mean(axis=(0, 2, 3))
    params["input.scale"] = np.maximum(pixels.std(axis=(0, 2, 3)), 1e-6)
    shuffle_rng = derive_rng(seed, "shuffle")
    state = ShuffleState.initial(sched)
    opt = None
    ema = None
    losses = []
    it = 0
    for epoch in range(tr.epochs):
        state = decay_threshold(state, sched, epoch)
        for batch in batches(data.train, tr.batch_size, seed, epoch):
            if tr.max_steps and it >= tr.max_steps:
                break
            f = state.f if sched.enabled else 0.0
            mixed = shuffle_batch(batch.images, batch.labels, state.patch_size(sched), f,
                                  shuffle_rng, sched.variant, sched.label_mode)
            res = cam_engine.train_step(params, batch, mixed, opt, tr.lr, tr.beta1, tr.beta2, tr.eps)
            params, opt = res.params, res.opt_state
            ema = res.loss_total if ema is None else tr.ema * ema + (1 - tr.ema) * res.loss_total
            state = feedback_update(state, sched, ema, it)
            losses.append((it, epoch, res.loss_total, res.loss_orig, res.loss_mixed, ema))
            it += 1
        log.info("epoch %d: T=%.4f p=%d f=%.3f loss=%.4f", epoch, state.T, state.patch_size(sched), state.f,
                 ema if ema is not None else float("nan"))
    return TrainRecord(params, state, losses, config_hash(cfg), time.perf_counter() - start)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_record(record: TrainRecord, cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    cam_engine.save_checkpoint(out / "checkpoint.ckpt", record.params, record.config_hash)
    (out / "losses.csv").write_text(f"# config_hash {record.config_hash}\n" + _csv_text(LOSS_HEADER, record.losses))
    (out / "curriculum.log").write_text(f"# config_hash {record.config_hash}\n" + format_history(record.state.history))
    (out / "timings.json").write_text(json.dumps({"train_seconds": record.seconds}))


def cmd_train(cfg: RunConfig) -> TrainRecord:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    record = train(cfg)
    write_record(record, cfg, out)
    return record


# ---------------------------------------------------------------------------
# pseudo masks

def _allowed_classes(cfg: RunConfig, sample, stack):
    seg = set(cfg.eval.classes)
    gate = cfg.eval.label_gate
    if gate == "label":
        present = {c for c, v in enumerate(sample.label) if v > 0}
    elif gate == "predicted":
        present = {c for c, v in enumerate(stack.logits) if v > 0}
    else:
        present = set(range(len(sample.label)))
    return sorted(seg & present)


def pseudo_masks(params, samples, cfg: RunConfig, cam_mode: str | None = None, chunk: int = 16):
    """Returns ``(masks, stacks)`` for ``samples`` in order."""
    mode = cam_mode or cfg.eval.cam
    masks, stacks = [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        for s, st in zip(part, cam_engine.infer_cams_batch(params, np.stack([s.image for s in part]))):
            cams = st.refined_cam if mode == "refined" else st.raw_cam
            masks.append(cam_to_mask(cams, cfg.eval.threshold, s.image.shape[1:],
                                     _allowed_classes(cfg, s, st), s.sample_id))
            stacks.append(st)
    return masks, stacks


def _scored_ids(cfg: RunConfig):
    return [0] + [c + 1 for c in cfg.eval.classes]


def write_pfm(path: Path, arr: np.ndarray) -> None:
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_pfm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    kind, dims, scale, body = raw.split(b"\n", 3)
    if kind != b"Pf":
        raise ValueError(f"{path}: only single-channel PFM is supported")
    w, h = map(int, dims.split())
    dtype = "<f4" if float(scale) < 0 else ">f4"
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w)[::-1].astype(np.float64)


def cmd_genmask(cfg: RunConfig, checkpoint=None, split_name: str | None = None,
                cam_mode: str | None = None, data: DatasetSplit | None = None) -> Path:
    """Write one PNG pseudo mask per image of a split, plus CAM dumps."""
    h = config_hash(cfg)
    out = Path(cfg.out)
    params, _ = cam_engine.load_checkpoint(checkpoint or out / "checkpoint.ckpt", expected_hash=h)
    split_name = split_name or cfg.eval.split
    mode = cam_mode or cfg.eval.cam
    samples = getattr(data or build_split(cfg), split_name)
    mask_dir = out / f"masks_{split_name}"
    cam_dir = mask_dir / "cams"
    cam_dir.mkdir(parents=True, exist_ok=True)
    masks, stacks = pseudo_masks(params, samples, cfg, mode)
    for m, st in zip(masks, stacks):
        Image.fromarray(m.mask).save(mask_dir / f"{m.sample_id}.png")
        for c in range(st.raw_cam.shape[0]):
            write_pfm(cam_dir / f"{m.sample_id}_raw_c{c}.pfm", st.raw_cam[c])
            write_pfm(cam_dir / f"{m.sample_id}_refined_c{c}.pfm", st.refined_cam[c])
    manifest = {
        "config_hash": h, "split": split_name, "cam": mode, "threshold": cfg.eval.threshold,
        "samples": [m.sample_id for m in masks],
    }
    (mask_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    log.info("wrote %d masks to %s", len(masks), mask_dir)
    return mask_dir


# ---------------------------------------------------------------------------
# evaluation

def _load_gt_dir(gt_dir: Path, ids):
    gts, missing = {}, []
    for sid in ids:
        p = gt_dir / f"{sid}.png"
        if p.exists():
            with Image.open(p) as im:
                gts[sid] = np.asarray(im.convert("L")).copy()
        else:
            missing.append(str(p))
    return gts, missing


def cmd_eval(cfg: RunConfig, mask_dir=None, gt_dir=None, tag: str = "", data: DatasetSplit | None = None):
    """Score a mask directory, write report files and extend comparison.csv."""
    out = Path(cfg.out)
    mask_dir = Path(mask_dir or out / f"masks_{cfg.eval.split}")
    manifest = json.loads((mask_dir / "manifest.json").read_text())
    h = config_hash(cfg)
    if manifest["config_hash"] != h:
        raise ValueError(f"mask directory hash {manifest['config_hash']} does not match config {h}")
    ids = manifest["samples"]
    missing = [str(mask_dir / f"{sid}.png") for sid in ids if not (mask_dir / f"{sid}.png").exists()]
    if gt_dir is not None:
        gts, gt_missing = _load_gt_dir(Path(gt_dir), ids)
    else:
        pool = getattr(data or build_split(cfg), manifest["split"])
        gts = {s.sample_id: s.gt_mask for s in pool if s.gt_mask is not None}
        gt_missing = [f"ground truth for {sid}" for sid in ids if sid not in gts]
    if missing or gt_missing:
        raise FileNotFoundError("missing inputs:\n  " + "\n  ".join(missing + gt_missing))
    masks = []
    for sid in ids:
        with Image.open(mask_dir / f"{sid}.png") as im:
            masks.append(PseudoMask(np.asarray(im).copy(), sid, manifest["threshold"]))
    report = evaluate(masks, gts, _scored_ids(cfg), cfg.eval.averaging, config_hash=h, seed=cfg.training.seed)
    report.meta.update(split=manifest["split"], cam=manifest["cam"], threshold=manifest["threshold"])
    (mask_dir / "report.txt").write_text(report.to_text())
    (mask_dir / "metrics.csv").write_text(report.to_csv())
    comp = out / "comparison.csv"
    new = not comp.exists()
    with open(comp, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["tag", "config_hash", "seed", "split", "cam", "samples", "average_dice", "average_iou"])
        w.writerow([tag or manifest["cam"], h, cfg.training.seed, manifest["split"], manifest["cam"],
                    report.num_samples, repr(report.average_dice), repr(report.average_iou)])
    return report


# ---------------------------------------------------------------------------
# ablation

def run_variant(cfg: RunConfig, variant: str, seed: int, data: DatasetSplit):
    """Train one (variant, seed) arm and score it on the eval split."""
    vcfg = with_overrides(variant_config(cfg, variant), {"training.seed": seed})
    record = train(vcfg, data)
    masks, _ = pseudo_masks(record.params, getattr(data, vcfg.eval.split), vcfg)
    gts = {s.sample_id: s.gt_mask for s in getattr(data, vcfg.eval.split)}
    report = evaluate(masks, gts, _scored_ids(vcfg), vcfg.eval.averaging,
                      config_hash=config_hash(vcfg), seed=seed)
    return vcfg, record, report


def _run_variant_job(args):
    cfg, variant, seed, data = args
    vcfg, record, report = run_variant(cfg, variant, seed, data)
    return variant, seed, vcfg, record, report


def cmd_ablate(cfg: RunConfig, variants=None, seeds=None, data: DatasetSplit | None = None):
    """Train and score every (variant, seed) pair on a shared data split.

    Writes ``ablation.csv`` (one row per run) and ``ablation_summary.csv``
    (per-variant medians) under ``cfg.out`` and returns the summary rows.
    """
    variants = tuple(variants or cfg.ablate.variants)
    seeds = tuple(cfg.ablate.seeds if seeds is None else seeds)
    unknown = [v for v in variants if v not in VARIANT_NAMES]
    if unknown:
        raise ValueError(f"unknown variant(s) {unknown}; expected from {VARIANT_NAMES}")
    if len(variants) < 2:
        raise ValueError("an ablation needs at least two variants")
    data = data or build_split(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))

    jobs = [(cfg, v, s, data) for v in variants for s in seeds]
    if cfg.ablate.workers > 1:
        with ProcessPoolExecutor(cfg.ablate.workers) as pool:
            results = list(pool.map(_run_variant_job, jobs))
    else:
        results = [_run_variant_job(j) for j in jobs]

    ids = _scored_ids(cfg)
    rows = []
    by_variant: dict = {}
    for variant, seed, vcfg, record, report in results:
        vdir = out / "variants" / variant
        vdir.mkdir(parents=True, exist_ok=True)
        (vdir / "config.txt").write_text(format_config(vcfg))
        rdir = vdir / f"seed_{seed}"
        rdir.mkdir(exist_ok=True)
        tag = f"# config_hash {record.config_hash}\n"
        (rdir / "losses.csv").write_text(tag + _csv_text(LOSS_HEADER, record.losses))
        (rdir / "curriculum.log").write_text(tag + format_history(record.state.history))
        per = [report.per_class[i] for i in ids]
        rows.append([variant, seed, record.config_hash, report.average_dice, report.average_iou]
                    + [s.dice for s in per] + [s.iou for s in per])
        by_variant.setdefault(variant, []).append(report)

    header = ["variant", "seed", "config_hash", "average_dice", "average_iou"] + [f"dice_{i}" for i in ids] + [f"iou_{i}" for i in ids]
    (out / "ablation.csv").write_text(_csv_text(header, rows))
    summary = [
        [v, len(reps), statistics.median(r.average_dice for r in reps), statistics.median(r.average_iou for r in reps)]
        for v, reps in by_variant.items()
    ]
    (out / "ablation_summary.csv").write_text(
        f"# config_hash {config_hash(cfg)}\n"
        + _csv_text(["variant", "runs", "median_dice", "median_iou"], summary)
    )
    return summary


# ---------------------------------------------------------------------------
# reports

def _strip_comments(text: str) -> str:
    return "".join(line + "\n" for line in text.splitlines() if not line.startswith("#"))


def cmd_report(record_dir, composites: int = 0, cfg: RunConfig | None = None) -> list:
    """Emit plot-ready CSVs from a record directory; returns written paths.

    Missing pieces are skipped with a warning rather than failing the whole
    report.
    """
    rd = Path(record_dir)
    written = []
    plots = rd / "report"
    plots.mkdir(exist_ok=True)

    log_path = rd / "curriculum.log"
    if log_path.exists():
        hist = parse_history(log_path.read_text())
        rows = [(h.iteration, h.loss, h.threshold, h.patch_size, h.ratio, h.transition) for h in hist]
        p = plots / "trajectory.csv"
        p.write_text(_csv_text(["iteration", "loss", "T", "p", "f", "transition"], rows))
        written.append(p)
    else:
        log.warning("%s missing; no trajectory emitted", log_path)

    loss_path = rd / "losses.csv"
    if loss_path.exists():
        p = plots / "loss_vs_iteration.csv"
        p.write_text(_strip_comments(loss_path.read_text()))
        written.append(p)
    else:
        log.warning("%s missing; no loss curve emitted", loss_path)

    abl = rd / "ablation_summary.csv"
    if abl.exists():
        p = plots / "variant_table.csv"
        p.write_text(_strip_comments(abl.read_text()))
        written.append(p)

    if composites and cfg is not None:
        mask_dir = rd / f"masks_{cfg.eval.split}"
        if mask_dir.exists():
            data = build_split(cfg)
            for s in getattr(data, cfg.eval.split)[:composites]:
                mp = mask_dir / f"{s.sample_id}.png"
                if not mp.exists():
                    log.warning("no mask for %s", s.sample_id)
                    continue
                with Image.open(mp) as im:
                    pred = np.asarray(im)
                gt = s.gt_mask if s.gt_mask is not None else np.zeros_like(pred)
                img = np.round(s.image.mean(axis=0) * 255).astype(np.uint8)
                scale = 255 // max(1, len(s.label))
                strip = np.concatenate([img, (gt * scale).astype(np.uint8), (pred * scale).astype(np.uint8)], axis=1)
                p = plots / f"composite_{s.sample_id}.png"
                Image.fromarray(strip).save(p)
                written.append(p)
        else:
            log.warning("%s missing; no composites emitted", mask_dir)
    return written
