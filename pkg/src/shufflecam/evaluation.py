"""Pseudo masks from CAMs, and Dice / IoU scoring."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PseudoMask:
    mask: np.ndarray   # (H, W) uint8 class ids, 0 = background, class c -> c + 1
    sample_id: str
    threshold: float


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-d array (edges clamped)."""
    h, w = img.shape

    def weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        m = np.zeros((n_out, n_in))
        np.add.at(m, (np.arange(n_out), lo), 1 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
        return m

    return weights(h, out_h) @ img @ weights(w, out_w).T


def normalize_cam(cam: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1].

    A flat map carries no localisation: it becomes all ones if its value is
    positive and all zeros otherwise.
    """
    lo, hi = cam.min(), cam.max()
    if hi == lo:
        return np.full(cam.shape, 1.0 if hi > 0 else 0.0)
    return (cam - lo) / (hi - lo)


def cam_to_mask(cams: np.ndarray, threshold: float, image_size, classes=None, sample_id: str = "") -> PseudoMask:
    """Threshold-and-argmax pseudo mask from per-class CAMs (K, h, w).

    Each class map is normalised over the image and upsampled to
    ``image_size``; a pixel takes the highest-scoring class among those
    at or above ``threshold`` (lowest id on ties), else background.
    ``classes`` restricts which classes may claim pixels.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    h, w = image_size
    k = cams.shape[0]
    allowed = range(k) if classes is None else classes
    scores = np.full((k, h, w), -np.inf)
    for c in allowed:
        s = bilinear_resize(normalize_cam(cams[c]), h, w)
        scores[c] = np.where(s >= threshold, s, -np.inf)
    best = np.argmax(scores, axis=0)   # first max wins -> lowest class id
    hit = np.isfinite(scores.max(axis=0))
    mask = np.where(hit, best + 1, 0).astype(np.uint8)
    return PseudoMask(mask, sample_id, threshold)


def _counts(pred, gt):
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def dice_from_counts(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def iou_from_counts(tp, fp, fn) -> float:
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def dice(pred, gt) -> float:
    return dice_from_counts(*_counts(pred, gt))


def iou(pred, gt) -> float:
    return iou_from_counts(*_counts(pred, gt))


@dataclass
class ClassScore:
    dice: float
    iou: float
    tp: int
    fp: int
    fn: int

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0


@dataclass
class MaskReport:
    per_class: dict                 # mask id -> ClassScore
    average_dice: float             # over foreground classes present
    average_iou: float
    average_dice_all: float         # over every scored id incl. background
    average_iou_all: float
    num_samples: int
    config_hash: str = ""
    seed: int = 0
    averaging: str = "micro"
    meta: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"config_hash: {self.config_hash}",
            f"seed: {self.seed}",
            f"averaging: {self.averaging}",
            f"num_samples: {self.num_samples}",
            f"average_dice: {self.average_dice!r}",
            f"average_iou: {self.average_iou!r}",
            f"average_dice_all: {self.average_dice_all!r}",
            f"average_iou_all: {self.average_iou_all!r}",
        ]
        for k, v in sorted(self.meta.items()):
            lines.append(f"{k}: {v}")
        lines.append("classes:")
        for cid, s in sorted(self.per_class.items()):
            lines.append(f"  {cid}:")
            lines += [f"    dice: {s.dice!r}", f"    iou: {s.iou!r}", f"    tp: {s.tp}", f"    fp: {s.fp}", f"    fn: {s.fn}"]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice", "iou"])
        for cid, s in sorted(self.per_class.items()):
            w.writerow([cid, repr(s.dice), repr(s.iou)])
        return buf.getvalue()


def evaluate(masks, gts: dict, class_ids, averaging: str = "micro", background: int = 0,
             config_hash: str = "", seed: int = 0) -> MaskReport:
    """Score pseudo masks against ground truth.

    ``micro`` pools TP/FP/FN over the dataset per class; ``macro`` averages
    per-image scores over images where the class appears in either mask.
    """
    missing = [m.sample_id for m in masks if m.sample_id not in gts]
    if missing:
        raise ValueError(f"no ground truth for: {', '.join(missing)}")
    if averaging not in ("micro", "macro"):
        raise ValueError(f"averaging must be 'micro' or 'macro', got {averaging!r}")
    per_class = {}
    for cid in class_ids:
        counts = [_counts(m.mask == cid, gts[m.sample_id] == cid) for m in masks]
        tp, fp, fn = (sum(c[i] for c in counts) for i in range(3))
        if averaging == "micro":
            d, j = dice_from_counts(tp, fp, fn), iou_from_counts(tp, fp, fn)
        else:
            present = [c for c in counts if sum(c)]
            d = float(np.mean([dice_from_counts(*c) for c in present])) if present else 1.0
            j = float(np.mean([iou_from_counts(*c) for c in present])) if present else 1.0
        per_class[cid] = ClassScore(d, j, tp, fp, fn)

    fg = [s for cid, s in per_class.items() if cid != background and s.present]
    everything = [s for s in per_class.values() if s.present]

    def mean(xs):
        return float(np.mean(xs)) if xs else 1.0

    return MaskReport(
        per_class=per_class,
        average_dice=mean([s.dice for s in fg]),
        average_iou=mean([s.iou for s in fg]),
        average_dice_all=mean([s.dice for s in everything]),
        average_iou_all=mean([s.iou for s in everything]),
        num_samples=len(masks),
        config_hash=config_hash,
        seed=seed,
        averaging=averaging,
    )
