"""Image-level labelled datasets: synthetic cell images, directory loading,
7:1:2 splitting and drop-last batching."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")


class DatasetError(ValueError):
    pass


def derive_rng(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named stream of a master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode()), *extra]))


@dataclass
class Sample:
    image: np.ndarray            # (C, H, W), values in [0, 1]
    label: np.ndarray            # (K,) class indicators
    sample_id: str
    gt_mask: np.ndarray | None = None   # (H, W) uint8, 0 = background, class c -> c + 1


@dataclass
class Batch:
    """Training view of a group of samples.  Deliberately carries no masks."""
    images: np.ndarray   # (N, C, H, W)
    labels: np.ndarray   # (N, K)
    ids: tuple

    @classmethod
    def from_samples(cls, samples):
        return cls(
            images=np.stack([s.image for s in samples]),
            labels=np.stack([s.label for s in samples]).astype(np.float64),
            ids=tuple(s.sample_id for s in samples),
        )


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    num_samples: int = 286
    abnormal_prob: float = 0.5
    normal_count: tuple = (12, 24)
    normal_radius: tuple = (2.0, 3.5)
    abnormal_count: tuple = (1, 1)
    abnormal_radius: tuple = (14.0, 19.0)
    eccentricity: tuple = (0.0, 0.4)
    irregularity: float = 0.25
    background: float = 0.85
    normal_intensity: float = 0.55
    abnormal_intensity: float = 0.77
    core_intensity: float = 0.2
    core_scale: float = 0.25
    noise: float = 0.04
    max_patch: int = 32


# ---------------------------------------------------------------------------
# synthetic generator

_PHI = np.linspace(0.0, 2 * np.pi, 1440, endpoint=False)


class _Blob:
    """Star-shaped region whose polar area is exactly pi * radius**2."""

    def __init__(self, rng, radius, ecc_range, irregularity):
        self.radius = radius
        ecc = rng.uniform(*ecc_range)
        self.angle = rng.uniform(0, np.pi)
        ks = np.arange(2, 5)
        self.amps = rng.uniform(-irregularity, irregularity, size=3) / (ks - 1)
        self.phases = rng.uniform(0, 2 * np.pi, size=3)
        self.ecc = ecc
        s = self._shape(_PHI)
        self.scale = radius / math.sqrt(np.mean(s * s))
        self.extent = float(self.scale * s.max())

    def _shape(self, phi):
        b = math.sqrt(1 - self.ecc ** 2)
        ell = b / np.sqrt(1 - (self.ecc * np.cos(phi - self.angle)) ** 2)
        harm = 1 + sum(a * np.cos(k * phi + p) for k, a, p in zip(range(2, 5), self.amps, self.phases))
        return ell * np.maximum(harm, 0.2)

    def rasterize(self, cy, cx, yy, xx):
        dy, dx = yy - cy, xx - cx
        r = np.hypot(dy, dx)
        return r <= self.scale * self._shape(np.arctan2(dy, dx))


def _disc(cy, cx, r, yy, xx):
    return np.hypot(yy - cy, xx - cx) <= r


def _layout(rng, extents, size, restarts=50, tries=200):
    """Centres for non-overlapping discs of the given extents, fully inside."""
    for _ in range(restarts):
        placed = []
        for ext in extents:
            lo, hi = ext + 1.0, size - ext - 1.0
            if hi <= lo:
                raise DatasetError(f"blob extent {ext:.1f} does not fit a {size}px image")
            for _ in range(tries):
                cy, cx = rng.uniform(lo, hi, size=2)
                if all(math.hypot(cy - py, cx - px) > ext + pe + 1.0 for py, px, pe in placed):
                    placed.append((cy, cx, ext))
                    break
            else:
                break
        if len(placed) == len(extents):
            return [(cy, cx) for cy, cx, _ in placed]
    raise DatasetError("could not place non-overlapping abnormal blobs; lower abnormal_count or radius")


def _make_image(cfg: SynthConfig, rng):
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    img = cfg.background + 0.18 * gaussian_filter(rng.standard_normal((n, n)), 3.0)
    mask = np.zeros((n, n), dtype=np.uint8)

    for _ in range(rng.integers(cfg.normal_count[0], cfg.normal_count[1] + 1)):
        r = rng.uniform(*cfg.normal_radius)
        cy, cx = rng.uniform(0, n, size=2)
        img[_disc(cy, cx, r, yy, xx)] = cfg.normal_intensity + rng.normal(0, 0.03)

    abnormal = rng.random() < cfg.abnormal_prob
    count = rng.integers(cfg.abnormal_count[0], cfg.abnormal_count[1] + 1) if abnormal else 0
    texture = gaussian_filter(rng.standard_normal((n, n)), 1.0)
    blobs = [_Blob(rng, rng.uniform(*cfg.abnormal_radius), cfg.eccentricity, cfg.irregularity) for _ in range(count)]
    for blob, (cy, cx) in zip(blobs, _layout(rng, [b.extent for b in blobs], n)):
        inside = blob.rasterize(cy, cx, yy, xx)
        img[inside] = cfg.abnormal_intensity + 0.12 * texture[inside]
        off = rng.uniform(-0.3, 0.3, size=2) * blob.radius
        core = _disc(cy + off[0], cx + off[1], cfg.core_scale * blob.radius, yy, xx) & inside
        img[core] = cfg.core_intensity
        mask[inside] = 2

    img = img + rng.normal(0, cfg.noise, size=img.shape)
    # quantize to 8-bit levels so the directory format round-trips exactly
    img = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    label = np.array([0.0, 1.0]) if count > 0 else np.array([1.0, 0.0])
    return img, label, mask


def generate_synthetic(cfg: SynthConfig, seed: int) -> list[Sample]:
    """Deterministic two-class dataset of grayscale cell images.

    Class 0 images hold only small round "normal" cells on a textured
    background.  Class 1 images additionally hold large irregular blobs with a
    dark core; only those blob pixels are foreground (id 2) in ``gt_mask``.
    """
    if cfg.size % cfg.max_patch:
        raise DatasetError(f"image size {cfg.size} is not a multiple of the largest patch {cfg.max_patch}")
    rng = derive_rng(seed, "data")
    samples = []
    for i in range(cfg.num_samples):
        img, label, mask = _make_image(cfg, rng)
        samples.append(Sample(img[None].astype(np.float64) / 255.0, label, f"synth_{i:05d}", mask))
    return samples


# ---------------------------------------------------------------------------
# directory format

def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "P", "1", "I;16"):
                arr = np.asarray(im.convert("L"))[None]
            else:
                arr = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def load_directory(path) -> list[Sample]:
    """Load ``images/``, ``labels.csv`` and optional ``masks/`` under ``path``."""
    root = Path(path)
    img_dir = root / "images"
    files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if img_dir.is_dir() else []
    if not files:
        log.warning("no images found under %s (0 samples)", root)
        return []
    labels = {}
    with open(root / "labels.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "filename":
            raise DatasetError(f"labels.csv header must start with 'filename', got {header}")
        for row in reader:
            if row:
                labels[row[0]] = np.array([float(v) for v in row[1:]])
    mask_dir = root / "masks"
    samples = []
    for f in files:
        if f.name not in labels:
            raise DatasetError(f"no label row for {f.name}")
        image = _read_image(f)
        gt = None
        mpath = mask_dir / (f.stem + ".png")
        if mpath.exists():
            try:
                with Image.open(mpath) as im:
                    gt = np.asarray(im.convert("L")).copy()
            except (OSError, UnidentifiedImageError) as exc:
                raise DatasetError(f"unreadable mask {mpath}: {exc}") from exc
            if gt.shape != image.shape[1:]:
                raise DatasetError(f"mask {mpath.name} is {gt.shape}, image is {image.shape[1:]}")
        samples.append(Sample(image, labels[f.name], f.stem, gt))
    return samples


def write_directory(samples, path) -> None:
    """Write samples in the layout read by :func:`load_directory` (8-bit PNG)."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if any(s.gt_mask is not None for s in samples):
        (root / "masks").mkdir(exist_ok=True)
    k = len(samples[0].label) if samples else 0
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename"] + [f"class_{c}" for c in range(k)])
        for s in samples:
            name = s.sample_id + ".png"
            pix = np.round(s.image * 255).astype(np.uint8)
            Image.fromarray(pix[0] if pix.shape[0] == 1 else pix.transpose(1, 2, 0)).save(root / "images" / name)
            if s.gt_mask is not None:
                Image.fromarray(s.gt_mask.astype(np.uint8)).save(root / "masks" / name)
            w.writerow([name] + [f"{v:g}" for v in s.label])


# ---------------------------------------------------------------------------
# splitting and batching

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(samples, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/val/test slices.

    Val and test get ``round(n * ratio)`` samples (at least one each); the
    remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(samples)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    n_val = max(1, _round_half_up(n * ratios[1]))
    n_test = max(1, _round_half_up(n * ratios[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n} samples leave no training data at ratios {ratios}")
    order = derive_rng(seed, "split").permutation(n)
    picked = [samples[i] for i in order]
    return DatasetSplit(picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:], seed)


def batches(samples, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Per-epoch reshuffled full batches; the trailing partial batch is dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 for cross-batch shuffling, got {batch_size}")
    order = derive_rng(seed, "batches", epoch).permutation(len(samples))
    full = len(samples) // batch_size
    return [
        Batch.from_samples([samples[j] for j in order[b * batch_size:(b + 1) * batch_size]])
        for b in range(full)
    ]
