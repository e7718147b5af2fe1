"""Cross-batch in-place patch shuffling under a loss-driven curriculum.

Images are cut into a grid of p x p patches.  A batch-global set of grid
positions (the relation positions) is chosen; at each of them the patches of
the batch are permuted among the images while staying at the same grid
position.  All other positions keep their own patch.  Labels are blended by
how many patches each source image contributed.

The curriculum walks a decreasing list of patch sizes and grows the shuffle
ratio by a factor ``alpha`` every time the (smoothed) training loss drops
below a threshold that itself decays once per epoch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

MODES = ("standard", "back", "frozen")
VARIANTS = ("independent", "group")


@dataclass(frozen=True)
class ShuffleSchedule:
    patch_sizes: tuple = (32, 16, 8)
    alpha: float = 1.3
    f_init: float = 0.1
    f_min: float = 0.05
    f_max: float = 0.7
    t_init: float = math.log(2)
    t_decay: float = 0.85
    mode: str = "standard"

    def __post_init__(self):
        ps = tuple(self.patch_sizes)
        if not ps or any(a <= b for a, b in zip(ps, ps[1:])) or ps[-1] < 1:
            raise ValueError(f"patch_sizes must be strictly decreasing positive ints, got {ps}")
        if not 0 <= self.f_min <= self.f_init <= self.f_max <= 1:
            raise ValueError(
                f"need 0 <= f_min <= f_init <= f_max <= 1, got {self.f_min}, {self.f_init}, {self.f_max}"
            )
        if self.alpha <= 1:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")
        if self.t_init <= 0 or not 0 < self.t_decay <= 1:
            raise ValueError(f"need t_init > 0 and t_decay in (0, 1], got {self.t_init}, {self.t_decay}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    loss: float
    threshold: float
    patch_size: int
    ratio: float
    transition: str   # "advance", "back", "hold"


@dataclass(frozen=True)
class ShuffleState:
    size_index: int
    f: float
    T: float
    history: tuple = ()

    @classmethod
    def initial(cls, schedule: ShuffleSchedule) -> "ShuffleState":
        return cls(size_index=0, f=schedule.f_init, T=schedule.t_init)

    def patch_size(self, schedule: ShuffleSchedule) -> int:
        return schedule.patch_sizes[self.size_index]


def feedback_update(state: ShuffleState, schedule: ShuffleSchedule, loss: float, iteration: int) -> ShuffleState:
    """Apply one curriculum decision for ``loss`` and log it.

    A loss strictly below the threshold moves to the next smaller patch size
    and multiplies the ratio by ``alpha`` (clamped to ``f_max``).  Otherwise
    the state holds, except in ``back`` mode where it retreats one step.
    ``frozen`` never moves.
    """
    if not math.isfinite(loss) or loss < 0:
        raise ValueError(f"loss must be finite and non-negative, got {loss}")
    idx, f = state.size_index, state.f
    last = len(schedule.patch_sizes) - 1
    if schedule.mode == "frozen":
        transition = "hold"
    elif loss < state.T:
        idx, f = min(idx + 1, last), min(f * schedule.alpha, schedule.f_max)
        transition = "advance"
    elif schedule.mode == "back":
        idx, f = max(idx - 1, 0), max(f / schedule.alpha, schedule.f_min)
        transition = "back"
    else:
        transition = "hold"
    entry = HistoryEntry(iteration, float(loss), state.T, schedule.patch_sizes[idx], f, transition)
    return replace(state, size_index=idx, f=f, history=state.history + (entry,))


def decay_threshold(state: ShuffleState, schedule: ShuffleSchedule, epoch: int) -> ShuffleState:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return replace(state, T=schedule.t_init * schedule.t_decay ** epoch)


def format_history(history) -> str:
    """Line-oriented log: ``iteration loss T p f transition``."""
    lines = ["# iteration loss T p f transition"]
    lines += [f"{h.iteration} {h.loss!r} {h.threshold!r} {h.patch_size} {h.ratio!r} {h.transition}" for h in history]
    return "\n".join(lines) + "\n"


def parse_history(text: str) -> tuple:
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        it, loss, t, p, f, tr = line.split()
        out.append(HistoryEntry(int(it), float(loss), float(t), int(p), float(f), tr))
    return tuple(out)


# ---------------------------------------------------------------------------
# patch shuffling

def partition(image: np.ndarray, p: int) -> np.ndarray:
    """Split (C,H,W) into a row-major grid of shape (H/p, W/p, C, p, p)."""
    c, h, w = image.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide image extent {h}x{w}")
    return image.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)


def assemble(grid: np.ndarray) -> np.ndarray:
    gh, gw, c, p, _ = grid.shape
    return grid.transpose(2, 0, 3, 1, 4).reshape(c, gh * p, gw * p)


def relation_count(n: int, f: float) -> int:
    # round half up; m = [n * f]
    return min(n, int(math.floor(n * f + 0.5)))


def select_relation_positions(n: int, f: float, rng: np.random.Generator):
    """Return ``(relation, fixed)`` sorted position arrays over ``n`` grid cells."""
    if not 0 <= f <= 1:
        raise ValueError(f"shuffle ratio must be in [0, 1], got {f}")
    m = relation_count(n, f)
    rel = np.sort(rng.choice(n, size=m, replace=False)) if m else np.empty(0, dtype=np.int64)
    fixed = np.setdiff1d(np.arange(n), rel)
    return rel, fixed


@dataclass
class MixedBatch:
    images: np.ndarray        # (N, C, H, W)
    soft_labels: np.ndarray   # (N, K), rows sum to 1
    targets: np.ndarray       # (N, K) blended raw labels, the training targets
    provenance: np.ndarray    # (N, H/p, W/p) source image index per patch
    relation: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    patch_size: int = 0


def shuffle_batch(images: np.ndarray, labels: np.ndarray, p: int, f: float, rng: np.random.Generator,
                  variant: str = "independent", label_mode: str = "realized") -> MixedBatch:
    """Mix a batch by permuting patches across images at relation positions.

    ``independent`` draws a fresh permutation of the batch for every relation
    position; ``group`` draws one permutation and reuses it for all of them,
    so an image's relation patches all come from a single source.

    ``label_mode="realized"`` blends labels by the actual patch counts each
    source contributed; ``"nominal"`` weights the own label by ``1 - f`` and
    spreads ``f`` over the sources of the relation patches.
    """
    n_img, c, h, w = images.shape
    if n_img < 2:
        raise ValueError(f"cross-batch shuffle needs at least 2 images, got {n_img}")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if p < 1 or h % p or w % p:
        raise ValueError(f"patch size {p} does not divide image extent {h}x{w}")
    gh, gw = h // p, w // p
    n = gh * gw
    rel, _ = select_relation_positions(n, f, rng)

    prov = np.repeat(np.arange(n_img)[:, None], n, axis=1)
    if len(rel):
        if variant == "group":
            perms = np.repeat(rng.permutation(n_img)[:, None], len(rel), axis=1)
        else:
            perms = np.stack([rng.permutation(n_img) for _ in rel], axis=1)
        prov[:, rel] = perms

    tiles = images.reshape(n_img, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n_img, n, c, p, p)
    mixed = tiles[prov, np.arange(n)[None, :]]
    mixed = mixed.reshape(n_img, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n_img, c, h, w)

    counts = np.zeros((n_img, n_img))
    np.add.at(counts, (np.repeat(np.arange(n_img), n), prov.ravel()), 1.0)
    if label_mode == "realized":
        weights = counts / n
    elif label_mode == "nominal":
        rel_counts = np.zeros((n_img, n_img))
        if len(rel):
            np.add.at(rel_counts, (np.repeat(np.arange(n_img), len(rel)), prov[:, rel].ravel()), 1.0)
            weights = (1 - f) * np.eye(n_img) + f * rel_counts / len(rel)
        else:
            weights = np.eye(n_img)
    else:
        raise ValueError(f"label_mode must be 'realized' or 'nominal', got {label_mode!r}")

    labels = np.asarray(labels, dtype=np.float64)
    dist = labels / labels.sum(axis=1, keepdims=True)
    return MixedBatch(
        images=mixed,
        soft_labels=weights @ dist,
        targets=weights @ labels,
        provenance=prov.reshape(n_img, gh, gw),
        relation=rel,
        patch_size=p,
    )
