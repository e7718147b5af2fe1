"""Small CNN classifier with a CAM head and pixel-correlation refinement.

Backbone: three blocks of 3x3 conv -> ReLU -> 2x2 average pool, then a
class head.  The head is a linear classifier on globally pooled block-3
features; applied as a 1x1 convolution before pooling it yields one
class-feature map per class, which is the CAM.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

CKPT_MAGIC = b"SHUFFLECAM-CKPT"
CKPT_VERSION = 1
TRAINABLE = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc.w", "fc.b")
AFFINITY_EPS = 1e-8


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = tuple(batch_ids)


def init_params(rng: np.random.Generator, in_channels: int = 1, num_classes: int = 2,
                widths=(16, 32, 64), theta_dim: int = 32) -> dict:
    """Kaiming fan-in initialisation; biases start at zero.

    ``input.shift`` / ``input.scale`` standardise the input per channel and
    start as the identity; they are set from data, never trained.
    """
    params = {"input.shift": np.zeros(in_channels), "input.scale": np.ones(in_channels)}
    c_in = in_channels
    for i, c_out in enumerate(widths, start=1):
        fan_in = c_in * 9
        params[f"conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
        params[f"conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    params["fc.w"] = rng.normal(0.0, np.sqrt(1.0 / c_in), size=(num_classes, c_in))
    params["fc.b"] = np.zeros(num_classes)
    hidden_dim = widths[1] + widths[2]
    params["theta"] = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=(theta_dim, hidden_dim))
    return params


def _forward(params, x):
    if x.ndim != 4 or x.shape[2] % 8 or x.shape[3] % 8:
        raise ValueError(f"images must be (N,C,H,W) with H and W divisible by 8, got {x.shape}")
    cache = {"x": x}
    a = (x - params["input.shift"][:, None, None]) / params["input.scale"][:, None, None]
    for i in (1, 2, 3):
        z, cols = T.conv2d_with_cols(a, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=1, pad=1)
        cache[f"in{i}"], cache[f"z{i}"], cache[f"cols{i}"] = a, z, cols
        a = T.avg_pool2(T.relu(z))
        cache[f"a{i}"] = a
    pooled = T.global_avg_pool(a)
    cache["pooled"] = pooled
    logits = T.linear(pooled, params["fc.w"], params["fc.b"])
    return logits, cache


def forward_classify(params: dict, images: np.ndarray):
    """Returns ``(logits (N,K), class_features (N,K,h,w), hidden (N,D,h,w))``.

    ``hidden`` concatenates block-2 activations (pooled once more to the CAM
    resolution) with block-3 activations, see :func:`aggregate_hidden`.
    """
    logits, cache = _forward(params, images)
    a3 = cache["a3"]
    class_features = np.einsum("kd,ndhw->nkhw", params["fc.w"], a3) + params["fc.b"][None, :, None, None]
    return logits, class_features, aggregate_hidden(cache["a2"], a3)


def aggregate_hidden(a2: np.ndarray, a3: np.ndarray) -> np.ndarray:
    """Concatenate block-2 (pooled to block-3 size) and block-3 activations.

    Each channel is then standardised over the pixels of its own image.  ReLU
    activations are all non-negative, so raw cosines sit close to 1 for every
    pixel pair; centring lets dissimilar pixels reach zero affinity.
    """
    x = np.concatenate([T.avg_pool2(a2), a3], axis=1)
    mu = x.mean(axis=(2, 3), keepdims=True)
    sd = x.std(axis=(2, 3), keepdims=True)
    return (x - mu) / np.maximum(sd, AFFINITY_EPS)


def _backward(params, cache, grad_logits):
    grads = {}
    d_pooled, grads["fc.w"], grads["fc.b"] = T.linear_backward(cache["pooled"], params["fc.w"], grad_logits)
    da = T.global_avg_pool_backward(cache["a3"].shape, d_pooled)
    for i in (3, 2, 1):
        dz = T.relu_backward(cache[f"z{i}"], T.avg_pool2_backward(da))
        da, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = T.conv2d_backward(
            cache[f"in{i}"], params[f"conv{i}.w"], dz, stride=1, pad=1,
            cols=cache[f"cols{i}"], need_input=i > 1,
        )
    return grads


def loss_and_grads(params, orig_images, orig_targets, mixed_images, mixed_targets):
    """Summed soft-margin loss on the original and mixed halves, with grads."""
    n = orig_images.shape[0]
    if mixed_images.shape != orig_images.shape:
        raise ValueError(f"original {orig_images.shape} and mixed {mixed_images.shape} batches differ")
    if np.array_equal(orig_images, mixed_images) and np.array_equal(orig_targets, mixed_targets):
        # identical twin: one pass, doubled gradient
        logits, cache = _forward(params, orig_images)
        loss, g = T.multilabel_soft_margin_loss(logits, orig_targets)
        return 2 * loss, loss, loss, _backward(params, cache, 2 * g)
    logits, cache = _forward(params, np.concatenate([orig_images, mixed_images]))
    loss_o, g_o = T.multilabel_soft_margin_loss(logits[:n], orig_targets)
    loss_m, g_m = T.multilabel_soft_margin_loss(logits[n:], mixed_targets)
    grads = _backward(params, cache, np.concatenate([g_o, g_m]))
    return loss_o + loss_m, loss_o, loss_m, grads


@dataclass
class StepResult:
    params: dict
    opt_state: T.AdamState
    loss_total: float
    loss_orig: float
    loss_mixed: float


def train_step(params, orig_batch, mixed_batch, opt_state, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> StepResult:
    """One Adam step on the original batch plus its shuffled twin.

    ``orig_batch`` is a :class:`~shufflecam.data.Batch` (hard labels) and
    ``mixed_batch`` a :class:`~shufflecam.curriculum.MixedBatch` (soft
    targets).  ``theta`` is not trained.
    """
    total, lo, lm, grads = loss_and_grads(
        params, orig_batch.images, orig_batch.labels, mixed_batch.images, mixed_batch.targets
    )
    if not np.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss (orig={lo}, mixed={lm}) on batch {list(orig_batch.ids)}", orig_batch.ids
        )
    new_params, new_state = T.adam_step(params, grads, opt_state, lr, beta1, beta2, eps)
    return StepResult(new_params, new_state, total, lo, lm)


def cam_extract(class_features: np.ndarray, c: int) -> np.ndarray:
    if not 0 <= c < class_features.shape[0]:
        raise ValueError(f"class {c} out of range for {class_features.shape[0]} classes")
    return class_features[c]


def pcm_affinity(X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """ReLU'd cosine similarity between embedded pixels; returns (hw, hw)."""
    d = X.shape[0]
    if theta.shape[1] != d:
        raise ValueError(f"theta {theta.shape} cannot embed {d}-channel features")
    z = theta @ X.reshape(d, -1)
    z = z / np.maximum(np.linalg.norm(z, axis=0), AFFINITY_EPS)
    return np.maximum(z.T @ z, 0.0)


def pcm_refine(Y: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Replace every pixel's CAM by the affinity-weighted mean of ReLU(Y)."""
    k, h, w = Y.shape
    if A.shape != (h * w, h * w):
        raise ValueError(f"affinity {A.shape} does not match a {h}x{w} CAM")
    if np.any(A < 0):
        raise ValueError("affinity must be non-negative")
    rows = A.sum(axis=1, keepdims=True)
    empty = rows[:, 0] == 0
    norm = np.divide(A, rows, out=np.zeros_like(A), where=rows > 0)
    norm[empty, empty] = 1.0
    y = T.relu(Y).reshape(k, -1)
    out = y @ norm.T
    # exact convex combination; clip away rounding outside the hull
    out = np.clip(out, y.min(axis=1, keepdims=True), y.max(axis=1, keepdims=True))
    return out.reshape(k, h, w)


@dataclass
class CamStack:
    raw_cam: np.ndarray      # (K, h, w)
    refined_cam: np.ndarray  # (K, h, w)
    features_X: np.ndarray   # (D, h, w)
    logits: np.ndarray       # (K,)


def infer_cams_batch(params, images: np.ndarray) -> list[CamStack]:
    logits, feats, hidden = forward_classify(params, images)
    out = []
    for i in range(images.shape[0]):
        raw = np.stack([cam_extract(feats[i], c) for c in range(feats.shape[1])])
        A = pcm_affinity(hidden[i], params["theta"])
        out.append(CamStack(raw, pcm_refine(raw, A), hidden[i], logits[i]))
    return out


def infer_cams(params, image: np.ndarray) -> CamStack:
    return infer_cams_batch(params, image[None])[0]


# ---------------------------------------------------------------------------
# checkpoints: magic line, JSON header line, then raw little-endian float64

def save_checkpoint(path, params: dict, config_hash: str) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": CKPT_VERSION, "config_hash": config_hash, "params": entries}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + b"\n" + header.encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[dict, str]:
    raw = Path(path).read_bytes()
    magic, header, body = raw.split(b"\n", 2)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path} is not a shufflecam checkpoint")
    meta = json.loads(header)
    if meta["version"] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise ValueError(
            f"checkpoint config hash {meta['config_hash']} does not match config {expected_hash}"
        )
    params = {}
    for e in meta["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return params, meta["config_hash"]


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
