import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shufflecam import cam
from shufflecam.curriculum import shuffle_batch
from shufflecam.data import Batch
from oracles import (
    central_diff, conv2d_loops, cosine_pairs, gap_loops, linear_loops, refine_loops, rel_err,
)

WIDTHS = (2, 3, 4)


def _params(seed=0, widths=WIDTHS, zero_head=False):
    p = cam.init_params(np.random.default_rng(seed), widths=widths, theta_dim=5)
    for k in ("conv1.b", "conv2.b", "conv3.b", "fc.b"):
        p[k] = np.random.default_rng(seed + 1).normal(0, 0.1, size=p[k].shape)
    if zero_head:
        p["fc.w"] = np.zeros_like(p["fc.w"])
        p["fc.b"] = np.zeros_like(p["fc.b"])
    return p


def _pool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = (x[:, :, 2*i, 2*j] + x[:, :, 2*i+1, 2*j] + x[:, :, 2*i, 2*j+1] + x[:, :, 2*i+1, 2*j+1]) / 4
    return out


# ---------------------------------------------------------------- forward

def test_default_shapes():
    p = cam.init_params(np.random.default_rng(0))
    assert p["fc.w"].shape == (2, 64) and p["theta"].shape == (32, 96)
    logits, feats, hidden = cam.forward_classify(p, np.zeros((3, 1, 64, 64)))
    assert logits.shape == (3, 2) and feats.shape == (3, 2, 8, 8) and hidden.shape == (3, 96, 8, 8)


def test_zero_images_zero_biases_give_zero_logits():
    p = cam.init_params(np.random.default_rng(0), widths=WIDTHS)
    logits, _, _ = cam.forward_classify(p, np.zeros((2, 1, 8, 8)))
    assert not logits.any()


def test_duplicate_rows_give_identical_logits():
    x = np.random.default_rng(1).random((1, 1, 16, 16))
    logits, _, _ = cam.forward_classify(_params(), np.concatenate([x, x]))
    np.testing.assert_array_equal(logits[0], logits[1])


def test_forward_matches_loop_composition():
    p = _params(2)
    x = np.random.default_rng(3).random((2, 1, 8, 8))
    a = x
    for i in (1, 2, 3):
        a = _pool_loops(np.maximum(conv2d_loops(a, p[f"conv{i}.w"], p[f"conv{i}.b"], 1, 1), 0))
    ref = linear_loops(gap_loops(a), p["fc.w"], p["fc.b"])
    logits, feats, _ = cam.forward_classify(p, x)
    np.testing.assert_allclose(logits, ref, rtol=0, atol=1e-12)
    # CAM head is the classifier applied per pixel
    cam_ref = np.zeros_like(feats)
    for n in range(2):
        for k in range(2):
            for i in range(a.shape[2]):
                for j in range(a.shape[3]):
                    cam_ref[n, k, i, j] = sum(p["fc.w"][k, d] * a[n, d, i, j] for d in range(a.shape[1])) + p["fc.b"][k]
    np.testing.assert_allclose(feats, cam_ref, rtol=0, atol=1e-12)


def test_forward_rejects_indivisible_input():
    with pytest.raises(ValueError, match="divisible by 8"):
        cam.forward_classify(_params(), np.zeros((1, 1, 12, 16)))


def test_batch_permutation_equivariance():
    x = np.random.default_rng(4).random((4, 1, 16, 16))
    perm = np.array([2, 0, 3, 1])
    p = _params()
    a = cam.forward_classify(p, x)
    b = cam.forward_classify(p, x[perm])
    for u, v in zip(a, b):
        np.testing.assert_allclose(u[perm], v, rtol=0, atol=1e-13)


def test_hidden_aggregation_is_standardised():
    x = np.random.default_rng(5).random((2, 1, 16, 16))
    _, _, hidden = cam.forward_classify(_params(), x)
    assert hidden.shape == (2, WIDTHS[1] + WIDTHS[2], 2, 2)
    live = hidden.std(axis=(2, 3)) > 0
    np.testing.assert_allclose(hidden.mean(axis=(2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(hidden.std(axis=(2, 3))[live], 1, atol=1e-9)


# ---------------------------------------------------------------- training step

def _batches(seed, n=2, h=8, f=0.5):
    rng = np.random.default_rng(seed)
    imgs = rng.random((n, 1, h, h))
    labels = np.eye(2)[np.arange(n) % 2]
    orig = Batch(imgs, labels, tuple(f"b{i}" for i in range(n)))
    return orig, shuffle_batch(imgs, labels, h // 2, f, np.random.default_rng(seed + 100))


@pytest.mark.parametrize("seed", range(20))
def test_train_step_gradient_finite_difference(seed):
    p = _params(seed)
    orig, mixed = _batches(seed)
    _, _, _, grads = cam.loss_and_grads(p, orig.images, orig.labels, mixed.images, mixed.targets)
    for name in cam.TRAINABLE:
        f = lambda: cam.loss_and_grads(p, orig.images, orig.labels, mixed.images, mixed.targets)[0]
        assert rel_err(grads[name], central_diff(f, p[name]), floor=1e-7) <= 1e-3, name


@pytest.mark.parametrize("seed", range(3))
def test_identical_twin_gradient_finite_difference(seed):
    p = _params(seed)
    orig, _ = _batches(seed)
    total, lo, lm, grads = cam.loss_and_grads(p, orig.images, orig.labels, orig.images, orig.labels)
    assert total == 2 * lo and lo == lm
    for name in cam.TRAINABLE:
        f = lambda: cam.loss_and_grads(p, orig.images, orig.labels, orig.images, orig.labels)[0]
        assert rel_err(grads[name], central_diff(f, p[name]), floor=1e-7) <= 1e-3, name


def test_zero_ratio_mixed_loss_equals_original():
    p = _params()
    orig, mixed = _batches(0, f=0.0)
    res = cam.train_step(p, orig, mixed, None, 1e-3)
    assert abs(res.loss_mixed - res.loss_orig) <= 1e-12


def test_zero_learning_rate_keeps_params():
    p = _params()
    orig, mixed = _batches(1)
    res = cam.train_step(p, orig, mixed, None, 0.0)
    for k in p:
        np.testing.assert_array_equal(res.params[k], p[k])
    assert res.opt_state.step == 1


def test_theta_and_input_stats_are_not_trained():
    p = _params()
    orig, mixed = _batches(2)
    res = cam.train_step(p, orig, mixed, None, 0.1)
    for k in ("theta", "input.shift", "input.scale"):
        np.testing.assert_array_equal(res.params[k], p[k])


def test_overfit_two_samples():
    p = cam.init_params(np.random.default_rng(0), widths=(4, 8, 8))
    orig, mixed = _batches(3)
    state, losses = None, []
    for _ in range(50):
        res = cam.train_step(p, orig, mixed, state, 1e-2)
        p, state = res.params, res.opt_state
        losses.append(res.loss_total)
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert ups <= 5 and losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_batch():
    p = _params()
    p["fc.b"] = np.array([np.nan, 0.0])
    orig, mixed = _batches(4)
    with pytest.raises(cam.NonFiniteLossError) as err:
        cam.train_step(p, orig, mixed, None, 1e-3)
    assert err.value.batch_ids == ("b0", "b1")
    assert "b0" in str(err.value)


def test_mismatched_batches_rejected():
    p = _params()
    with pytest.raises(ValueError):
        cam.loss_and_grads(p, np.zeros((2, 1, 8, 8)), np.zeros((2, 2)), np.zeros((3, 1, 8, 8)), np.zeros((3, 2)))


# ---------------------------------------------------------------- cam_extract

def test_cam_extract_channels():
    feats = np.zeros((3, 2, 2))
    feats[1] = 1.0
    np.testing.assert_array_equal(cam.cam_extract(feats, 1), np.ones((2, 2)))
    same = np.tile(np.random.default_rng(0).random((1, 2, 2)), (3, 1, 1))
    assert all(np.array_equal(cam.cam_extract(same, c), same[0]) for c in range(3))
    for bad in (-1, 3):
        with pytest.raises(ValueError):
            cam.cam_extract(feats, bad)


# ---------------------------------------------------------------- affinity

def test_affinity_identical_pixels_all_ones():
    X = np.ones((3, 2, 2)) * np.array([1.0, 2.0, 3.0])[:, None, None]
    np.testing.assert_array_equal(cam.pcm_affinity(X, np.eye(3)), np.ones((4, 4)))


def test_affinity_orthogonal_pixels():
    X = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 1, 2)
    np.testing.assert_array_equal(cam.pcm_affinity(X, np.eye(2)), np.eye(2))


@pytest.mark.parametrize("seed", range(20))
def test_affinity_matches_cosine_oracle(seed):
    rng = np.random.default_rng(seed)
    X, theta = rng.normal(size=(4, 2, 2)), rng.normal(size=(3, 4))
    A = cam.pcm_affinity(X, theta)
    np.testing.assert_allclose(A, cosine_pairs(theta @ X.reshape(4, -1)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(A, A.T, rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.diag(A), 1.0, rtol=0, atol=1e-12)
    assert A.min() >= 0


def test_affinity_zero_features_guarded():
    A = cam.pcm_affinity(np.zeros((2, 2, 2)), np.eye(2))
    assert np.all(np.isfinite(A)) and not A.any()


def test_affinity_rejects_wrong_theta():
    with pytest.raises(ValueError):
        cam.pcm_affinity(np.zeros((3, 2, 2)), np.eye(4))


# ---------------------------------------------------------------- refinement

def test_refine_identity_affinity_is_relu():
    Y = np.random.default_rng(0).normal(size=(2, 3, 3))
    np.testing.assert_array_equal(cam.pcm_refine(Y, np.eye(9)), np.maximum(Y, 0))


def test_refine_constant_cam_fixed_point():
    Y = np.stack([np.full((3, 3), 0.7), np.full((3, 3), 2.0)])
    A = np.random.default_rng(1).random((9, 9))
    np.testing.assert_array_equal(cam.pcm_refine(Y, A), Y)


@pytest.mark.parametrize("seed", range(20))
def test_refine_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    Y, A = rng.normal(size=(2, 2, 2)), rng.random((4, 4))
    A[rng.integers(0, 4)] = 0.0   # exercise the empty-row rule
    np.testing.assert_allclose(cam.pcm_refine(Y, A), refine_loops(Y, A), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 3), h=st.integers(1, 4))
def test_refine_stays_in_relu_hull(seed, k, h):
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(k, h, h)) * 3
    A = np.maximum(rng.normal(size=(h * h, h * h)), 0)
    out = cam.pcm_refine(Y, A)
    r = np.maximum(Y, 0).reshape(k, -1)
    assert np.all(out.reshape(k, -1) >= r.min(axis=1, keepdims=True))
    assert np.all(out.reshape(k, -1) <= r.max(axis=1, keepdims=True))


def test_refine_rejects_bad_affinity():
    with pytest.raises(ValueError):
        cam.pcm_refine(np.zeros((1, 2, 2)), np.eye(3))
    with pytest.raises(ValueError):
        cam.pcm_refine(np.zeros((1, 1, 2)), -np.eye(2))


# ---------------------------------------------------------------- inference

def test_zero_head_gives_zero_cams():
    stack = cam.infer_cams(_params(zero_head=True), np.random.default_rng(0).random((1, 16, 16)))
    assert not stack.raw_cam.any() and not stack.refined_cam.any()
    assert stack.raw_cam.shape == stack.refined_cam.shape == (2, 2, 2)


def test_duplicate_image_identical_stacks():
    x = np.random.default_rng(0).random((1, 1, 16, 16))
    a, b = cam.infer_cams_batch(_params(), np.concatenate([x, x]))
    for field in ("raw_cam", "refined_cam", "features_X", "logits"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))


def test_trained_refined_cam_beats_random_mask(toy_model, toy_data):
    params = toy_model.params
    rng = np.random.default_rng(0)
    pos = [s for s in toy_data.train + toy_data.val + toy_data.test if s.label[1] == 1][:20]
    ours, chance = [], []
    for s in pos:
        stack = cam.infer_cams(params, s.image)
        up = np.kron(stack.refined_cam[1], np.ones((8, 8)))
        top = up >= np.quantile(up, 0.9)
        gt = s.gt_mask == 2
        rand = np.zeros(gt.size, bool)
        rand[rng.choice(gt.size, int(top.sum()), replace=False)] = True
        rand = rand.reshape(gt.shape)
        iou = lambda m: (m & gt).sum() / (m | gt).sum()
        ours.append(iou(top))
        chance.append(iou(rand))
    assert np.median(ours) > np.median(chance)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    p = _params()
    cam.save_checkpoint(tmp_path / "a.ckpt", p, "abc123")
    q, h = cam.load_checkpoint(tmp_path / "a.ckpt", "abc123")
    assert h == "abc123" and set(q) == set(p)
    for k in p:
        np.testing.assert_array_equal(p[k], q[k])
    assert cam.params_digest(p) == cam.params_digest(q)


def test_checkpoint_bytes_deterministic(tmp_path):
    p = _params()
    cam.save_checkpoint(tmp_path / "a.ckpt", p, "h")
    cam.save_checkpoint(tmp_path / "b.ckpt", dict(reversed(list(p.items()))), "h")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_hash_mismatch_and_garbage(tmp_path):
    cam.save_checkpoint(tmp_path / "a.ckpt", _params(), "one")
    with pytest.raises(ValueError, match="does not match"):
        cam.load_checkpoint(tmp_path / "a.ckpt", "two")
    (tmp_path / "bad.ckpt").write_bytes(b"nope\n{}\n")
    with pytest.raises(ValueError):
        cam.load_checkpoint(tmp_path / "bad.ckpt")
