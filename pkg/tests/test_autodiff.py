"""Engine checks: every primitive's gradient against central finite
differences (the independent oracle), plus tape and op semantics."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uapforge import autodiff as ad
from uapforge.autodiff import (
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    UnsupportedNormError,
    apply_primitive,
    backward,
)

H = 1e-3
RTOL = 1e-3
TRIALS = 20


# ----- float64 reference forwards (independent of the engine's kernels) -----


def _ref_conv2d(x, w, b=None, stride=1, pad=0):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kh, kw = w.shape[2:]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    oh = (x.shape[2] + 2 * pad - kh) // stride + 1
    ow = (x.shape[3] + 2 * pad - kw) // stride + 1
    out = np.einsum("nchwij,fcij->nfhw", win[:, :, :oh, :ow], w)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def _ref_deconv2d(x, w, b=None, stride=1, pad=0, output_pad=0):
    # zero-insertion upsampling followed by a stride-1 convolution with the
    # spatially flipped kernel: a distinct formulation from the engine's
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    up = np.zeros((n, c, (h - 1) * stride + 1 + output_pad, (wd - 1) * stride + 1 + output_pad))
    up[:, :, :: stride, :: stride][:, :, :h, :wd] = x
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (F, C, kh, kw)
    out = _ref_conv2d(up, wf, stride=1, pad=kh - 1 - pad)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def _ref_batchnorm(x, gamma, beta, training=True, state=None, momentum=0.9, eps=1e-5):
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape_c = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    xhat = (x - mu.reshape(shape_c)) / np.sqrt(var.reshape(shape_c) + eps)
    return gamma.reshape(shape_c) * xhat + beta.reshape(shape_c)


def _ref_feature_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def _ref_log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


REF = {
    "conv2d": _ref_conv2d,
    "deconv2d": _ref_deconv2d,
    "batchnorm2d": _ref_batchnorm,
    "feature_norm": _ref_feature_norm,
    "relu": lambda x: np.maximum(x, 0.0),
    "fully_connected": lambda x, w, b=None: x @ w.T + (b if b is not None else 0.0),
    "add": lambda a, b: a + b,
    "mul": lambda a, b: a * b,
    "scalar_mul": lambda x, c: x * c,
    "clamp": lambda x, lo=None, hi=None: np.clip(x, lo, hi),
    "log": lambda x: np.log(np.maximum(x, ad.LOG_FLOOR)),
    "log_softmax": _ref_log_softmax,
    "softmax": lambda x: np.exp(_ref_log_softmax(x)),
    "reshape": lambda x, shape: x.reshape(shape),
    "mean": lambda x: x.mean(),
    "sum": lambda x: x.sum(),
    "gather_class": lambda x, index: x[np.arange(x.shape[0]), np.asarray(index)],
    "max_over_classes_excluding": lambda x, exclude: np.where(
        np.arange(x.shape[1])[None, :] == np.asarray(exclude)[:, None], -np.inf, x
    ).max(axis=1),
    "lp_norm": lambda x, p: float(np.abs(x).max())
    if p in ("inf", np.inf)
    else float(np.sqrt((x.astype(np.float64) ** 2).sum())),
}


def _ref_value(name, arrays, attrs, weights):
    out = np.asarray(REF[name](*[a.astype(np.float64) for a in arrays], **attrs))
    return float(np.sum(out * weights))


def _fd_grad(name, arrays, attrs, weights, wrt):
    arrays = [a.astype(np.float64) for a in arrays]
    a = arrays[wrt]
    g = np.zeros_like(a)
    flat = a.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + H
        f_hi = _ref_value(name, arrays, attrs, weights)
        flat[i] = orig - H
        f_lo = _ref_value(name, arrays, attrs, weights)
        flat[i] = orig
        g.reshape(-1)[i] = (f_hi - f_lo) / (2 * H)
    return g


def _check_case(name, arrays, attrs):
    """Engine forward and gradients against the float64 reference + FD."""
    rng = np.random.default_rng(99)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as g:
        out = apply_primitive(name, tensors, **attrs)
        weights = rng.uniform(0.5, 1.5, size=out.shape).astype(np.float32)
        loss = ad.tensor_sum(ad.mul(out, Tensor(weights)))
    backward(g, loss)
    ref_out = np.asarray(REF[name](*[a.astype(np.float64) for a in arrays], **attrs))
    fwd_err = np.abs(out.data - ref_out) / np.maximum(1.0, np.abs(ref_out))
    assert fwd_err.max() <= 1e-4, f"{name}: forward disagrees with reference by {fwd_err.max():.2e}"
    for k, t in enumerate(tensors):
        fd = _fd_grad(name, [a.copy() for a in arrays], attrs, weights.astype(np.float64), k)
        err = np.abs(t.grad.astype(np.float64) - fd) / np.maximum(1.0, np.abs(fd))
        assert err.max() <= RTOL, f"{name} input {k}: max rel err {err.max():.2e}"


def _away_from(rng, shape, kinks, margin, lo=-2.0, hi=2.0):
    x = rng.uniform(lo, hi, size=shape).astype(np.float32)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + margin * np.sign(x[close] - k + 1e-9) * 2
    return x


def _unique_absmax(rng, shape, gap=0.08):
    x = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
    flat = x.reshape(-1)
    k = rng.integers(flat.size)
    flat[k] = 1.5 * np.sign(flat[k]) if flat[k] != 0 else 1.5
    top = np.abs(flat[k])
    others = np.abs(flat) >= top - gap
    others[k] = False
    flat[others] *= 0.5
    return x


def _row_gap(rng, n, k, gap=0.05):
    # rows whose top-2 entries are separated so argmax survives +-H nudges
    x = rng.uniform(-1.0, 1.0, size=(n, k)).astype(np.float32)
    x += np.arange(k, dtype=np.float32) * 3 * gap
    x += rng.permutation(np.eye(k, dtype=np.float32)[rng.integers(k, size=n)]) * 0.5
    return x


def _fd_cases(trial):
    rng = np.random.default_rng(31337 + trial)
    stride = 1 + trial % 2
    pad = trial % 2
    opad = trial % 2 if stride == 2 else 0
    cases = {
        "conv2d": (
            [rng.standard_normal((2, 2, 5, 5)).astype(np.float32),
             rng.standard_normal((3, 2, 3, 3)).astype(np.float32) * 0.5,
             rng.standard_normal(3).astype(np.float32)],
            {"stride": stride, "pad": pad},
        ),
        "deconv2d": (
            [rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
             rng.standard_normal((3, 2, 3, 3)).astype(np.float32) * 0.5,
             rng.standard_normal(2).astype(np.float32)],
            {"stride": stride, "pad": pad, "output_pad": opad},
        ),
        "batchnorm2d": (
            [rng.standard_normal((3, 2, 4, 4)).astype(np.float32) * 1.5,
             rng.uniform(0.5, 1.5, 2).astype(np.float32),
             rng.standard_normal(2).astype(np.float32)],
            {"training": True, "state": None},
        ),
        "feature_norm": (
            [rng.standard_normal((3, 6)).astype(np.float32) * 1.5,
             rng.uniform(0.5, 1.5, 6).astype(np.float32),
             rng.standard_normal(6).astype(np.float32)],
            {},
        ),
        "relu": ([_away_from(rng, (4, 5), [0.0], 5 * H)], {}),
        "fully_connected": (
            [rng.standard_normal((3, 4)).astype(np.float32),
             rng.standard_normal((5, 4)).astype(np.float32) * 0.5,
             rng.standard_normal(5).astype(np.float32)],
            {},
        ),
        "add": (
            [rng.standard_normal((3, 2, 4)).astype(np.float32),
             rng.standard_normal((2, 4)).astype(np.float32)],
            {},
        ),
        "mul": (
            [rng.standard_normal((3, 4)).astype(np.float32),
             rng.standard_normal((3, 4)).astype(np.float32)],
            {},
        ),
        "scalar_mul": ([rng.standard_normal((3, 4)).astype(np.float32)], {"c": 1.7}),
        "clamp": (
            [_away_from(rng, (4, 4), [-0.5, 0.5], 5 * H)],
            {"lo": -0.5, "hi": 0.5},
        ),
        "log": ([rng.uniform(0.1, 2.0, (3, 4)).astype(np.float32)], {}),
        "log_softmax": ([rng.standard_normal((4, 6)).astype(np.float32) * 2], {}),
        "softmax": ([rng.standard_normal((4, 6)).astype(np.float32) * 2], {}),
        "reshape": ([rng.standard_normal((3, 4)).astype(np.float32)], {"shape": (2, 6)}),
        "mean": ([rng.standard_normal((3, 5)).astype(np.float32)], {}),
        "sum": ([rng.standard_normal((3, 5)).astype(np.float32)], {}),
        "gather_class": (
            [rng.standard_normal((4, 5)).astype(np.float32)],
            {"index": rng.integers(0, 5, size=4)},
        ),
        "max_over_classes_excluding": (
            [_row_gap(rng, 4, 5)],
            {"exclude": rng.integers(0, 5, size=4)},
        ),
        "lp_norm-2": ([rng.uniform(0.3, 1.5, (3, 4)).astype(np.float32)], {"p": 2}),
        "lp_norm-inf": ([_unique_absmax(rng, (3, 4))], {"p": "inf"}),
    }
    return cases


ALL_CASES = sorted(_fd_cases(0))


@pytest.mark.parametrize("case", ALL_CASES)
def test_finite_difference_oracle(case):
    for trial in range(TRIALS):
        arrays, attrs = _fd_cases(trial)[case]
        name = case.split("-")[0]
        _check_case(name, arrays, attrs)


def test_every_primitive_is_fd_checked():
    covered = {c.split("-")[0] for c in ALL_CASES}
    assert covered == set(ad.primitive_names())


# ---------------------------------------------------------------------------
# tape semantics
# ---------------------------------------------------------------------------


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    with Graph() as g:
        loss = ad.tensor_sum(ad.mul(x, x))
    backward(g, loss)
    assert np.allclose(x.grad, [6.0])


def test_nonparticipating_leaf_gets_zero_grad():
    x = Tensor([2.0], requires_grad=True)
    w = Tensor([5.0], requires_grad=True)
    with Graph() as g:
        dead = ad.scalar_mul(w, 3.0)  # recorded but not feeding the loss
        loss = ad.tensor_sum(ad.mul(x, x))
    backward(g, loss)
    assert np.allclose(w.grad, [0.0])
    assert dead.grad is None


def test_backward_twice_raises():
    x = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        loss = ad.tensor_sum(ad.mul(x, x))
    backward(g, loss)
    with pytest.raises(GraphError):
        backward(g, loss)


def test_backward_nonscalar_loss_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        out = ad.mul(x, x)
    with pytest.raises(GraphError):
        backward(g, out)


def test_backward_empty_graph_raises():
    g = Graph()
    with pytest.raises(GraphError):
        backward(g, Tensor([1.0]))


def test_no_recording_without_grad_or_graph():
    x = Tensor(np.ones((2, 2)))
    with Graph() as g:
        ad.relu(x)
    assert g.nodes == []
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    out = ad.relu(y)  # no active graph: nothing recorded, grad flag kept
    assert out.requires_grad


def test_grad_accumulates_over_reuse():
    x = Tensor([2.0], requires_grad=True)
    with Graph() as g:
        loss = ad.tensor_sum(ad.add(ad.mul(x, x), x))  # x^2 + x
    backward(g, loss)
    assert np.allclose(x.grad, [5.0])


def test_unknown_primitive():
    with pytest.raises(KeyError):
        apply_primitive("conv3d", [Tensor([1.0])])


# ---------------------------------------------------------------------------
# op semantics
# ---------------------------------------------------------------------------


def test_relu_values():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_deconv_spatial_progression():
    # kernel 3, stride 2, pad 1: 3 -> 5 -> 9 -> 17 -> 33
    sizes = [3]
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 3, 3)).astype(np.float32))
    for _ in range(4):
        w = Tensor(np.random.default_rng(1).standard_normal((x.shape[1], 4, 3, 3)).astype(np.float32))
        x = ad.deconv2d(x, w, stride=2, pad=1, output_pad=0)
        sizes.append(x.shape[2])
    assert sizes == [3, 5, 9, 17, 33]


def test_deconv_from_1x1():
    x = Tensor(np.ones((1, 100, 1, 1), dtype=np.float32))
    w = Tensor(np.ones((100, 256, 3, 3), dtype=np.float32) * 0.01)
    out = ad.deconv2d(x, w, stride=1, pad=0)
    assert out.shape == (1, 256, 3, 3)


def test_conv_shape_errors_name_primitive():
    x = Tensor(np.ones((1, 3, 8, 8), dtype=np.float32))
    w = Tensor(np.ones((4, 2, 3, 3), dtype=np.float32))
    with pytest.raises(ShapeError, match="conv2d"):
        ad.conv2d(x, w)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=16))
def test_softmax_rows_sum_to_one(vals):
    x = Tensor(np.array([vals], dtype=np.float32))
    out = ad.softmax(x)
    assert out.data.min() >= 0.0
    assert abs(out.data.sum() - 1.0) <= 1e-6


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=16))
def test_log_softmax_consistent_with_log_of_softmax(vals):
    x = Tensor(np.array([vals], dtype=np.float32))
    ls = ad.log_softmax(x).data
    sm = ad.softmax(x).data
    assert np.abs(ls - np.log(np.maximum(sm, 1e-30))).max() <= 1e-5


def test_clamp_bounds_and_boundary_gradient():
    x = Tensor([-2.0, -0.5, 0.0, 0.5, 2.0], requires_grad=True)
    with Graph() as g:
        out = ad.clamp(x, -0.5, 0.5)
        loss = ad.tensor_sum(out)
    assert out.data.min() >= -0.5 and out.data.max() <= 0.5
    backward(g, loss)
    # gradient 1 strictly inside, 0 at and beyond the bounds
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 0.0, 0.0])


def test_lp_norm_values_and_zero():
    x = Tensor([[3.0, -4.0]])
    assert ad.lp_norm(x, 2).item() == pytest.approx(5.0)
    assert ad.lp_norm(x, "inf").item() == pytest.approx(4.0)
    z = Tensor(np.zeros(4))
    assert ad.lp_norm(z, 2).item() == 0.0
    assert ad.lp_norm(z, "inf").item() == 0.0
    with pytest.raises(UnsupportedNormError):
        ad.lp_norm(x, 3)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=32))
def test_lp_norm_nonnegative_zero_iff_zero(vals):
    x = Tensor(np.array(vals, dtype=np.float32))
    for p in (2, "inf"):
        n = ad.lp_norm(x, p).item()
        assert n >= 0.0
        assert (n == 0.0) == bool(np.all(x.data == 0.0))


def test_lp_norm_inf_subgradient_tie_break():
    # ties route the whole subgradient to the lowest flat index
    x = Tensor([2.0, -2.0, 1.0], requires_grad=True)
    with Graph() as g:
        loss = ad.lp_norm(x, "inf")
    backward(g, loss)
    assert np.array_equal(x.grad, [1.0, 0.0, 0.0])


def test_forward_determinism():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = ad.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    b = ad.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    assert np.array_equal(a, b)


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 3, 4, 4)).astype(np.float32) * 2 + 1
    state = {"mean": np.zeros(3, dtype=np.float32), "var": np.ones(3, dtype=np.float32)}
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    ad.batchnorm2d(Tensor(x), gamma, beta, training=True, state=state, momentum=0.9)
    bm = x.mean(axis=(0, 2, 3))
    assert np.allclose(state["mean"], 0.1 * bm, atol=1e-6)
    out = ad.batchnorm2d(Tensor(x), gamma, beta, training=False, state=state)
    expect = (x - state["mean"].reshape(1, 3, 1, 1)) / np.sqrt(
        state["var"].reshape(1, 3, 1, 1) + 1e-5
    )
    assert np.allclose(out.data, expect, atol=1e-5)


def test_batchnorm_single_sample_matches_per_sample_stats():
    # batch of one: batch statistics reduce to the sample's own statistics
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), training=True)
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)


def test_gather_and_max_excluding_values():
    x = Tensor([[1.0, 5.0, 3.0], [7.0, 2.0, 4.0]])
    got = ad.gather_class(x, np.array([1, 0]))
    assert np.array_equal(got.data, [5.0, 7.0])
    mx = ad.max_over_classes_excluding(x, np.array([1, 0]))
    assert np.array_equal(mx.data, [3.0, 4.0])
    with pytest.raises(IndexError):
        ad.gather_class(x, np.array([1, 9]))


def test_log_floor_guard():
    out = ad.log(Tensor([0.0, 1.0]))
    assert math.isfinite(float(out.data[0]))
    assert out.data[0] == pytest.approx(math.log(1e-12))
