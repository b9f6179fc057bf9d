import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfennet.engine import (
    AdamState,
    GradcheckError,
    ParamStore,
    ParamTensor,
    ShapeError,
    Tensor,
    adam_step,
    adaptive_avgpool2d,
    avgpool2d_samesize,
    bce_with_logits,
    channel_layernorm,
    concat_channels,
    conv2d,
    gradcheck,
    maxpool2d,
    no_grad,
    precision,
    swish,
    upsample_nearest2x,
    upsample_nearest_to,
)
from mfennet.engine import ops
from mfennet.gradsuite import op_cases


def t(a, grad=False):
    a = np.asarray(a, dtype=np.float64)
    return ParamTensor("x", a) if grad else Tensor(a)


@pytest.fixture(autouse=True)
def f64():
    with precision(64):
        yield


# -- conv2d -------------------------------------------------------------------


def test_conv_all_ones_tap_counts():
    out = conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), t([0.0]), padding=1).numpy()[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    out = conv2d(t(x), t(np.ones((1, 1, 1, 1))), t([0.0])).numpy()
    np.testing.assert_array_equal(out, x)


def test_conv_param_count_896():
    w = ParamTensor("w", np.zeros((32, 3, 3, 3)))
    b = ParamTensor("b", np.zeros(32))
    assert w.size + b.size == 896


@pytest.mark.parametrize("h,k,s,p", [(8, 3, 1, 1), (16, 3, 1, 1), (4, 3, 1, 2), (8, 3, 2, 1), (7, 3, 2, 0), (5, 1, 1, 0), (6, 2, 1, 0), (9, 3, 3, 2)])
def test_conv_output_size_and_loop_oracle(h, k, s, p):
    rng = np.random.default_rng(h * 10 + k)
    x = rng.standard_normal((2, 3, h, h))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = conv2d(t(x), t(w), t(b), stride=s, padding=p).numpy()
    ho = (h + 2 * p - k) // s + 1
    assert out.shape == (2, 4, ho, ho)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ref = np.empty_like(out)
    for i in range(ho):
        for j in range(ho):
            win = xp[:, :, i * s:i * s + k, j * s:j * s + k]
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", win, w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))))


# -- pooling ------------------------------------------------------------------


def test_maxpool_value_and_routing():
    x = t([[[[1.0, 2.0], [3.0, 4.0]]]], grad=True)
    y = maxpool2d(x)
    assert y.numpy().ravel().tolist() == [4.0]
    y.backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1]]]])


def test_maxpool_tie_goes_to_first_and_constant():
    x = t(np.full((1, 1, 2, 2), 5.0), grad=True)
    y = maxpool2d(x)
    assert y.numpy().ravel().tolist() == [5.0]
    y.backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        maxpool2d(t(np.zeros((1, 1, 3, 4))))


def test_avgpool_border_counts():
    out = avgpool2d_samesize(t([[[[0.0, 3.0, 0.0]]]]), 3).numpy().ravel()
    np.testing.assert_allclose(out, [1.5, 1.0, 1.5])
    assert avgpool2d_samesize(t([[[[2.5]]]]), 3).numpy().item() == 2.5
    with pytest.raises(ShapeError):
        avgpool2d_samesize(t(np.zeros((1, 1, 4, 4))), 2)


@settings(max_examples=40, deadline=None)
@given(
    c=st.floats(-1e3, 1e3, allow_nan=False),
    h=st.integers(1, 9),
    w=st.integers(1, 9),
    bits=st.sampled_from([32, 64]),
)
def test_avgpool_constant_is_bit_exact(c, h, w, bits):
    with precision(bits):
        dtype = np.float32 if bits == 32 else np.float64
        x = Tensor(np.full((2, 3, h, w), c, dtype=dtype))
        out = avgpool2d_samesize(x, 3).numpy()
        assert np.array_equal(out, x.data)


def test_adaptive_pool_single_bin_is_global_mean():
    x = np.random.default_rng(1).standard_normal((1, 4, 16, 16))
    out = adaptive_avgpool2d(t(x), 1).numpy()
    np.testing.assert_allclose(out[:, :, 0, 0], x.mean(axis=(2, 3)), rtol=1e-12)
    with pytest.raises(ShapeError):
        adaptive_avgpool2d(t(x), 17)


def test_upsample_replicates_and_sums_back():
    x = t([[[[3.0]]]], grad=True)
    y = upsample_nearest2x(x)
    assert y.numpy().tolist() == [[[[3.0, 3.0], [3.0, 3.0]]]]
    y.backward(np.ones((1, 1, 2, 2)))
    assert x.grad.item() == 4.0
    z = upsample_nearest_to(t(np.arange(4.0).reshape(1, 1, 2, 2)), 4, 4).numpy()[0, 0]
    assert z[0, 0] == z[1, 1] == 0.0 and z[3, 3] == 3.0


# -- normalization, activations, combinators ------------------------------------


def test_layernorm_examples():
    one = t(np.ones(2)); zero = t(np.zeros(2))
    x = t(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    out = channel_layernorm(x, one, zero, eps=0.0).numpy().ravel()
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-12)
    flat = channel_layernorm(t(np.full((1, 2, 3, 3), 7.0)), one, zero).numpy()
    assert np.abs(flat).max() <= 1e-6
    b = np.array([0.25, -2.0])
    out = channel_layernorm(t(np.random.default_rng(0).standard_normal((1, 2, 3, 3))), t(np.zeros(2)), t(b)).numpy()
    np.testing.assert_array_equal(out, np.broadcast_to(b[None, :, None, None], out.shape))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 16), scale=st.floats(0.1, 100.0))
def test_layernorm_moments(seed, c, scale):
    x = np.random.default_rng(seed).standard_normal((2, c, 3, 3)) * scale
    var = x.var(axis=1)
    out = channel_layernorm(t(x), t(np.ones(c)), t(np.zeros(c))).numpy()
    keep = var >= 1e-3
    assert np.all(np.abs(out.mean(axis=1))[keep] < 1e-6)
    assert np.all(np.abs(out.var(axis=1) - var / (var + 1e-5))[keep] < 1e-4)


def test_swish_values_and_derivative():
    assert swish(t([[[[0.0]]]])).numpy().item() == 0.0
    assert abs(swish(t([[[[1.0]]]])).numpy().item() - 0.731059) < 1e-6
    x = t([[[[0.0]]]], grad=True)
    swish(x).backward(np.ones((1, 1, 1, 1)))
    assert x.grad.item() == 0.5


def test_swish_float32_matches_float64():
    x = np.linspace(-60, 60, 2001)
    with precision(32):
        a = swish(Tensor(x.astype(np.float32).reshape(1, 1, 1, -1))).numpy().ravel()
    b = swish(t(x.reshape(1, 1, 1, -1))).numpy().ravel()
    np.testing.assert_allclose(a, b, rtol=2e-6, atol=1e-6)
    assert np.isfinite(a).all()


def test_concat_order_and_split():
    a = t(np.random.default_rng(0).standard_normal((1, 2, 4, 4)), grad=True)
    b = t(np.random.default_rng(1).standard_normal((1, 3, 4, 4)), grad=True)
    y = concat_channels(a, b)
    assert y.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(y.numpy()[:, 0], a.data[:, 0])
    g = np.random.default_rng(2).standard_normal((1, 5, 4, 4))
    y.backward(g)
    np.testing.assert_array_equal(a.grad, g[:, :2])
    np.testing.assert_array_equal(b.grad, g[:, 2:])
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 2, 2\)"):
        concat_channels(a, t(np.zeros((1, 3, 2, 2))))


def test_bce_examples():
    assert abs(bce_with_logits(t(np.zeros((1, 1, 2, 2))), t(np.ones((1, 1, 2, 2)))).item() - math.log(2)) < 1e-12
    assert bce_with_logits(t(np.full((1, 1, 2, 2), 20.0)), t(np.ones((1, 1, 2, 2)))).item() < 1e-8
    x = t(np.zeros((1, 1, 1, 1)), grad=True)
    bce_with_logits(x, t(np.ones((1, 1, 1, 1)))).backward()
    assert x.grad.item() == -0.5
    with pytest.raises(ValueError):
        bce_with_logits(t(np.zeros((1, 1, 1, 1))), t(np.full((1, 1, 1, 1), 1.5)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), op=st.sampled_from(["swish", "relu", "avgpool", "layernorm", "upsample"]))
def test_forward_preserves_finiteness(seed, op):
    x = t(np.random.default_rng(seed).standard_normal((1, 3, 4, 4)) * 50)
    fn = {
        "swish": ops.swish,
        "relu": ops.relu,
        "avgpool": ops.avgpool2d_samesize,
        "layernorm": lambda v: ops.channel_layernorm(v, t(np.ones(3)), t(np.zeros(3))),
        "upsample": ops.upsample_nearest2x,
    }[op]
    assert np.isfinite(fn(x).numpy()).all()


def test_no_grad_records_nothing():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    with no_grad():
        y = swish(x)
    assert y._backward_fn is None and not y.requires_grad


# -- adam ---------------------------------------------------------------------


def _store(values):
    s = ParamStore()
    for name, v in values.items():
        s.add(name, np.asarray(v, dtype=np.float64))
    return s


def test_adam_first_step_is_sign_step():
    s = _store({"a": [1.0, -2.0, 3.0]})
    s["a"].grad[...] = [0.3, -5.0, 2e-3]
    st_ = AdamState(lr=1e-2, eps=1e-12)
    adam_step(s, st_)
    np.testing.assert_allclose(s["a"].data, [1.0 - 1e-2, -2.0 + 1e-2, 3.0 - 1e-2], rtol=1e-9)
    assert st_.t == 1
    assert np.all(s["a"].grad == 0)


def test_adam_zero_grad_and_lr_zero():
    s = _store({"a": [1.0, 2.0]})
    st_ = AdamState()
    adam_step(s, st_)
    np.testing.assert_array_equal(s["a"].data, [1.0, 2.0])
    assert st_.t == 1
    s["a"].grad[...] = [5.0, -1.0]
    before = s["a"].data.copy()
    adam_step(s, AdamState(lr=0.0))
    np.testing.assert_array_equal(s["a"].data, before)
    assert np.all(s["a"].v >= 0)


def test_adam_validates_constants():
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)


def test_adam_replay_is_bitwise():
    def run():
        rng = np.random.default_rng(3)
        s = _store({"w": rng.standard_normal(10)})
        st_ = AdamState(lr=0.1)
        for _ in range(20):
            s["w"].grad[...] = np.sin(s["w"].data) * 3
            adam_step(s, st_)
        return s["w"].data.copy()

    assert np.array_equal(run(), run())


def test_param_store_rejects_duplicates():
    s = _store({"a": [1.0]})
    with pytest.raises(KeyError):
        s.add("a", np.zeros(1))


# -- gradcheck ------------------------------------------------------------------


def test_gradcheck_quadratic():
    x = ParamTensor("x", np.random.default_rng(0).standard_normal((1, 2, 3, 3)))

    assert gradcheck(lambda: _half_sq(x), [x], probe_count=18).max_rel_error < 1e-9


def _half_sq(x):
    # 0.5 * |x|^2 as a single tape entry with analytic gradient x
    from mfennet.engine.tensor import make_result

    return make_result(np.array(0.5 * np.sum(x.data ** 2)), (x,), lambda g: (g * x.data,))


def test_gradcheck_swish_chain():
    x = ParamTensor("x", np.full((1, 1, 1, 1), 0.7))
    res = gradcheck(lambda: ops.bce_with_logits(swish(swish(x)), Tensor(np.zeros((1, 1, 1, 1)))), [x], h=1e-5)
    assert res.max_rel_error < 1e-7


def test_gradcheck_maxpool_away_from_ties():
    x = ParamTensor("x", np.arange(16.0).reshape(1, 1, 4, 4)[:, :, ::-1].copy() / 7)
    res = gradcheck(lambda: ops.bce_with_logits(maxpool2d(x), Tensor(np.full((1, 1, 2, 2), 0.2))), [x], probe_count=16)
    assert res.max_rel_error < 1e-6


def test_gradcheck_requires_64bit_and_finite_loss():
    x = ParamTensor("x", np.ones((1, 1, 1, 1)))
    with precision(32):
        with pytest.raises(GradcheckError, match="64-bit"):
            gradcheck(lambda: swish(x), [x])
    bad = ParamTensor("w", np.array([np.inf]))
    from mfennet.engine.tensor import make_result

    with pytest.raises(GradcheckError, match="non-finite"):
        gradcheck(lambda: make_result(np.array(bad.data.sum()), (bad,), lambda g: (g,)), [bad])


def test_gradcheck_reports_probed_parameter_on_nonfinite():
    from mfennet.engine.tensor import make_result

    w = ParamTensor("layer.weight", np.array([0.0, 1.0]))

    def f():
        v = w.data[0]
        val = 1.0 / (1.0 - v) if v < 1e-6 else np.inf
        return make_result(np.array(val), (w,), lambda g: (np.array([g, 0.0]),))

    with pytest.raises(GradcheckError, match=r"layer\.weight"):
        gradcheck(f, [w], probe_count=2)


@pytest.mark.parametrize("name", sorted(op_cases()))
def test_every_op_passes_finite_differences(name):
    fn, params = op_cases()[name]
    assert gradcheck(fn, params, probe_count=6).max_rel_error < 1e-4
