import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_op, numeric_grad, rel_err
from recapdet import tensor as T
from recapdet.errors import ConfigError, InputError, NumericError, ShapeError, UsageError
from recapdet.optim import AdamState, adam_step
from recapdet.tensor import RunningStats, Tensor


# -- brute-force oracles -----------------------------------------------------

def matmul_oracle(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv_oracle(x, w, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            out[o, i, j] += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
    return out


def bilinear_oracle(img, out_h, out_w):
    """Sample each output pixel at its half-pixel-centred source location."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for r in range(out_h):
        sy = max((r + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(math.floor(sy), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for c in range(out_w):
            sx = max((c + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(math.floor(sx), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[r, c] = top * (1 - fy) + bot * fy
    return out


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(12.0).reshape(3, 4)
    out = T.matmul(Tensor(np.eye(3)), Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    assert np.abs(T.matmul(Tensor(a), Tensor(b)).data - matmul_oracle(a, b)).max() <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# -- conv2d ------------------------------------------------------------------

def test_conv_unit_1x1_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 5, 6))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_all_ones():
    out = T.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 3, 3)
    assert np.all(out.data == 9.0)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 1), (3, 2, 2)])
def test_conv_matches_direct_sum(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    x = rng.standard_normal((3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    assert np.abs(got - conv_oracle(x, w, stride, pad)).max() <= 1e-10


def test_conv_output_side_formula():
    out = T.conv2d(Tensor(np.zeros((2, 3, 11, 9))), Tensor(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 5, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv_nonpositive_output_raises():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- softmax -----------------------------------------------------------------

def test_softmax_even_row():
    assert T.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]


def test_softmax_large_logits_stable():
    p = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert abs(p[0, 0] - 1.0) <= 1e-12 and abs(p[0, 1]) <= 1e-12


def test_softmax_rows_normalised():
    p = T.softmax_rows(Tensor(np.random.default_rng(1).standard_normal((3, 4)))).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[np.nan, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(1, 4))
def test_softmax_property(values, rows):
    x = np.array(values * rows).reshape(rows, -1)
    p = T.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)


# -- pooling / resize --------------------------------------------------------

def test_maxpool_2x2():
    out = T.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        T.maxpool2d(Tensor(np.zeros((1, 2, 2))), 3)


def test_avgpool_global():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    assert np.allclose(T.avgpool_global(Tensor(x)).data, x.mean(axis=(2, 3)), atol=1e-14)
    assert T.avgpool_global(Tensor(x[0])).shape == (3,)


def test_bilinear_constant_plane():
    out = T.bilinear_resize(Tensor(np.full((2, 5, 3), 0.7)), 9, 4).data
    assert np.abs(out - 0.7).max() <= 1e-15


@pytest.mark.parametrize("src,dst", [((4, 4), (7, 7)), ((8, 8), (7, 7)), ((5, 3), (2, 6))])
def test_bilinear_matches_sampling_oracle(src, dst):
    img = np.random.default_rng(5).standard_normal(src)
    got = T.bilinear_resize(Tensor(img[None]), *dst).data[0]
    assert np.abs(got - bilinear_oracle(img, *dst)).max() <= 1e-12


def test_bilinear_rejects_empty_output():
    with pytest.raises(ShapeError):
        T.bilinear_resize(Tensor(np.zeros((1, 4, 4))), 0, 3)


# -- batchnorm ---------------------------------------------------------------

def _bn_params(c):
    return Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True)


def test_batchnorm_zero_variance_gives_zeros():
    g, b = _bn_params(1)
    out = T.batchnorm(Tensor(np.full((4, 1), 3.0)), g, b, RunningStats.create(1), "train")
    assert np.all(out.data == 0.0)


def test_batchnorm_train_moments():
    x = np.random.default_rng(2).standard_normal((64, 3)) * 4 + 2
    gamma = Tensor(np.array([1.5, 0.5, 2.0]))
    beta = Tensor(np.array([0.1, -1.0, 3.0]))
    out = T.batchnorm(Tensor(x), gamma, beta, RunningStats.create(3), "train").data
    assert np.allclose(out.mean(axis=0), beta.data, atol=1e-10)
    assert np.allclose(out.std(axis=0), gamma.data, atol=1e-3)


def test_batchnorm_hand_case():
    # x = [1, 2, 3, 4]: mean 2.5, biased var 1.25, unbiased var 5/3
    x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    g, b = _bn_params(1)
    rs = RunningStats.create(1)
    out = T.batchnorm(x, g, b, rs, "train").data[:, 0]
    inv = 1.0 / math.sqrt(1.25 + 1e-5)
    assert np.allclose(out, [-1.5 * inv, -0.5 * inv, 0.5 * inv, 1.5 * inv], atol=1e-15)
    assert rs.mean[0] == pytest.approx(0.1 * 2.5, abs=1e-15)
    assert rs.var[0] == pytest.approx(0.9 + 0.1 * 5 / 3, abs=1e-15)
    ev = T.batchnorm(Tensor(np.array([[2.0]])), g, b, rs, "eval").data[0, 0]
    assert ev == pytest.approx((2.0 - 0.25) / math.sqrt(0.9 + 0.5 / 3 + 1e-5), abs=1e-14)


def test_batchnorm_batch_of_one_rejected():
    g, b = _bn_params(2)
    with pytest.raises(ConfigError):
        T.batchnorm(Tensor(np.zeros((1, 2))), g, b, RunningStats.create(2), "train")


def test_batchnorm_bad_mode():
    g, b = _bn_params(2)
    with pytest.raises(ConfigError):
        T.batchnorm(Tensor(np.zeros((3, 2))), g, b, RunningStats.create(2), "infer")


# -- cross entropy -----------------------------------------------------------

def test_cross_entropy_uniform():
    assert T.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_confident_is_stable():
    v = T.cross_entropy(Tensor([[30.0, -30.0]]), [0]).item()
    assert 0.0 <= v < 1e-20


def test_cross_entropy_batch_mean_matches_per_sample():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((7, 2)) * 3
    labels = rng.integers(0, 2, 7)
    per = [-math.log(math.exp(l[y]) / (math.exp(l[0]) + math.exp(l[1]))) for l, y in zip(logits, labels)]
    assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(sum(per) / 7, abs=1e-12)


def test_cross_entropy_label_validation():
    with pytest.raises(InputError):
        T.cross_entropy(Tensor([[0.0, 0.0]]), [2])


# -- backward / adam ---------------------------------------------------------

def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * x).backward()


def test_backward_populates_every_tape_tensor():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.full((2, 2), 2.0), requires_grad=True)
    mid = T.relu(T.matmul(a, b))
    loss = mid.sum()
    loss.backward()
    for t in (a, b, mid, loss):
        assert t.grad is not None and t.grad.shape == t.shape


def test_adam_first_step_is_lr_sign():
    p = Tensor(np.array([0.5, -0.2]), requires_grad=True)
    p.grad = np.array([1.0, -3.0])
    state = AdamState.for_params([p], lr=1e-4)
    adam_step([p], state)
    assert np.allclose(p.data - np.array([0.5, -0.2]), [-1e-4, 1e-4], atol=1e-10)
    assert state.step_count == 1
    adam_step([p], state)
    assert state.step_count == 2
    assert state.first_moment[0].shape == p.shape


# -- finite-difference gradient checks (64-bit, h = 1e-5) ---------------------

SEEDS = range(10)


def _rand(rng, *shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    assert check_op(T.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 2)], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 0), (1, 1), (2, 1)][seed % 3]
    op = lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=pad)
    assert check_op(op, [_rand(rng, 2, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv1x1(seed):
    rng = np.random.default_rng(seed)
    assert check_op(T.conv2d, [_rand(rng, 2, 3, 4, 4), _rand(rng, 3, 3, 1, 1)], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax(seed):
    rng = np.random.default_rng(seed)
    assert check_op(T.softmax_rows, [_rand(rng, 3, 5)], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_attention_core(seed):
    rng = np.random.default_rng(seed)
    arrays = [_rand(rng, 2, 4, 3), _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)]
    assert check_op(lambda q, k, v: T.attention_core(q, k, v, 0.7), arrays, seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_maxpool(seed):
    rng = np.random.default_rng(seed)
    # distinct values keep the max away from ties
    x = rng.permutation(72).reshape(2, 1, 6, 6) / 7.0
    op = (lambda t: T.maxpool2d(t, 2)) if seed % 2 else (lambda t: T.maxpool2d(t, 3, 2))
    assert check_op(op, [x], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_bilinear(seed):
    rng = np.random.default_rng(seed)
    assert check_op(lambda t: T.bilinear_resize(t, 3, 5), [_rand(rng, 2, 6, 4)], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_avgpool(seed):
    rng = np.random.default_rng(seed)
    assert check_op(T.avgpool_global, [_rand(rng, 2, 3, 4, 4)], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_grad_batchnorm(seed, mode):
    rng = np.random.default_rng(seed)
    shape = (4, 3) if seed % 2 else (3, 2, 3, 3)
    c = shape[1]
    stats = RunningStats(rng.standard_normal(c) * 0.1, rng.uniform(0.5, 2.0, c))

    def op(x, g, b):
        # fresh copy so repeated evaluations see identical running stats
        return T.batchnorm(x, g, b, RunningStats(stats.mean.copy(), stats.var.copy()), mode)

    assert check_op(op, [_rand(rng, *shape), _rand(rng, c), _rand(rng, c)], seed) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, 5)
    logits = _rand(rng, 5, 2)
    t = Tensor(logits, requires_grad=True)
    T.cross_entropy(t, labels).backward()
    num = numeric_grad(lambda: T.cross_entropy(Tensor(logits), labels).item(), logits)
    assert rel_err(t.grad, num) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_relu_concat_reshape_transpose(seed):
    rng = np.random.default_rng(seed)

    def op(a, b):
        c = T.concat([a, b], axis=1)
        return T.relu(T.transpose(T.reshape(c, (2, 3, 4)), (0, 2, 1)))

    assert check_op(op, [_rand(rng, 2, 5), _rand(rng, 2, 7)], seed) <= 1e-4


def test_attention_core_matches_composed_ops():
    from recapdet.attention import attention_reference

    rng = np.random.default_rng(0)
    q, k, v = _rand(rng, 2, 6, 3), _rand(rng, 2, 3, 6), _rand(rng, 2, 6, 3)
    a = T.attention_core(Tensor(q), Tensor(k), Tensor(v)).data
    b = attention_reference(Tensor(q), Tensor(k), Tensor(v)).data
    assert np.abs(a - b).max() <= 1e-12


def test_forward_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        return T.softmax_rows(T.reshape(T.conv2d(x, w, padding=1), (2, -1))).data

    assert np.array_equal(run(), run())


def test_no_grad_skips_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
