import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentlink import substrate as S
from latentlink.substrate import tensor as T
from latentlink.substrate import checkpoint, nn
from latentlink.substrate.tensor import Tensor


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` over every entry of array ``x``."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def check_op(op, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    with S.precision(np.float64):
        arrays = [rng.standard_normal(s) for s in shapes]
        if positive:
            arrays = [np.abs(a) + 0.5 for a in arrays]
        weights = rng.standard_normal(op(*[Tensor(a) for a in arrays]).shape)
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        (op(*inputs) * weights).sum().backward()
        for k, a in enumerate(arrays):
            def f(x, k=k):
                args = [Tensor(x if j == k else arrays[j]) for j in range(len(arrays))]
                return float((op(*args) * weights).sum().data)
            num = numeric_grad(f, a.copy())
            rel = np.abs(inputs[k].grad - num) / np.maximum(np.abs(inputs[k].grad) + np.abs(num), 1e-6)
            assert rel.max() < 1e-3, (op, k, rel.max())


OPS = [
    (lambda a, b: a + b, [(3, 4), (4,)]),
    (lambda a, b: a - b, [(3, 1), (3, 4)]),
    (lambda a, b: a * b, [(2, 3), (2, 3)]),
    (lambda a, b: a / b, [(2, 3), (1, 3)]),
    (lambda a, b: a @ b, [(2, 5, 3), (3, 4)]),
    (lambda a: a.sum(axis=1), [(3, 4)]),
    (lambda a: a.mean(axis=(0, 2), keepdims=True), [(2, 3, 4)]),
    (lambda a: a.reshape(6, 2).transpose(1, 0), [(3, 4)]),
    (lambda a: a[1:, ::2], [(3, 4)]),
    (lambda a: a[np.array([0, 0, 2])], [(3, 4)]),
    (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    (lambda a, b: T.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    (T.tanh, [(3, 4)]),
    (T.sigmoid, [(3, 4)]),
    (T.elu, [(3, 4)]),
    (T.softplus, [(3, 4)]),
    (lambda a: T.log_softmax(a, axis=-1), [(3, 5)]),
    (lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    (lambda x, g, b: T.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    (lambda x, w, b: T.conv2d(x, w, b, 2), [(2, 2, 9, 9), (3, 2, 3, 3), (3,)]),
    (lambda x, w, b: T.conv2d(x, w, b, 4), [(1, 1, 16, 16), (2, 1, 8, 8), (2,)]),
    (lambda a: a ** 3, [(2, 3)]),
]


@pytest.mark.parametrize("op,shapes", OPS)
def test_operation_gradients_match_finite_differences(op, shapes):
    check_op(op, *shapes)


@pytest.mark.parametrize("op", [T.log, lambda a: a ** 0.5, lambda a: 1.0 / a])
def test_positive_domain_gradients(op):
    check_op(op, (3, 4), positive=True)


def test_relu_gradient_away_from_kink():
    x = Tensor(np.array([-1.0, 2.0, 0.5]), requires_grad=True)
    T.relu(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0])


def test_gru_and_batchnorm_gradients():
    rng = np.random.default_rng(3)
    with S.precision(np.float64):
        gru = nn.GRUCell(3, 4, rng)
        bn = nn.BatchNorm(4)
        x = Tensor(rng.standard_normal((5, 3)))
        h0 = Tensor(rng.standard_normal((5, 4)))
        w = rng.standard_normal((5, 4))
        params = S.ParameterSet({**{f"gru.{k}": v for k, v in gru.params.items()},
                                 **{f"bn.{k}": v for k, v in bn.params.items()}})
        report = S.grad_check(lambda: (bn(gru(x, gru(x, h0))) * w).sum(), params, max_entries=None)
    assert report.passed, report.summary()


# -- stop_gradient ---------------------------------------------------------------
def test_stop_gradient_forward_identity():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    assert np.array_equal(S.stop_gradient(x).data, x.data)


def test_stop_gradient_product_rule():
    with S.precision(np.float64):
        x = Tensor(np.array(3.0), requires_grad=True)
        (S.stop_gradient(x) * x).backward()
        # oracle: sg(x) replaced by the constant 3 -> d/dx (3 x) by central difference
        num = (3.0 * (3.0 + 1e-6) - 3.0 * (3.0 - 1e-6)) / 2e-6
    assert x.grad == pytest.approx(num) and x.grad == pytest.approx(3.0)


def test_stop_gradient_blocks_everything():
    x = Tensor(np.ones(3), requires_grad=True)
    y = S.stop_gradient(x) * 2.0 + 0.0 * x
    y.sum().backward()
    assert np.array_equal(x.grad, np.zeros(3))


# -- straight-through categorical ------------------------------------------------
def test_dominant_logit_always_sampled():
    rng = np.random.default_rng(0)
    for _ in range(50):
        out = S.straight_through_categorical(np.array([[1000.0, 0.0, 0.0]]), rng)
        assert np.array_equal(out.data, [[1.0, 0.0, 0.0]])


def test_uniform_logits_frequencies_within_three_sigma():
    rng = np.random.default_rng(1)
    n, k = 100_000, 32
    out = S.straight_through_categorical(np.zeros((n, k)), rng).data
    freq = out.sum(axis=0) / n
    sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
    assert np.all(np.abs(freq - 1 / k) < 3 * sigma)


def test_straight_through_gradient_is_softmax_gradient():
    rng = np.random.default_rng(2)
    logits_np = rng.standard_normal((4, 6))
    w = rng.standard_normal((4, 6))
    a = Tensor(logits_np, requires_grad=True)
    (S.straight_through_categorical(a, np.random.default_rng(5)) * w).sum().backward()
    b = Tensor(logits_np, requires_grad=True)
    (T.softmax(b, axis=-1) * w).sum().backward()
    assert np.allclose(a.grad, b.grad)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 8), st.integers(0, 10_000))
def test_straight_through_outputs_exact_one_hot(groups, classes, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((3, groups, classes)) * 4
    out = S.straight_through_categorical(logits, rng).data
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert np.all(out.sum(axis=-1) == 1.0)


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError):
        S.straight_through_categorical(np.array([[np.nan, 0.0]]), np.random.default_rng(0))


# -- KL ------------------------------------------------------------------------------
def test_kl_identical_is_zero():
    q = np.random.default_rng(0).standard_normal((2, 3, 4))
    assert np.allclose(S.kl_categorical(q, q).data, 0.0, atol=1e-6)


def test_kl_two_class_value():
    with S.precision(np.float64):
        q = np.log([[0.5, 0.5]])
        p = np.log([[0.25, 0.75]])
        got = float(S.kl_categorical(q, p).data)
    expected = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)  # direct summation
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.1438, abs=1e-4)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(4)
    with S.precision(np.float64):
        kl = S.kl_categorical(rng.standard_normal((1000, 1, 6)) * 3, rng.standard_normal((1000, 1, 6)) * 3).data
    assert np.all(kl >= -1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        S.kl_categorical(np.zeros((2, 3)), np.zeros((3, 3)))


# -- EMA -----------------------------------------------------------------------------
def _pset(value, shape=(2, 3)):
    return S.ParameterSet({"w": Tensor(np.full(shape, value), requires_grad=True)})


@pytest.mark.parametrize("decay,expected", [(1.0, 1.0), (0.0, 0.0), (0.99, 0.99)])
def test_ema_update_values(decay, expected):
    with S.precision(np.float64):
        target, online = _pset(1.0), _pset(0.0)
        S.ema_update(target, online, decay)
    assert np.allclose(target["w"].data, expected, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(-10, 10), st.floats(-10, 10))
def test_ema_is_convex_combination(decay, t, o):
    with S.precision(np.float64):
        target, online = _pset(t), _pset(o)
        S.ema_update(target, online, decay)
        v = target["w"].data
    assert np.all(v >= min(t, o) - 1e-12) and np.all(v <= max(t, o) + 1e-12)


def test_ema_rejects_mismatch():
    with pytest.raises(ValueError):
        S.ema_update(_pset(1.0), _pset(1.0, shape=(3, 2)), 0.5)


# -- grad_check --------------------------------------------------------------------
def test_grad_check_quadratic():
    with S.precision(np.float64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        params = S.ParameterSet({"x": x})
        report = S.grad_check(lambda: (x * x).sum(), params, tolerance=1e-6)
        (x * x).sum().backward()
    assert np.allclose(x.grad, [2.0, 4.0])
    assert report.passed and report.worst < 1e-6


def test_grad_check_flags_nondeterminism():
    x = Tensor(np.array([1.0]), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(S.NondeterministicLoss):
        S.grad_check(lambda: (x * float(rng.random())).sum(), S.ParameterSet({"x": x}))


def test_grad_check_detects_wrong_gradient():
    with S.precision(np.float64):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        # wrong backward: pretends d/dx x^2 = x
        bad = lambda: T._result(x.data ** 2, (x,), lambda g: (g * x.data,)).sum()
        report = S.grad_check(bad, S.ParameterSet({"x": x}))
    assert not report.passed


# -- optimizer and clipping ------------------------------------------------------------
def test_global_norm_clipping():
    ps = S.ParameterSet({"a": Tensor(np.zeros(2), requires_grad=True),
                         "b": Tensor(np.zeros(1), requires_grad=True)})
    ps["a"].grad = np.array([300.0, 0.0])
    ps["b"].grad = np.array([400.0])
    norm = S.clip_by_global_norm(ps, 100.0)
    assert norm == pytest.approx(500.0)
    total = np.sqrt((ps["a"].grad ** 2).sum() + (ps["b"].grad ** 2).sum())
    assert total == pytest.approx(100.0)


def test_adam_minimizes_quadratic():
    with S.precision(np.float64):
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        ps = S.ParameterSet({"x": x})
        opt = S.Adam(ps, lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            ((x - 1.0) ** 2).sum().backward()
            opt.step()
    assert np.allclose(x.data, 1.0, atol=1e-2)
    assert ps.version == 300


# -- checkpoints ------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mlp = nn.MLP(3, [4], 2, rng, norm="batch")
    checkpoint.save_module(tmp_path / "m", mlp)
    clone = nn.MLP(3, [4], 2, np.random.default_rng(9), norm="batch")
    checkpoint.load_module(tmp_path / "m", clone)
    for (k1, v1), (k2, v2) in zip(mlp.state().items(), clone.state().items()):
        assert k1 == k2 and np.array_equal(v1, v2)
    text = (tmp_path / "m.manifest").read_text()
    assert "name=layers.0.weight shape=3x4 offset=0" in text
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_wrong_architecture(tmp_path):
    rng = np.random.default_rng(0)
    checkpoint.save_module(tmp_path / "m", nn.MLP(3, [4], 2, rng))
    with pytest.raises(checkpoint.CheckpointMismatch):
        checkpoint.load_module(tmp_path / "m", nn.MLP(3, [5], 2, rng))


def test_checkpoint_blob_is_little_endian(tmp_path):
    checkpoint.save(tmp_path / "x", {"v": np.array([1.0, 2.0], dtype=">f8")})
    raw = (tmp_path / "x.bin").read_bytes()
    assert np.array_equal(np.frombuffer(raw, dtype="<f8"), [1.0, 2.0])


def test_streams_are_reproducible_and_distinct():
    a = S.rng.stream(7, "env").random(4)
    b = S.rng.stream(7, "env").random(4)
    c = S.rng.stream(7, "channel").random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
