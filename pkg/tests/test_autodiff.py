import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf

from gpspp.autodiff import RngStream, Tensor, grad_check, load_params, no_grad, ops, save_params
from gpspp.exceptions import CheckpointError, ConfigError, NumericError


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def weighted(t, rng):
    """Scalar probe: a fixed random linear functional of ``t``."""
    w = rng.normal(size=t.shape)
    return ops.sum(t * w)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x
    ops.sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


@pytest.mark.parametrize("name", [
    "dense", "gelu", "relu", "layer_norm", "masked_softmax", "embed", "gather_rows", "scatter_add_rows",
    "scatter_pairs", "row_norm", "gaussian_kernels", "cross_entropy", "concat", "transpose_reshape",
    "matmul_batched", "absolute", "mean",
])
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    probe_rng = np.random.default_rng(8)
    idx = np.array([0, 2, -1, 2, 1])
    if name == "dense":
        x, w, b = param(rng, 4, 3), param(rng, 3, 5), param(rng, 5)
        ps, f = [x, w, b], lambda: ops.dense(x, w, b)
    elif name == "gelu":
        x = param(rng, 6, 2)
        ps, f = [x], lambda: ops.gelu(x)
    elif name == "relu":
        x = Tensor(rng.uniform(0.1, 1, (5,)) * rng.choice([-1, 1], 5), requires_grad=True)
        ps, f = [x], lambda: ops.relu(x)
    elif name == "layer_norm":
        x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
        ps, f = [x, g, b], lambda: ops.layer_norm(x, g, b, 1e-9)
    elif name == "masked_softmax":
        x = param(rng, 2, 4, 4)
        mask = rng.random((4, 4)) < 0.7
        mask[:, 0] = True
        ps, f = [x], lambda: ops.masked_softmax(x, mask[None])
    elif name == "embed":
        t = param(rng, 5, 3)
        ps, f = [t], lambda: ops.embed(t, np.array([[0, 4], [2, 2]]))
    elif name == "gather_rows":
        x = param(rng, 3, 2)
        ps, f = [x], lambda: ops.gather_rows(x, idx)
    elif name == "scatter_add_rows":
        x = param(rng, 5, 2)
        ps, f = [x], lambda: ops.scatter_add_rows(x, idx, 3)
    elif name == "scatter_pairs":
        v = param(rng, 4, 2)
        ps, f = [v], lambda: ops.scatter_pairs(v, np.array([0, 1, 1, 2]), np.array([1, 0, 2, 2]), 3)
    elif name == "row_norm":
        x = param(rng, 4, 3)
        ps, f = [x], lambda: ops.row_norm(x)
    elif name == "gaussian_kernels":
        d = Tensor(rng.uniform(0.5, 4, 6), requires_grad=True)
        mu, sigma = param(rng, 4), Tensor(rng.uniform(0.4, 1.5, 4), requires_grad=True)
        ps, f = [d, mu, sigma], lambda: ops.gaussian_kernels(d, mu, sigma)
    elif name == "cross_entropy":
        z = param(rng, 5, 4)
        ps, f = [z], lambda: ops.cross_entropy(z, np.array([0, 3, 1, 1, 2]))
    elif name == "concat":
        a, b = param(rng, 3, 2), param(rng, 3, 4)
        ps, f = [a, b], lambda: ops.concat([a, b], axis=-1)
    elif name == "transpose_reshape":
        x = param(rng, 2, 3, 4)
        ps, f = [x], lambda: ops.reshape(ops.transpose(x, (1, 0, 2)), (3, 8))
    elif name == "matmul_batched":
        a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 5)
        ps, f = [a, b], lambda: a @ b
    elif name == "absolute":
        x = Tensor(rng.uniform(0.1, 1, 5) * rng.choice([-1, 1], 5), requires_grad=True)
        ps, f = [x], lambda: ops.absolute(x)
    else:
        x = param(rng, 3, 4)
        ps, f = [x], lambda: ops.mean(x, axis=0)
    probe = {}

    def scalar():
        out = f()
        if "w" not in probe:
            probe["w"] = probe_rng.normal(size=out.shape)
        return ops.sum(out * probe["w"])

    assert grad_check(scalar, ps, step=1e-6) <= 1e-6


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), rtol=0, atol=1e-15)


def test_dense_matches_numpy(rng):
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    np.testing.assert_allclose(ops.dense(Tensor(x), Tensor(w), Tensor(b)).data, x @ w + b, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 12), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_moments(x):
    # eps / var must stay below the variance tolerance
    if np.any(x.var(axis=1) < 0.1):
        return
    y = ops.layer_norm(Tensor(x), Tensor(np.ones(12)), Tensor(np.zeros(12)), 1e-9).data
    assert np.all(np.abs(y.mean(axis=1)) <= 1e-10)
    assert np.all(np.abs(y.var(axis=1) - 1) <= 1e-8)


def test_masked_softmax_masked_entries_are_zero(rng):
    logits = rng.normal(size=(2, 4, 4))
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 2:] = False
    mask[3] = False
    p = ops.masked_softmax(Tensor(logits), mask[None]).data
    assert np.all(p[:, 0, 2:] == 0)
    np.testing.assert_array_equal(p[:, 3], 0)
    np.testing.assert_allclose(p[:, :3].sum(-1), 1, atol=1e-15)


def test_softmax_shift_invariance(rng):
    logits = rng.normal(size=(3, 5))
    shifted = logits.copy()
    shifted[1] += 123.25
    a, b = ops.softmax(Tensor(logits)).data, ops.softmax(Tensor(shifted)).data
    assert np.max(np.abs(a - b)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(z):
    p = ops.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)


def test_dropout_identity_without_rng_or_rate(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert ops.dropout(x, 0.3, None).data is x.data
    np.testing.assert_array_equal(ops.dropout(x, 0.0, rng).data, x.data)


def test_dropout_preserves_expectation():
    x = Tensor(np.ones((400, 500)))
    y = ops.dropout(x, 0.3, np.random.default_rng(0)).data
    assert abs((y == 0).mean() - 0.3) < 0.005
    assert abs(y.mean() - 1) < 0.01


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rate, rng):
    with pytest.raises(ConfigError):
        ops.dropout(Tensor(np.ones(3)), rate, rng)


def test_graph_dropout_drops_whole_graphs():
    x = Tensor(np.ones((6, 3)))
    rows = np.array([0, 0, 1, 1, 2, -1])
    for seed in range(20):
        y = ops.graph_dropout(x, 0.5, rows, 3, np.random.default_rng(seed)).data
        for g in range(3):
            block = y[rows == g]
            assert np.all(block == block[0, 0])
            assert block[0, 0] in (0.0, 2.0)
        np.testing.assert_array_equal(y[5], 1.0)


def test_padding_indices(rng):
    x = Tensor(rng.normal(size=(3, 2)))
    gathered = ops.gather_rows(x, np.array([2, -1])).data
    np.testing.assert_array_equal(gathered[1], 0)
    summed = ops.scatter_add_rows(Tensor(np.ones((3, 2))), np.array([0, -1, 0]), 2).data
    np.testing.assert_array_equal(summed, [[2, 2], [0, 0]])


def test_row_norm_gradient_at_zero():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    ops.sum(ops.row_norm(x)).backward()
    np.testing.assert_array_equal(x.grad, 0)


def test_gaussian_kernel_sigma_floor():
    psi = ops.gaussian_kernels(Tensor(np.array([0.0])), Tensor(np.array([0.0])), Tensor(np.array([0.0]))).data
    expected = -1 / (np.sqrt(2 * np.pi) * 1e-3)
    np.testing.assert_allclose(psi, expected)


def test_cross_entropy_uniform_logits():
    losses = ops.cross_entropy(Tensor(np.zeros((4, 7))), np.array([0, 1, 2, 6])).data
    np.testing.assert_allclose(losses, np.log(7), atol=1e-15)


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def broken():
        from gpspp.autodiff.tensor import make
        return make(np.sum(x.data ** 2), (x,), lambda g: (g * x.data,))

    assert grad_check(broken, [x]) > 0.1


def test_grad_check_rejects_nonfinite():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: Tensor(np.log(x.data)), [x])


def test_rng_stream_replay():
    s = RngStream(42, 3)
    a = s.generator(5, 1).random(4)
    s.generator(5, 0).random(100)
    np.testing.assert_array_equal(a, s.generator(5, 1).random(4))
    assert not np.array_equal(a, s.generator(5, 2).random(4))
    assert not np.array_equal(a, s.child(1).generator(5, 1).random(4))


def test_param_store_round_trip(tmp_path, rng):
    params = {"layer0/mpnn/w": rng.normal(size=(3, 4)), "bias": np.arange(5.0), "scalar": np.array(2.5)}
    save_params(tmp_path / "p.gpsp", params, {"hello": [1, 2]})
    back, meta = load_params(tmp_path / "p.gpsp")
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert meta == {"hello": [1, 2]}


def test_param_store_rejects_garbage(tmp_path):
    path = tmp_path / "bad.gpsp"
    path.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_params(path)
    save_params(path, {"a": np.ones(4)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError):
        load_params(path)
