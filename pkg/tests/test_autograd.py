import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acdzero import autograd as ag
from acdzero.params import ParamStore, adam_step
from gradcheck import central_difference, check_composition, relative_error


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ag.matmul(np.eye(2), a), a)


def test_matmul_row_by_column():
    assert ag.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_zero_annihilates():
    out = ag.matmul(np.zeros((2, 3)), np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(out, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
        ag.matmul(np.zeros((2, 3)), np.zeros((4, 1)))


def test_softmax_constant_is_uniform():
    np.testing.assert_allclose(ag.softmax(np.array([7.0, 7.0, 7.0])), [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(ag.softmax(np.array([0.0, math.log(3.0)])), [0.25, 0.75], atol=1e-15)


def test_softmax_single_support():
    out = ag.softmax(np.array([5.0, 9.0]), mask=np.array([True, False]))
    assert out.tolist() == [1.0, 0.0]


def test_softmax_all_masked():
    with pytest.raises(ag.EmptySupportError):
        ag.softmax(np.array([1.0, 2.0]), mask=np.array([False, False]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_distribution(x):
    p = ag.softmax(x)
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-12


def _scalar_gru(x, h, params):
    d_h = len(h)
    xh = list(x) + list(h)

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    z = [sig(sum(xh[i] * params["W_z"][i][j] for i in range(len(xh))) + params["b_z"][j])
         for j in range(d_h)]
    r = [sig(sum(xh[i] * params["W_r"][i][j] for i in range(len(xh))) + params["b_r"][j])
         for j in range(d_h)]
    xrh = list(x) + [r[j] * h[j] for j in range(d_h)]
    c = [math.tanh(sum(xrh[i] * params["W_h"][i][j] for i in range(len(xrh))) + params["b_h"][j])
         for j in range(d_h)]
    return [(1 - z[j]) * h[j] + z[j] * c[j] for j in range(d_h)]


def _gru_params(rng, d_in, d_h, scale=0.5):
    return {
        "W_z": rng.normal(scale=scale, size=(d_in + d_h, d_h)), "b_z": rng.normal(scale=scale, size=d_h),
        "W_r": rng.normal(scale=scale, size=(d_in + d_h, d_h)), "b_r": rng.normal(scale=scale, size=d_h),
        "W_h": rng.normal(scale=scale, size=(d_in + d_h, d_h)), "b_h": rng.normal(scale=scale, size=d_h),
    }


def test_gru_zero_weights_halves_hidden():
    rng = np.random.default_rng(1)
    params = {k: np.zeros_like(v) for k, v in _gru_params(rng, 3, 4).items()}
    h = rng.normal(size=4)
    np.testing.assert_allclose(ag.gru_cell(rng.normal(size=3), h, params), 0.5 * h, atol=1e-15)


def test_gru_zero_hidden_zero_candidate_fixed_point():
    rng = np.random.default_rng(2)
    params = _gru_params(rng, 3, 4)
    params["W_h"][:] = 0.0
    params["b_h"][:] = 0.0
    np.testing.assert_array_equal(ag.gru_cell(rng.normal(size=3), np.zeros(4), params), np.zeros(4))


@pytest.mark.parametrize("seed", range(5))
def test_gru_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    params = _gru_params(rng, 3, 5)
    x, h = rng.normal(size=3), rng.normal(size=5)
    np.testing.assert_allclose(ag.gru_cell(x, h, params), _scalar_gru(x, h, params), atol=1e-13)


def test_gru_dimension_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ag.ShapeError):
        ag.gru_cell(np.zeros(2), np.zeros(4), _gru_params(rng, 3, 4))


def test_backward_linear_sum():
    theta = ag.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with ag.Tape() as tape:
        loss = ag.sum(theta)
    ag.backward(loss, tape)
    assert theta.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_square():
    theta = ag.Tensor([1.0, -2.0], requires_grad=True)
    with ag.Tape() as tape:
        loss = ag.sum(ag.mul(theta, theta))
    ag.backward(loss, tape)
    assert theta.grad.tolist() == [2.0, -4.0]


def test_backward_unused_parameter_zero_and_accumulates():
    used = ag.Tensor([1.0, 2.0], requires_grad=True)
    unused = ag.Tensor([5.0], requires_grad=True)
    for _ in range(2):
        with ag.Tape() as tape:
            loss = ag.sum(ag.mul(used, 3.0))
        ag.backward(loss, tape)
    assert used.grad.tolist() == [6.0, 6.0]
    assert unused.grad.tolist() == [0.0]


def test_backward_requires_scalar():
    theta = ag.Tensor([1.0, 2.0], requires_grad=True)
    with ag.Tape() as tape:
        y = ag.mul(theta, 2.0)
    with pytest.raises(ag.ContractError):
        ag.backward(y, tape)


def test_tape_is_topological():
    theta = ag.Tensor(np.ones((2, 2)), requires_grad=True)
    with ag.Tape() as tape:
        ag.sum(ag.tanh(ag.matmul(theta, theta)))
    seen = {theta.id}
    for entry in tape.entries:
        assert all(inp.id in seen or not inp.requires_grad for inp in entry.inputs)
        seen.add(entry.output_id)


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    arrays_ = [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(6, 5)),
               rng.normal(size=5), rng.normal(size=(5, 1))]
    x = rng.normal(size=(7, 4))

    def f(ws):
        h = ag.tanh(ag.add(ag.matmul(x, ws[0]), ws[1]))
        h = ag.sigmoid(ag.add(ag.matmul(h, ws[2]), ws[3]))
        return ag.sum(ag.sum(ag.matmul(h, ws[4])))

    params = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays_]
    with ag.Tape() as tape:
        loss = f(params)
    ag.backward(loss, tape)
    fd = central_difference(lambda: float(f(arrays_)), arrays_)
    for p, g in zip(params, fd):
        assert relative_error(p.grad, g) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_random_composition_gradients(seed):
    assert check_composition(seed) < 1e-4


def test_raw_and_tensor_paths_identical():
    arrays_ = np.random.default_rng(4).normal(size=(3, 3))
    raw = ag.tanh(ag.matmul(arrays_, arrays_))
    with ag.Tape():
        t = ag.tanh(ag.matmul(ag.Tensor(arrays_, requires_grad=True), arrays_))
    np.testing.assert_array_equal(raw, t.data)


def test_segment_log_softmax():
    logits = np.array([0.0, math.log(3.0), 2.0, 1.0, 4.0])
    seg = np.array([0, 0, 1, 1, 1])
    legal = np.array([True, True, True, False, True])
    out = ag.log_softmax_segments(logits, seg, 2, legal)
    np.testing.assert_allclose(np.exp(out[:2]), [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(np.exp(out[[2, 4]]), ag.softmax(np.array([2.0, 4.0])), atol=1e-15)
    assert out[3] == 0.0


def _store_with_grad(g):
    store = ParamStore()
    store.add("w", np.array([0.5, -1.0, 2.0]))
    store["w"].grad = np.array(g, dtype=float)
    return store


def test_adam_zero_gradient_leaves_params():
    store = _store_with_grad([0.0, 0.0, 0.0])
    adam_step(store, lr=0.1)
    assert store["w"].data.tolist() == [0.5, -1.0, 2.0]


def test_adam_first_step_is_signed_lr():
    store = _store_with_grad([0.3, -2.0, 1e3])
    before = store["w"].data.copy()
    adam_step(store, lr=0.01, eps=1e-12)
    np.testing.assert_allclose(store["w"].data - before, [-0.01, 0.01, -0.01], rtol=1e-9)


def test_adam_second_identical_step_not_larger():
    g = np.array([0.3, -2.0, 1e3])
    store = _store_with_grad(g)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    w0 = store["w"].data.copy()
    adam_step(store, lr, b1, b2, eps)
    w1 = store["w"].data.copy()
    store["w"].grad = g.copy()
    adam_step(store, lr, b1, b2, eps)
    w2 = store["w"].data.copy()
    # oracle: recompute the moment recursion by hand
    m1, v1 = (1 - b1) * g, (1 - b2) * g * g
    m2, v2 = b1 * m1 + (1 - b1) * g, b2 * v1 + (1 - b2) * g * g
    step2 = lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    np.testing.assert_allclose(w1 - w2, step2, rtol=1e-12)
    assert (np.abs(w2 - w1) <= np.abs(w1 - w0) + eps).all()


def test_checkpoint_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(5)
    store = ParamStore()
    store.add("enc.W", rng.normal(size=(3, 4)))
    store.add("enc.b", rng.normal(size=4))
    store.add("héad", rng.normal(size=(1, 1)))
    path = tmp_path / "ck.acdz"
    store.save(path)
    loaded = ParamStore.load(path)
    assert loaded.names() == store.names()
    loaded.save(tmp_path / "again.acdz")
    assert path.read_bytes() == (tmp_path / "again.acdz").read_bytes()
    assert path.read_bytes()[:4] == b"ACDZ"
    for name in store.names():
        assert loaded[name].data.tobytes() == store[name].data.tobytes()


def test_param_names_unique():
    store = ParamStore()
    store.add("a", np.zeros(2))
    with pytest.raises(KeyError):
        store.add("a", np.zeros(2))


def test_snapshot_is_independent():
    store = ParamStore()
    store.add("a", np.zeros(2))
    snap = store.snapshot()
    store["a"].data = store["a"].data + 1.0
    assert snap["a"].data.tolist() == [0.0, 0.0]
