import numpy as np
import pytest

from enggraph import diffcore as dc
from enggraph.errors import (
    ContractError,
    NumericDomainError,
    ShapeError,
    TapeStateError,
    TrainingDivergedError,
)


def finite_diff(f, x, step=1e-5):
    """Central finite differences of scalar f at x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def check_gradient(build_loss, x0, rtol=1e-4, step=1e-5):
    """build_loss(tensor) -> scalar DiffTensor; compares backward to FD."""
    tape = dc.Tape()
    leaf = tape.leaf(x0.copy())
    loss = build_loss(leaf)
    dc.backward(tape, loss)
    analytic = leaf.grad

    def f(x):
        t = dc.Tape()
        return float(build_loss(t.leaf(x)).values.reshape(()))

    numeric = finite_diff(f, x0.copy(), step=step)
    # FD noise floor for float64 central differences is ~1e-9 absolute, so an
    # element fails only if both the relative and absolute error are out
    diff = np.abs(analytic - numeric)
    rel = diff / np.maximum(np.abs(analytic), 1e-300)
    bad = (np.abs(analytic) > 1e-8) & (rel >= rtol) & (diff >= 1e-9)
    assert not bad.any(), f"max rel err {rel[bad].max():.2e}"


def test_softmax_uniform_on_zeros():
    out = dc.softmax_rows(dc.DiffTensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = dc.softmax_rows(dc.DiffTensor(rng.normal(size=(7, 5)) * 10))
    np.testing.assert_allclose(out.values.sum(axis=1), np.ones(7), atol=1e-12)


def test_relu_definition():
    out = dc.relu(dc.DiffTensor([-1.0, 2.0]))
    np.testing.assert_array_equal(out.values, [0.0, 2.0])


def test_matmul_against_naive_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 2))
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    out = dc.matmul(dc.DiffTensor(a), dc.DiffTensor(b))
    np.testing.assert_allclose(out.values, expected, rtol=1e-15)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        dc.matmul(dc.DiffTensor(np.zeros((2, 3))), dc.DiffTensor(np.zeros((2, 3))))


def test_log_domain_error():
    with pytest.raises(NumericDomainError):
        dc.log(dc.DiffTensor([1.0, 0.0]))


def test_exp_overflow_error():
    with pytest.raises(NumericDomainError):
        dc.exp(dc.DiffTensor([1000.0]))


def test_backward_square():
    tape = dc.Tape()
    x = tape.leaf([3.0])
    loss = dc.reduce_sum(dc.mul(x, x))
    dc.backward(tape, loss)
    np.testing.assert_allclose(x.grad, [6.0], rtol=1e-14)


def test_backward_softmax_sum_is_constant():
    tape = dc.Tape()
    x = tape.leaf(np.array([[0.3, -1.2, 2.0]]))
    loss = dc.reduce_sum(dc.softmax_rows(x))
    dc.backward(tape, loss)
    np.testing.assert_allclose(x.grad, np.zeros((1, 3)), atol=1e-12)


def test_backward_requires_scalar_loss():
    tape = dc.Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = dc.mul(x, x)
    with pytest.raises(ContractError):
        dc.backward(tape, y)


def test_tape_reuse_is_error():
    tape = dc.Tape()
    x = tape.leaf([1.0])
    loss = dc.reduce_sum(x)
    dc.backward(tape, loss)
    with pytest.raises(TapeStateError):
        dc.backward(tape, loss)


def test_nonparticipating_leaf_gets_zero_grad():
    tape = dc.Tape()
    x = tape.leaf([1.0, 2.0])
    unused = tape.leaf([5.0])
    dc.backward(tape, dc.reduce_sum(dc.mul(x, x)))
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_mixed_tapes_rejected():
    t1, t2 = dc.Tape(), dc.Tape()
    with pytest.raises(ContractError):
        dc.add(t1.leaf([1.0]), t2.leaf([1.0]))


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    w1 = rng.normal(size=(4, 8)) * 0.5
    w2 = rng.normal(size=(8, 8)) * 0.5
    w3 = rng.normal(size=(8, 1)) * 0.5
    x_in = rng.normal(size=(5, 4))
    for arr in (w1, w2, w3):
        def loss_of(v, target=arr):
            saved = target.copy()
            target[...] = v

            def run():
                tape = dc.Tape()
                lw1 = tape.leaf(w1)
                lw2 = tape.leaf(w2)
                lw3 = tape.leaf(w3)
                h = dc.relu(dc.matmul(dc.DiffTensor(x_in), lw1))
                h = dc.leaky_relu(dc.matmul(h, lw2))
                out = dc.matmul(h, lw3)
                return tape, (lw1, lw2, lw3), dc.reduce_sum(out)

            tape, leaves, loss = run()
            target[...] = saved
            return tape, leaves, loss, v

        # analytic gradient
        saved = arr.copy()

        def forward():
            tape = dc.Tape()
            leaves = (tape.leaf(w1), tape.leaf(w2), tape.leaf(w3))
            h = dc.relu(dc.matmul(dc.DiffTensor(x_in), leaves[0]))
            h = dc.leaky_relu(dc.matmul(h, leaves[1]))
            return tape, leaves, dc.reduce_sum(dc.matmul(h, leaves[2]))

        tape, leaves, loss = forward()
        dc.backward(tape, loss)
        analytic = {id(a): leaf.grad for a, leaf in zip((w1, w2, w3), leaves)}[id(arr)]

        def f(v):
            arr[...] = v
            _, _, l = forward()
            arr[...] = saved
            return float(l.values.reshape(()))

        numeric = finite_diff(f, arr.copy())
        mask = np.abs(analytic) > 1e-8
        rel = np.abs(analytic - numeric)[mask] / np.abs(analytic)[mask]
        assert rel.max() < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(4, 5))
    # keep inputs away from the relu/leaky-relu kink, where central
    # differences are not meaningful
    x0[np.abs(x0) < 1e-3] += 0.01
    w = rng.normal(size=(5, 3))
    idx = rng.integers(0, 4, size=7)
    seg_ptr = np.array([0, 3, 5, 7])

    cases = [
        lambda x: dc.reduce_sum(dc.mul(dc.matmul(x, dc.DiffTensor(w)),
                                       dc.matmul(x, dc.DiffTensor(w)))),
        lambda x: dc.reduce_sum(dc.relu(x)),
        lambda x: dc.reduce_sum(dc.leaky_relu(x, 0.2)),
        lambda x: dc.reduce_sum(dc.exp(dc.scale(x, 0.1))),
        lambda x: dc.reduce_sum(dc.log(dc.add(dc.mul(x, x), 1.0))),
        lambda x: dc.reduce_sum(dc.mul(dc.softmax_rows(x), dc.DiffTensor(x0))),
        lambda x: dc.reduce_sum(dc.powc(dc.add(dc.mul(x, x), 0.5), 1.7)),
        lambda x: dc.reduce_sum(dc.mul(dc.gather_rows(x, idx), dc.DiffTensor(np.arange(35.0).reshape(7, 5)))),
        lambda x: dc.reduce_sum(dc.mul(dc.scatter_add_rows(dc.gather_rows(x, idx), idx, 4), x)),
        lambda x: dc.reduce_sum(dc.mul(dc.segment_sum(dc.gather_rows(x, idx), seg_ptr),
                                       dc.segment_sum(dc.gather_rows(x, idx), seg_ptr))),
        lambda x: dc.reduce_sum(dc.mul(dc.segment_softmax(dc.gather_rows(x, idx), seg_ptr),
                                       dc.DiffTensor(np.arange(35.0).reshape(7, 5)))),
        lambda x: dc.reduce_sum(dc.mul(dc.reduce_mean(x, axis=0), dc.DiffTensor(np.arange(5.0)))),
        lambda x: dc.reduce_sum(dc.concat([x, dc.mul(x, x)], axis=1)),
        lambda x: dc.reduce_sum(dc.mul(
            dc.layernorm_rows(x, dc.DiffTensor(np.ones(5)), dc.DiffTensor(np.zeros(5))),
            dc.DiffTensor(x0))),
        lambda x: dc.reduce_sum(dc.sub(dc.mul(x, 2.0), dc.reduce_sum(x, axis=1, keepdims=True))),
    ]
    for build in cases:
        check_gradient(build, x0.copy())


def test_scatter_is_adjoint_of_gather():
    rng = np.random.default_rng(3)
    for _ in range(5):
        n, e, d = 6, 11, 4
        idx = rng.integers(0, n, size=e)
        a = rng.normal(size=(n, d))
        b = rng.normal(size=(e, d))
        # <gather(a), b> == <a, scatter(b)>
        lhs = np.sum(a[idx] * b)
        rhs = np.sum(a * dc.scatter_add_rows(dc.DiffTensor(b), idx, n).values)
        assert abs(lhs - rhs) < 1e-12


def test_dropout_mask_determinism_and_scaling():
    x = np.ones((100, 10))
    out1 = dc.dropout_mask(dc.DiffTensor(x), 0.7, np.random.default_rng(5))
    out2 = dc.dropout_mask(dc.DiffTensor(x), 0.7, np.random.default_rng(5))
    np.testing.assert_array_equal(out1.values, out2.values)
    kept = out1.values > 0
    assert np.allclose(out1.values[kept], 1 / 0.7)
    with pytest.raises(ContractError):
        dc.dropout_mask(dc.DiffTensor(x), 0.0, np.random.default_rng(0))


def test_forward_determinism():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 6))

    def run():
        tape = dc.Tape()
        leaf = tape.leaf(x)
        loss = dc.reduce_sum(dc.softmax_rows(dc.matmul(leaf, leaf)))
        dc.backward(tape, loss)
        return loss.values.copy(), leaf.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


class TestAdam:
    def _params(self, value):
        return dc.ModelParams({"w": np.array([value])})

    def test_zero_gradient_leaves_params_unchanged(self):
        p = self._params(1.5)
        st = dc.AdamState(p, lr=0.1)
        dc.adam_step(p, {"w": np.array([0.0])}, st)
        np.testing.assert_array_equal(p["w"], [1.5])

    def test_first_step_magnitude_is_lr(self):
        p = self._params(2.0)
        st = dc.AdamState(p, lr=0.1)
        dc.adam_step(p, {"w": np.array([1.0])}, st)
        # bias-corrected first step: lr * g/|g| (up to eps)
        assert abs((2.0 - p["w"][0]) - 0.1) < 1e-6

    def test_constant_gradient_monotone(self):
        p = self._params(0.0)
        st = dc.AdamState(p, lr=0.01)
        history = []
        for _ in range(100):
            dc.adam_step(p, {"w": np.array([1.0])}, st)
            history.append(p["w"][0])
        diffs = np.diff([0.0] + history)
        assert np.all(diffs < 0)
        assert st.step == 100

    def test_nan_gradient_names_parameter(self):
        p = self._params(0.0)
        st = dc.AdamState(p)
        with pytest.raises(TrainingDivergedError) as exc:
            dc.adam_step(p, {"w": np.array([np.nan])}, st)
        assert exc.value.param_name == "w"

    def test_invalid_hyperparameters(self):
        with pytest.raises(ContractError):
            dc.AdamState(self._params(0.0), lr=-1.0)
