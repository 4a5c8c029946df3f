import math

import numpy as np
import pytest

from forec.numgrad import (Adam, GradTape, NumericError, ParamSet, SGD, ShapeError, TapeError, Tensor, add,
                           backward, bce_loss, concat, elementwise_mul, gather_rows, matmul, reduce_sum,
                           relu, reshape, sgd_step, sigmoid)

from fd import REL_TOL, fd_grad, rel_err


def _grad_of(build, arrays):
    """Tape gradients of reduce_sum(build(*tensors)) w.r.t. every input array."""
    params = ParamSet({f"x{k}": Tensor(a) for k, a in enumerate(arrays)})
    with GradTape():
        loss = reduce_sum(build(*[params[f"x{k}"] for k in range(len(arrays))]))
    g = backward(loss, params)
    return [g[f"x{k}"].numpy() for k in range(len(arrays))]


def _fd_of(build, arrays, k):
    def f(x):
        args = [Tensor(a) for a in arrays]
        args[k] = Tensor(x)
        return float(build(*args).numpy().sum())
    return fd_grad(f, arrays[k])


def _check(build, arrays):
    tape = _grad_of(build, arrays)
    for k in range(len(arrays)):
        assert rel_err(tape[k], _fd_of(build, arrays, k)) < REL_TOL


def _off_kink(x):
    # keep relu inputs away from 0, where central differences straddle the kink
    return x + 0.1 * np.sign(x)


# every op, randomised over [-2, 2]; 8 builders x 13 trials = 104 checks
def _ops(rng):
    m, k, n = rng.integers(1, 5, size=3)
    u = lambda *s: rng.uniform(-2, 2, size=s)
    idx = rng.integers(0, 4, size=6)
    return [
        (matmul, [u(m, k), u(k, n)]),
        (add, [u(m, n), u(m, n)]),
        (add, [u(m, n), u(n)]),
        (elementwise_mul, [u(m, n), u(m, n)]),
        (lambda a, b: concat(a, b, axis=1), [u(m, k), u(m, n)]),
        (lambda a: relu(a), [_off_kink(u(m, n))]),
        (lambda a: sigmoid(a), [u(m, n)]),
        (lambda t: gather_rows(t, idx), [u(4, n)]),
    ]


@pytest.mark.parametrize("trial", range(13))
def test_op_gradients_match_finite_differences(trial):
    rng = np.random.default_rng(trial)
    for build, arrays in _ops(rng):
        _check(build, arrays)


def test_composite_gradients_and_reshape():
    rng = np.random.default_rng(7)
    w, x, b = rng.uniform(-2, 2, (3, 2)), rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, 2)
    _check(lambda w, x, b: reshape(sigmoid(add(matmul(x, w), b)), (8,)), [w, x, b])


def test_bce_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    z = rng.uniform(-2, 2, 6)
    y = (rng.random(6) > 0.5).astype(float)
    build = lambda t: bce_loss(sigmoid(t), y)
    params = ParamSet({"z": Tensor(z)})
    with GradTape():
        loss = build(params["z"])
    g = backward(loss, params)["z"].numpy()
    assert rel_err(g, fd_grad(lambda v: build(Tensor(v)).item(), z)) < REL_TOL


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).numpy(), a)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).numpy().tolist() == [[11.0]]
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    x = Tensor([1.0, 2.0, 3.0])
    assert elementwise_mul(x, Tensor([0.0, 0.0, 0.0])).numpy().tolist() == [0.0, 0.0, 0.0]
    assert elementwise_mul(x, Tensor([1.0, 1.0, 1.0])).numpy().tolist() == [1.0, 2.0, 3.0]
    # d(a*b)/da = b
    b = np.array([0.3, -1.2, 2.0])
    g = _grad_of(elementwise_mul, [np.array([1.0, 2.0, 3.0]), b])[0]
    assert rel_err(g, b) < REL_TOL
    with pytest.raises(ShapeError):
        elementwise_mul(x, Tensor([1.0, 2.0]))


def test_concat_examples():
    assert concat(Tensor([1.0, 2.0]), Tensor([3.0])).numpy().tolist() == [1.0, 2.0, 3.0]
    x = Tensor([[1.0, 2.0]])
    assert np.array_equal(concat(x, Tensor(np.zeros((1, 0)))).numpy(), x.numpy())
    ga, gb = _grad_of(concat, [np.array([1.0, 2.0]), np.array([3.0])])
    assert ga.tolist() == [1.0, 1.0] and gb.tolist() == [1.0]


def test_activation_examples():
    assert relu(Tensor([-1.0, 2.0])).numpy().tolist() == [0.0, 2.0]
    assert sigmoid(Tensor([0.0])).numpy().tolist() == [0.5]
    g = _grad_of(sigmoid, [np.array([0.0])])[0]
    assert g[0] == 0.25
    assert abs(fd_grad(lambda v: float(sigmoid(Tensor(v)).numpy().sum()), np.array([0.0]))[0] - 0.25) < 1e-8
    # subgradient at exactly zero is zero
    assert _grad_of(relu, [np.array([0.0, 1.0])])[0].tolist() == [0.0, 1.0]
    # extreme logits stay finite
    assert sigmoid(Tensor([-800.0, 800.0])).numpy().tolist() == [0.0, 1.0]


def test_bce_examples():
    assert math.isclose(bce_loss(Tensor([0.5]), [1.0]).item(), math.log(2), rel_tol=1e-12)
    assert bce_loss(Tensor([1.0]), [1.0]).item() < 1e-6
    assert math.isclose(bce_loss(Tensor([0.9, 0.1]), [1.0, 0.0]).item(), -math.log(0.9), rel_tol=1e-12)
    # clamped, not infinite
    assert math.isfinite(bce_loss(Tensor([0.0]), [1.0]).item())
    with pytest.raises(ValueError):
        bce_loss(Tensor([0.5]), [0.5])


def test_backward_sum_gives_ones_and_frozen_absent():
    params = ParamSet({"w": Tensor(np.arange(6.0).reshape(2, 3)), "f": Tensor([1.0, 2.0])}, frozen=["f"])
    with GradTape():
        loss = add(reduce_sum(params["w"]), reduce_sum(params["f"]))
    g = backward(loss, params)
    assert np.array_equal(g["w"].numpy(), np.ones((2, 3)))
    assert "f" not in g


def test_unused_parameter_gets_zero_gradient():
    params = ParamSet({"w": Tensor([1.0, 2.0]), "unused": Tensor(np.ones((2, 2)))})
    with GradTape():
        loss = reduce_sum(params["w"])
    g = backward(loss, params)
    assert np.array_equal(g["unused"].numpy(), np.zeros((2, 2)))


def test_backward_needs_a_tape_and_consumes_it():
    params = ParamSet({"w": Tensor([1.0])})
    with pytest.raises(TapeError):
        backward(reduce_sum(params["w"]), params)
    with GradTape():
        loss = reduce_sum(params["w"])
    backward(loss, params)
    with pytest.raises(TapeError):
        backward(loss, params)
    with GradTape():
        with pytest.raises(TapeError):
            backward(Tensor([1.0, 2.0]), params)


def test_backward_does_not_mutate_params():
    rng = np.random.default_rng(0)
    params = ParamSet({"w": Tensor(rng.normal(size=(3, 2))), "x": Tensor(rng.normal(size=(4, 3)))})
    before = {n: params[n].numpy().tobytes() for n in params}
    with GradTape():
        loss = reduce_sum(sigmoid(matmul(params["x"], params["w"])))
    backward(loss, params)
    assert {n: params[n].numpy().tobytes() for n in params} == before


def test_tensor_invariants():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        add(Tensor([1e308]), Tensor([1e308]))
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.numpy()[0] = 5.0
    assert t.shape == (2,) and t.size == 2


def test_sgd_step_examples():
    p = ParamSet({"t": Tensor([1.0])})
    g = {"t": Tensor([1.0])}
    assert sgd_step(p, g, 0.0)["t"].numpy().tolist() == [1.0]
    assert sgd_step(p, g, 0.1)["t"].numpy().tolist() == [0.9]
    out = sgd_step(p, {"t": Tensor([0.0])}, 0.1, l2=0.001)
    assert math.isclose(out["t"].item(), 0.9998, rel_tol=0, abs_tol=1e-15)


def test_sgd_step_never_touches_frozen_params():
    p = ParamSet({"a": Tensor([1.0, 2.0]), "b": Tensor([3.0])}, frozen=["b"])
    before = p["b"].numpy().tobytes()
    out = sgd_step(p, {"a": Tensor([1.0, 1.0])}, 0.5, l2=0.1)
    assert out["b"].numpy().tobytes() == before
    with pytest.raises(KeyError):
        sgd_step(p, {"a": Tensor([1.0, 1.0]), "b": Tensor([1.0])}, 0.5)
    with pytest.raises(ValueError):
        p.replace({"b": Tensor([0.0])})


def test_optimizers_keep_frozen_and_are_deterministic():
    rng = np.random.default_rng(1)
    init = ParamSet({"a": Tensor(rng.normal(size=3)), "b": Tensor(rng.normal(size=2))}, frozen=["b"])

    def run(opt):
        p = init
        for _ in range(5):
            with GradTape():
                loss = reduce_sum(elementwise_mul(p["a"], p["a"]))
            p = opt.step(p, backward(loss, p))
        return p

    for make in (lambda: Adam(0.1, 0.01), lambda: SGD(0.1, 0.01)):
        x, y = run(make()), run(make())
        assert x["a"].numpy().tobytes() == y["a"].numpy().tobytes()
        assert x["b"].numpy().tobytes() == init["b"].numpy().tobytes()
        assert np.abs(x["a"].numpy()).sum() < np.abs(init["a"].numpy()).sum()


def test_adam_first_step_matches_formula():
    p = ParamSet({"w": Tensor([1.0, -2.0])})
    g = {"w": Tensor([0.5, -0.25])}
    out = Adam(0.01).step(p, g)
    # with bias correction the first step is lr * g / (|g| + eps')
    expected = p["w"].numpy() - 0.01 * np.sign(g["w"].numpy())
    assert np.allclose(out["w"].numpy(), expected, atol=1e-9)


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(64, 16)), rng.normal(size=(16, 8))
    r1 = sigmoid(matmul(Tensor(a), Tensor(b))).numpy().tobytes()
    r2 = sigmoid(matmul(Tensor(a), Tensor(b))).numpy().tobytes()
    assert r1 == r2


def test_paramset_mapping_behaviour():
    p = ParamSet({"b": Tensor([1.0]), "a": Tensor([2.0, 3.0])}, frozen=["a"])
    assert list(p) == ["b", "a"]
    assert p.frozen_names == ["a"] and p.trainable_names == ["b"]
    assert p.num_parameters() == 3
    with pytest.raises(KeyError):
        ParamSet({"a": Tensor([1.0])}, frozen=["zz"])
