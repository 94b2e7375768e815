import math

import numpy as np
import pytest

from shapeadv.tensor import AdamState, ShapeMismatchError, Tape, adam_step


def test_relu_clamps_negative():
    t = Tape()
    out = t.relu(t.constant([-2.0]))
    vals = t.evaluate()
    assert vals[out][0] == 0.0


def test_affine_identity_weight():
    t = Tape()
    x = t.constant([[1.0, 2.0]])
    w = t.constant(np.eye(2))
    b = t.constant([1.0, 1.0])
    out = t.affine(x, w, b)
    vals = t.evaluate()
    assert np.array_equal(vals[out], [[2.0, 3.0]])


def test_softmax_xent_uniform_logits():
    # -log(1/3) evaluated directly
    t = Tape()
    logits = t.constant([0.0, 0.0, 0.0])
    loss = t.softmax_xent(logits, 1)
    vals = t.evaluate()
    assert vals[loss] == pytest.approx(math.log(3.0), abs=1e-12)


def test_evaluate_deterministic():
    rng = np.random.default_rng(0)
    t = Tape()
    x = t.input((4, 3))
    w = t.parameter(rng.standard_normal((3, 5)))
    out = t.sum_reduce(t.relu(t.matmul(x, w)))
    bound = rng.standard_normal((4, 3))
    v1 = t.evaluate({x: bound})
    v2 = t.evaluate({x: bound})
    assert v1[out] == v2[out]
    for a, b in zip(v1, v2):
        assert np.array_equal(a, b)


def test_evaluate_rejects_bad_input_shape():
    t = Tape()
    x = t.input((2, 3))
    t.sum_reduce(x)
    with pytest.raises(ShapeMismatchError):
        t.evaluate({x: np.zeros((3, 2))})


def test_shape_mismatch_names_node():
    t = Tape()
    a = t.constant(np.zeros((2, 3)))
    b = t.constant(np.zeros((3, 3)))
    with pytest.raises(ShapeMismatchError, match="matmul"):
        t.matmul(a, a)
    t.matmul(a, b)  # fine


def test_gradient_square():
    t = Tape()
    x = t.parameter(3.0)
    loss = t.square(x)
    grads = t.gradient(loss)
    assert grads[x] == pytest.approx(6.0)


def test_gradient_requires_scalar_loss():
    t = Tape()
    x = t.parameter([1.0, 2.0])
    y = t.square(x)
    with pytest.raises(ValueError, match="not scalar"):
        t.gradient(y)


def test_max_reduce_adjoint_routes_to_argmax():
    t = Tape()
    v = t.parameter([1.0, 5.0, 2.0])
    loss = t.max_reduce(v)
    grads = t.gradient(loss)
    assert np.array_equal(grads[v], [0.0, 1.0, 0.0])


def test_max_reduce_tie_takes_lowest_index():
    t = Tape()
    v = t.parameter([4.0, 4.0, 4.0])
    loss = t.max_reduce(v)
    grads = t.gradient(loss)
    assert np.array_equal(grads[v], [1.0, 0.0, 0.0])


def test_min_reduce_axis_adjoint():
    t = Tape()
    m = t.parameter([[3.0, 1.0], [0.5, 2.0]])
    loss = t.sum_reduce(t.min_reduce(m, axis=1))
    grads = t.gradient(loss)
    assert np.array_equal(grads[m], [[0.0, 1.0], [1.0, 0.0]])


def test_chamfer_singleton_gradient():
    # squared Chamfer between single points a, b is 2 * ||a - b||^2;
    # hand differentiation at a=(0,0,0), b=(1,0,0) gives (-4, 0, 0)
    t = Tape()
    a = t.parameter([[0.0, 0.0, 0.0]])
    b = t.constant([[1.0, 0.0, 0.0]])
    d = t.pairwise_sqdist(a, b)
    loss = t.add(t.mean_reduce(t.min_reduce(d, axis=1)), t.mean_reduce(t.min_reduce(d, axis=0)))
    vals = t.evaluate()
    assert vals[loss] == pytest.approx(2.0)
    grads = t.gradient(loss, vals)
    assert np.allclose(grads[a], [[-4.0, 0.0, 0.0]])


def test_group_max_matches_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4))
    t = Tape()
    nid = t.group_max(t.constant(x), 3)
    vals = t.evaluate()
    expect = np.stack([x[:3].max(axis=0), x[3:].max(axis=0)])
    assert np.array_equal(vals[nid], expect)


def test_gather_and_concat_adjoints():
    t = Tape()
    x = t.parameter([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    picked = t.gather(x, [2, 0, 2])
    loss = t.sum_reduce(picked)
    grads = t.gradient(loss)
    assert np.array_equal(grads[x], [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])

    t2 = Tape()
    a = t2.parameter([[1.0]])
    b = t2.parameter([[2.0], [3.0]])
    cat = t2.concat_rows([a, b])
    loss2 = t2.sum_reduce(t2.square(cat))
    grads2 = t2.gradient(loss2)
    assert np.array_equal(grads2[a], [[2.0]])
    assert np.array_equal(grads2[b], [[4.0], [6.0]])


# --- finite-difference checks -----------------------------------------


def test_fd_square():
    t = Tape()
    x = t.parameter(1.0)
    loss = t.square(x)
    assert t.finite_difference_check(loss) < 1e-8


def test_fd_two_layer_mlp():
    rng = np.random.default_rng(11)
    t = Tape()
    x = t.constant(rng.standard_normal((4, 3)) + 0.05)
    w1 = t.parameter(rng.standard_normal((3, 8)) * 0.7)
    b1 = t.parameter(rng.standard_normal(8) * 0.1)
    w2 = t.parameter(rng.standard_normal((8, 2)) * 0.7)
    b2 = t.parameter(rng.standard_normal(2) * 0.1)
    h = t.relu(t.affine(x, w1, b1))
    out = t.affine(h, w2, b2)
    loss = t.softmax_xent(t.reshape(t.gather(out, [0]), (2,)), 1)
    assert t.finite_difference_check(loss) < 1e-5


def test_fd_chamfer_random_clouds():
    rng = np.random.default_rng(7)
    a_pts = rng.standard_normal((16, 3))
    b_pts = rng.standard_normal((16, 3))
    t = Tape()
    a = t.parameter(a_pts)
    b = t.parameter(b_pts)
    d = t.pairwise_sqdist(a, b)
    loss = t.add(
        t.mean_reduce(t.min_reduce(d, axis=1)), t.mean_reduce(t.min_reduce(d, axis=0))
    )
    assert t.finite_difference_check(loss) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_fd_each_op_smooth_inputs(seed):
    rng = np.random.default_rng(100 + seed)
    t = Tape()
    x = t.parameter(rng.standard_normal((3, 4)) * 0.8 + 1.5)
    y = t.parameter(rng.standard_normal((3, 4)) * 0.5)
    w = t.parameter(rng.standard_normal((4, 3)) * 0.6)
    vec = t.parameter(rng.standard_normal(5) * 0.9 + 0.2)
    pieces = [
        t.sum_reduce(t.mul(x, y)),
        t.mean_reduce(t.matmul(x, w)),
        t.l2_norm(t.sub(x, y)),
        t.sum_reduce(t.sqrt_eps(t.square(x))),
        t.max_reduce(vec),
        t.min_reduce(vec),
        t.sum_reduce(t.softmax(vec)),
        t.smul(t.mean_reduce(t.relu(x)), 1.7),
        t.softmax_xent(vec, 2),
    ]
    loss = pieces[0]
    for p in pieces[1:]:
        loss = t.add(loss, p)
    assert t.finite_difference_check(loss) < 1e-5


# --- Adam ---------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState(lr=0.05)
    adam_step(st, p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])
    assert st.step == 1


def test_adam_first_step_magnitude():
    # hand evaluation: m_hat = v_hat = 1 after one unit-gradient step, so the
    # update is lr / (1 + eps)
    p = {"w": np.array([0.0])}
    st = AdamState(lr=0.01)
    adam_step(st, p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-0.01 / (1.0 + 1e-8), abs=1e-15)


def test_adam_minimizes_quadratic():
    p = {"x": np.array([5.0])}
    st = AdamState(lr=0.1)
    for _ in range(1000):
        adam_step(st, p, {"x": 2.0 * p["x"]})
    assert abs(p["x"][0]) < 1e-3
    assert st.step == 1000


def test_adam_shape_mismatch():
    p = {"w": np.zeros((2, 2))}
    st = AdamState()
    with pytest.raises(ShapeMismatchError):
        adam_step(st, p, {"w": np.zeros(3)})
