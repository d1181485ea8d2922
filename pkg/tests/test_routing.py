import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoroute import gradsuite
from autoroute.errors import ConfigError, ShapeError
from autoroute.numgrad import DenseBlock, LayeredNet, Tensor, forward, grad_check, make_mlp
from autoroute.routing import (
    NULL,
    OPS,
    RouteParams,
    RouteParamStore,
    RoutingAction,
    SourceTransform,
    aggregate,
    build_action_space,
    init_op_params,
    routed_forward,
    transform,
)


def identity_transform(d):
    T = SourceTransform(d, d, np.random.default_rng(0))
    T.weight.values = np.eye(d)
    return T


def test_action_null_is_canonical():
    assert RoutingAction(None, "wAdd") == NULL
    assert NULL.label == "NULL" and RoutingAction.parse("NULL") is NULL
    assert RoutingAction.parse("2:FactRed") == RoutingAction(2, "FactRed")
    with pytest.raises(ConfigError):
        RoutingAction(0, "Mul")


def test_transform_identity_conditions():
    x = np.array([[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]])
    out = transform(identity_transform(2), Tensor(x), training=True)
    np.testing.assert_allclose(out.values, x, atol=1e-5)


def test_transform_zero_gamma_gives_beta():
    T = identity_transform(3)
    T.bn_gamma.values = np.zeros((1, 3))
    T.bn_beta.values = np.array([[0.5, -2.0, 3.0]])
    out = T(Tensor(np.random.default_rng(0).normal(size=(5, 3))), training=True)
    np.testing.assert_array_equal(out.values, np.repeat(T.bn_beta.values, 5, axis=0))


def test_transform_running_stats():
    T = identity_transform(1)
    x = np.array([[1.0], [3.0]])
    T(Tensor(x), training=True)
    assert T.running_mean[0, 0] == pytest.approx(0.1 * 2.0)
    assert T.running_var[0, 0] == pytest.approx(0.9 + 0.1 * 2.0)
    out = T(Tensor(x), training=False)
    expected = (x - T.running_mean) / np.sqrt(T.running_var + 1e-5)
    np.testing.assert_allclose(out.values, expected)


def test_transform_batch_of_one_stays_finite():
    T = identity_transform(2)
    out = T(Tensor([[4.0, 5.0]]), training=True)
    np.testing.assert_array_equal(out.values, [[0.0, 0.0]])


def test_transform_shape_error():
    with pytest.raises(ShapeError):
        identity_transform(2)(Tensor(np.ones((3, 4))), training=True)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("training", [True, False])
def test_transform_gradients(seed, training):
    f, params = gradsuite.case_transform(seed, training)
    assert grad_check(f, params).max_rel_error < 1e-4


def _params(op, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return RouteParams(SourceTransform(d, d, rng), init_op_params(op, d, rng), fm_weight=0.5)


def test_wadd_identity_case():
    rng = np.random.default_rng(1)
    tf_s, f_t = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    p = _params("wAdd")
    p.op["w_s"].values[:] = 0.0
    p.op["w_t"].values[:] = 1.0
    out, extra = aggregate(RoutingAction(0, "wAdd"), tf_s, f_t, p)
    np.testing.assert_array_equal(out.values, f_t.values)
    assert extra == 0.0


def test_sadd_with_zero_source():
    f_t = Tensor(np.arange(8.0).reshape(2, 4))
    out, _ = aggregate(RoutingAction(0, "sAdd"), Tensor(np.zeros((2, 4))), f_t, _params("sAdd"))
    np.testing.assert_array_equal(out.values, f_t.values)


def test_factred_with_selectors():
    rng = np.random.default_rng(2)
    tf_s, f_t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    p = _params("FactRed")
    selector = np.zeros((4, 2))
    selector[0, 0] = selector[1, 1] = 1.0
    p.op["reduce_s"].values = selector.copy()
    p.op["reduce_t"].values = selector.copy()
    out, _ = aggregate(RoutingAction(0, "FactRed"), Tensor(tf_s), Tensor(f_t), p)
    expected = np.array([list(a[:2]) + list(b[:2]) for a, b in zip(tf_s, f_t)])
    np.testing.assert_array_equal(out.values, expected)


def test_fm_extra_loss():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))
    out, extra = aggregate(RoutingAction(0, "FM"), Tensor(x), Tensor(x), _params("FM"))
    np.testing.assert_array_equal(out.values, x)
    assert extra.values[0, 0] == 0.0
    y = x + 1.0
    _, extra = aggregate(RoutingAction(0, "FM"), Tensor(y), Tensor(x), _params("FM"))
    assert extra.values[0, 0] == pytest.approx(0.5 * 2.0)


def test_iden_and_null_return_target():
    rng = np.random.default_rng(4)
    tf_s = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    f_t = Tensor(rng.normal(size=(2, 4)))
    for action in (NULL, RoutingAction(1, "Iden")):
        out, extra = aggregate(action, tf_s, f_t, _params("Iden"))
        assert out is f_t and extra == 0.0


def test_lincomb_gates_per_sample():
    tf_s = Tensor([[1.0, 3.0], [0.0, 0.0]])
    f_t = Tensor([[2.0, 2.0], [1.0, -1.0]])
    p = _params("LinComb", d=2)
    p.op["lin_s"].values[:] = 0.5
    p.op["lin_t"].values[:] = 2.0
    out, _ = aggregate(RoutingAction(0, "LinComb"), tf_s, f_t, p)
    # row 0: gate_s = 0.5 * 2, gate_t = 2 * 2; row 1: gate_s = 0, gate_t = 0
    np.testing.assert_allclose(out.values, [[1.0 + 8.0, 3.0 + 8.0], [0.0, 0.0]])


@pytest.mark.parametrize("op", OPS)
@pytest.mark.parametrize("seed", range(20))
def test_aggregate_gradients(op, seed):
    f, params = gradsuite.case_aggregate(seed, op)
    assert grad_check(f, params).max_rel_error < 1e-4


def test_wadd_weights_receive_gradient():
    rng = np.random.default_rng(5)
    p = _params("wAdd")
    out, _ = aggregate(RoutingAction(0, "wAdd"), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))), p)
    (out * rng.normal(size=(3, 4))).sum().backward()
    assert p.op["w_s"].grad[0, 0] != 0.0 and p.op["w_t"].grad[0, 0] != 0.0
    assert p.op["w_s"].values[0, 0] == p.op["w_t"].values[0, 0] == 0.5


# -- action space --------------------------------------------------------------


def test_route_action_count():
    space = build_action_space(3, "route", [16, 16, 16])
    assert [len(s) for s in space] == [4, 4, 4]
    assert all(s[0] is NULL for s in space)
    assert {a.op for a in space[0][1:]} == {"wAdd"}


def test_full_action_count():
    assert len(build_action_space(3, "full", [16])[0]) == 3 * 5 + 1
    assert len(build_action_space(4, "full", [16])[0]) == 21
    assert len(build_action_space(3, "full", [16], ops=OPS)[0]) == 3 * 6 + 1


def test_full_excludes_factred_on_odd_width():
    space = build_action_space(2, "full", [5, 4])
    assert all(a.op != "FactRed" for a in space[0])
    assert len(space[0]) == 2 * 4 + 1 and len(space[1]) == 2 * 5 + 1


def test_fixed_space():
    space = build_action_space(3, "fixed", [16, 16, 16])
    assert space == [[RoutingAction(0, "wAdd")], [RoutingAction(1, "wAdd")], [RoutingAction(2, "wAdd")]]
    space = build_action_space(3, "fixed", [16, 16, 16], pairs=[(2, 0)])
    assert space == [[RoutingAction(2, "wAdd")], [NULL], [NULL]]
    with pytest.raises(ConfigError):
        build_action_space(3, "fixed", [16, 16, 16], pairs=[(3, 0)])
    with pytest.raises(ConfigError):
        build_action_space(0, "route", [16])


# -- routed forward --------------------------------------------------------------


def _nets(seed, target_dims=(1, 4, 4, 4, 1)):
    rng = np.random.default_rng(seed)
    source = make_mlp([1, 6, 6, 6, 1], rng, trainable=False)
    target = make_mlp(list(target_dims), rng)
    store = RouteParamStore(source.tap_dims, target.tap_dims, seed=seed)
    return source, target, store, rng


def test_all_null_is_plain_forward_bitwise():
    source, target, store, rng = _nets(0)
    for _ in range(100):
        x = rng.normal(size=(int(rng.integers(1, 9)), 1)) * 3
        plain, _ = forward(target, x)
        routed, extra = routed_forward(source, target, [NULL] * 3, store, x, training=True)
        assert routed.values.tobytes() == plain.values.tobytes()
        assert extra == 0.0
    assert not store.entries


def test_single_layer_source_passthrough():
    """wAdd(1, 0) with an identity-capable transform feeds the source tap onward."""
    rng = np.random.default_rng(7)
    A = rng.normal(size=(1, 2))
    source = LayeredNet([DenseBlock(A, None), DenseBlock(np.ones((2, 1)))], [0], trainable=False)
    W1, W2 = rng.normal(size=(1, 2)), rng.normal(size=(2, 1))
    target = LayeredNet([DenseBlock(W1, None), DenseBlock(W2, None)], [0])
    store = RouteParamStore(source.tap_dims, target.tap_dims)
    action = RoutingAction(0, "wAdd")
    entry = store.get(0, action)
    entry.transform.weight.values = np.eye(2)
    entry.transform.running_var = np.full((1, 2), 1.0 - 1e-5)
    entry.op["w_s"].values[:] = 1.0
    entry.op["w_t"].values[:] = 0.0
    x = rng.normal(size=(5, 1))
    out, _ = routed_forward(source, target, [action], store, x, training=False)
    np.testing.assert_allclose(out.values, x @ A @ W2, rtol=1e-12)


def test_routed_shape_error_names_route():
    source, target, store, rng = _nets(1)
    store.source_dims[0] = 5  # corrupt: transform expects the wrong width
    with pytest.raises(ShapeError, match="route 0 -> 1"):
        routed_forward(source, target, [NULL, RoutingAction(0, "sAdd"), NULL], store, rng.normal(size=(3, 1)), True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(OPS), st.integers(1, 3), st.sampled_from([2, 4, 6]))
def test_shape_preservation(seed, op, j, d):
    rng = np.random.default_rng(seed)
    source = make_mlp([1, 5, 7, 3, 1], rng, trainable=False)
    target = make_mlp([1, d, d, d, 1], rng)
    store = RouteParamStore(source.tap_dims, target.tap_dims, seed=seed)
    x = rng.normal(size=(4, 1))
    _, plain_taps = forward(target, x)
    for layer in range(3):
        actions = [NULL] * 3
        actions[layer] = RoutingAction(j - 1, op)
        entry = store.get(layer, actions[layer])
        tf_s = entry.transform(forward(source, x)[1][j - 1], True)
        out, _ = aggregate(actions[layer], tf_s, plain_taps[layer], entry)
        assert out.shape == plain_taps[layer].shape


@pytest.mark.parametrize("op", OPS)
def test_gradient_isolation(op):
    source, target, store, rng = _nets(2)
    before = source.checksum()
    actions = [RoutingAction(0, op), RoutingAction(1, op), RoutingAction(2, op)]
    out, extra = routed_forward(source, target, actions, store, rng.normal(size=(6, 1)), training=True)
    ((out * out).mean() + extra).backward()
    assert all(p.grad is None for p in source.parameters())
    assert source.checksum() == before


def test_lazy_init_stability():
    source, target, store, rng = _nets(3)
    a, b = RoutingAction(0, "wAdd"), RoutingAction(2, "LinComb")
    pa = store.get(0, a)
    pa.op["w_s"].values = np.array([[0.123]])
    store.get(0, b)
    again = store.get(0, a)
    assert again is pa and again.op["w_s"].values[0, 0] == 0.123


def test_fresh_entries_independent_of_order():
    s1 = RouteParamStore([3, 3], [4], seed=5)
    s2 = RouteParamStore([3, 3], [4], seed=5)
    a, b = RoutingAction(0, "FactRed"), RoutingAction(1, "wAdd")
    s1.get(0, a)
    s1.get(0, b)
    s2.get(0, b)
    s2.get(0, a)
    for key in ((0, a), (0, b)):
        assert np.array_equal(s1.entries[key].transform.weight.values, s2.entries[key].transform.weight.values)


def test_iden_transform_not_trained():
    store = RouteParamStore([3], [4])
    params = store.trainable([RoutingAction(0, "Iden")])
    assert params == []
    params = store.trainable([RoutingAction(0, "wAdd")])
    assert len(params) == 5


@pytest.mark.parametrize("seed", range(20))
def test_routed_composite_gradients(seed):
    for ops, training in ((("wAdd", "LinComb", "FactRed"), True), (("sAdd", "FM", "Iden"), True), (("wAdd",) * 3, False)):
        f, params = gradsuite.case_routed(seed, ops, training)
        assert grad_check(f, params).max_rel_error < 1e-4
