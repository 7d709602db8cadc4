import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import graphcore as gc
from graphcore import GraphError, ParamSet


def _params(**arrays_by_name) -> ParamSet:
    params = ParamSet()
    for name, value in arrays_by_name.items():
        params.add(name, value)
    return params


rng = np.random.default_rng(11)
_MASK = np.tril(np.ones((3, 3), dtype=bool))

# op kind -> (builder over the ParamSet, initial arrays)
OP_CASES = {
    'add': (lambda p: p['a'] + p['b'], dict(a=rng.normal(size=(3, 4)), b=rng.normal(size=4))),
    'sub': (lambda p: p['a'] - p['b'], dict(a=rng.normal(size=(3, 4)), b=rng.normal(size=(3, 1)))),
    'mul': (lambda p: p['a'] * p['b'], dict(a=rng.normal(size=(3, 4)), b=rng.normal(size=4))),
    'div': (lambda p: p['a'] / p['b'], dict(a=rng.normal(size=(3, 4)), b=rng.uniform(1.0, 2.0, 4))),
    'neg': (lambda p: -p['a'], dict(a=rng.normal(size=3))),
    'exp': (lambda p: gc.exp(p['a']), dict(a=rng.normal(size=3))),
    'log': (lambda p: gc.log(p['a']), dict(a=rng.uniform(0.5, 2.0, 3))),
    'tanh': (lambda p: gc.tanh(p['a']), dict(a=rng.normal(size=3))),
    'silu': (lambda p: gc.silu(p['a']), dict(a=rng.normal(size=(2, 3)))),
    'clamp': (lambda p: gc.clamp(p['a'], -1.0, 1.0), dict(a=np.array([-1.5, -0.5, 0.3, 1.7]))),
    'matmul': (lambda p: p['a'] @ p['b'], dict(a=rng.normal(size=(2, 3, 4)), b=rng.normal(size=(4, 5)))),
    'sum': (lambda p: gc.reduce_sum(p['a'], axis=1), dict(a=rng.normal(size=(2, 3, 2)))),
    'mean': (lambda p: gc.reduce_mean(p['a'], axis=(0, 2), keepdims=True), dict(a=rng.normal(size=(2, 3, 2)))),
    'softmax': (lambda p: gc.softmax(p['a'], axis=-1), dict(a=rng.normal(size=(2, 4)))),
    'concat': (lambda p: gc.concat([p['a'], p['b']], axis=-1), dict(a=rng.normal(size=(2, 3)), b=rng.normal(size=(2, 2)))),
    'slice': (lambda p: gc.take_slice(p['a'], (Ellipsis, slice(1, 3))), dict(a=rng.normal(size=(2, 4)))),
    'take_rows': (lambda p: gc.take_rows(p['a'], [0, 2, 0]), dict(a=rng.normal(size=(3, 2)))),
    'permute_tokens': (lambda p: gc.permute_tokens(p['a'], [2, 0, 1]), dict(a=rng.normal(size=(2, 3, 2)))),
    'reshape': (lambda p: gc.reshape(p['a'], (3, 2)), dict(a=rng.normal(size=(2, 3)))),
    'broadcast_to': (lambda p: gc.broadcast_to(p['a'], (4, 3)), dict(a=rng.normal(size=(1, 3)))),
    'swap_last': (lambda p: gc.swap_last(p['a']), dict(a=rng.normal(size=(2, 3, 4)))),
    'cosine_similarity': (lambda p: gc.cosine_similarity(p['a'], p['b']),
                          dict(a=rng.normal(size=(3, 4)), b=rng.normal(size=(3, 4)))),
    'masked': (lambda p: gc.softmax(gc.masked(p['a'], _MASK), axis=-1), dict(a=rng.normal(size=(3, 3)))),
}


def _weighted(builder):
    def objective(params):
        out = builder(params)
        weights = np.random.default_rng(5).normal(size=out.shape)
        return gc.reduce_sum(out * weights)
    return objective


def test_every_registered_op_has_a_gradient_case():
    assert set(OP_CASES) == set(gc.registered_ops())


@pytest.mark.parametrize('op_kind', sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(op_kind):
    builder, initial = OP_CASES[op_kind]
    params = _params(**{k: np.array(v) for k, v in initial.items()})
    objective = _weighted(builder)

    analytic = gc.backward(objective(params))
    numeric = gc.finite_diff_grad(objective, params)
    for name in params:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-7)


def test_finite_diff_of_square():
    params = _params(p=np.array(1.0))
    grads = gc.finite_diff_grad(lambda ps: ps['p'] * ps['p'], params, epsilon=1e-4)
    assert abs(grads['p'] - 2.0) < 1e-6


def test_backward_matches_finite_diff_on_random_quadratic():
    r = np.random.default_rng(3)
    a = r.normal(size=(10, 10))
    a = a @ a.T
    params = _params(p=r.normal(size=10))

    def objective(ps):
        return gc.reduce_sum(ps['p'] * (ps['p'] @ a))

    analytic = gc.backward(objective(params))['p']
    numeric = gc.finite_diff_grad(objective, params)['p']
    assert gc.relative_error(analytic, numeric) < 1e-5


def test_finite_diff_rejects_bad_epsilon():
    params = _params(p=np.array(1.0))
    with pytest.raises(GraphError):
        gc.finite_diff_grad(lambda ps: ps['p'], params, epsilon=0.0)


def test_cut_stops_gradient_and_drops_unreachable_leaves():
    params = _params(a=np.array([1.0, 2.0]), b=np.array([3.0, -1.0]))
    loss = gc.reduce_sum(params['a'] * gc.cut(params['b']))
    grads = gc.backward(loss)
    np.testing.assert_array_equal(grads['a'], [3.0, -1.0])
    assert 'b' not in grads


def test_cut_on_both_paths_keeps_only_live_one():
    params = _params(a=np.array([2.0]))
    loss = gc.reduce_sum(params['a'] * gc.cut(params['a']))
    # d/da (a * const) with const = a -> a, not 2a
    np.testing.assert_allclose(gc.backward(loss)['a'], [2.0])


def test_cut_copies_data():
    params = _params(a=np.array([1.0, 2.0]))
    frozen = gc.cut(params['a'])
    params['a'].data[...] = 0.0
    np.testing.assert_array_equal(frozen.data, [1.0, 2.0])
    assert not frozen.requires_grad and frozen.is_leaf


def test_gradient_accumulates_over_shared_leaf():
    params = _params(a=np.array([1.5]))
    loss = gc.reduce_sum(params['a'] * params['a'] + 3.0 * params['a'])
    np.testing.assert_allclose(gc.backward(loss)['a'], [6.0])


def test_backward_requires_scalar():
    params = _params(a=np.ones(3))
    with pytest.raises(GraphError) as err:
        gc.backward(params['a'] * 2.0)
    assert err.value.op == 'backward'


def test_constant_loss_has_no_gradients():
    assert gc.backward(gc.reduce_sum(gc.constant(np.ones(3)))) == {}


def test_shape_error_names_op_and_shapes():
    with pytest.raises(GraphError) as err:
        gc.matmul(gc.constant(np.ones((2, 3))), gc.constant(np.ones((4, 2))))
    assert err.value.op == 'matmul'
    assert err.value.shapes == ((2, 3), (4, 2))


def test_unknown_op_kind():
    with pytest.raises(GraphError):
        gc.record('no_such_op', [gc.constant(1.0)])


def test_leaf_needs_a_name():
    with pytest.raises(GraphError):
        gc.leaf(np.ones(2), '')


def test_count_nodes_counts_only_differentiable_nodes():
    params = _params(a=np.ones(3))
    with gc.count_nodes() as counter:
        gc.exp(gc.constant(np.ones(3)))
        gc.reduce_sum(gc.exp(params['a']))
    assert counter.total == 2


def test_nested_counters_both_count():
    params = _params(a=np.ones(2))
    with gc.count_nodes() as outer:
        gc.exp(params['a'])
        with gc.count_nodes() as inner:
            gc.tanh(params['a'])
    assert (outer.total, inner.total) == (2, 1)


def test_cosine_of_zero_vector_is_zero_with_zero_gradient():
    params = _params(a=np.zeros((1, 3)), b=np.ones((1, 3)))
    loss = gc.reduce_sum(gc.cosine_similarity(params['a'], params['b']))
    assert float(loss.data) == 0.0
    grads = gc.backward(loss)
    assert np.all(np.isfinite(grads['a'])) and np.all(grads['b'] == 0.0)


class TestParamSet:
    def test_duplicate_name(self):
        params = _params(a=np.ones(2))
        with pytest.raises(GraphError):
            params.add('a', np.ones(2))

    def test_iteration_is_lexicographic(self):
        params = _params(b=np.ones(1), a=np.ones(1), c=np.ones(1))
        assert list(params) == ['a', 'b', 'c']
        assert params.with_prefix('b') == ['b']

    def test_load_arrays_checks_names_and_shapes(self):
        params = _params(a=np.ones(2))
        with pytest.raises(GraphError):
            params.load_arrays({'z': np.ones(2)})
        with pytest.raises(GraphError):
            params.load_arrays({'a': np.ones(3)})
        params.load_arrays({'a': np.array([4.0, 5.0])})
        np.testing.assert_array_equal(params['a'].data, [4.0, 5.0])

    def test_copy_is_independent(self):
        params = _params(a=np.ones(2))
        clone = params.copy()
        clone['a'].data[...] = 7.0
        np.testing.assert_array_equal(params['a'].data, [1.0, 1.0])
        assert params.num_scalars() == 2


# ============================================================================
# PROPERTIES
# ============================================================================
_finite = st.one_of(st.just(0.0), st.floats(min_value=0.01, max_value=5.0), st.floats(min_value=-5.0, max_value=-0.01))


@given(arrays(np.float64, (3, 4), elements=_finite))
@settings(max_examples=40, deadline=None)
def test_softmax_gradient_sums_to_zero_per_row(x):
    params = _params(x=x)
    weights = np.arange(12.0).reshape(3, 4)
    grads = gc.backward(gc.reduce_sum(gc.softmax(params['x'], axis=-1) * weights))
    np.testing.assert_allclose(grads['x'].sum(axis=-1), 0.0, atol=1e-9)


@given(arrays(np.float64, (2, 5, 3), elements=_finite), st.permutations(range(5)))
@settings(max_examples=40, deadline=None)
def test_permute_then_inverse_is_identity_with_identity_gradient(x, order):
    params = _params(x=x)
    order = np.asarray(order)
    back = gc.permute_tokens(gc.permute_tokens(params['x'], order), np.argsort(order))
    np.testing.assert_array_equal(back.data, x)
    np.testing.assert_array_equal(gc.backward(gc.reduce_sum(back))['x'], np.ones_like(x))


@given(arrays(np.float64, (4, 3), elements=_finite), st.floats(min_value=0.1, max_value=10.0))
@settings(max_examples=40, deadline=None)
def test_cosine_similarity_is_scale_invariant(x, scale):
    y = np.flip(x, axis=-1) + 0.5
    a = gc.cosine_similarity(gc.constant(x), gc.constant(y)).data
    b = gc.cosine_similarity(gc.constant(scale * x), gc.constant(y)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
