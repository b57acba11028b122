# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

import numpy as np
import pytest

from group_contrast import ConfigurationError, ContractError, stream
from group_contrast.nodes import DimensionError, Leaf
from group_contrast.numerics import (
    AdamState,
    GradCheckCase,
    Graph,
    adam_step,
    apply,
    backward,
    grad_check,
    gradient_suite,
    primitive_forward,
)


def test_streams_are_reproducible_and_independent():
    first = stream(3, 'sampler', 0).random(4)

    assert np.array_equal(first, stream(3, 'sampler', 0).random(4))
    assert not np.array_equal(first, stream(3, 'sampler', 1).random(4))
    assert not np.array_equal(first, stream(4, 'sampler', 0).random(4))
    assert not np.array_equal(first, stream(3, 'augment', 0).random(4))

@pytest.mark.parametrize("seed", [-1, 1.5, 'seven'])
def test_stream_rejects_bad_seeds(seed):
    with pytest.raises(ConfigurationError): stream(seed)

def test_graph_counters():
    graph = Graph()
    a = graph.parameter(np.ones((2, 3)), 'a')
    b = graph.constant(np.ones((2, 3)))
    total = apply(graph, 'sum', apply(graph, 'add', a, b))

    assert graph.count == 4
    assert graph.height == 2
    assert graph.maxDegree == 2
    assert total.depth == 2
    assert [node.index for node in graph.nodes] == [0, 1, 2, 3]
    assert isinstance(graph.nodes[0], Leaf)

def test_duplicate_parameter_names():
    graph = Graph()
    graph.parameter(np.zeros(2), 'w')

    with pytest.raises(ContractError): graph.parameter(np.zeros(2), 'w')

def test_unknown_kind():
    with pytest.raises(ConfigurationError): apply(Graph(), 'softplus', np.zeros(3))

def test_inputs_of_another_graph():
    other = Graph().constant(np.zeros(3))

    with pytest.raises(ContractError): apply(Graph(), 'relu', other)

@pytest.mark.parametrize("kind,inputs,attrs", [
        ('linear', [np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(4)], {}),
        ('matmul', [np.zeros((2, 3)), np.zeros((2, 3))], {}),
        ('conv1d', [np.zeros((1, 1, 4, 2)), np.zeros((1, 1, 7))], {'axis': 3}),
        ('setpool', [np.zeros((2, 3))], {}),
        ('batchnorm', [np.zeros((1, 3)), np.ones(3), np.zeros(3)], {'training': True}),
        ('crossentropy', [np.zeros((2, 3))], {'targets': np.array([0, 3])}),
        ])
def test_dimension_errors(kind, inputs, attrs):
    with pytest.raises(DimensionError) as error:
        primitive_forward(kind, inputs, attrs)

    assert error.value.kind == kind

def test_backward_reports_unused_parameters_as_zero():
    graph = Graph()
    used = graph.parameter(np.array([1.0, -2.0, 3.0]), 'used')
    graph.parameter(np.ones((2, 2)), 'unused')
    loss = apply(graph, 'sum', apply(graph, 'relu', used))

    grads = backward(graph, loss)

    assert np.array_equal(grads['used'], [1.0, 0.0, 1.0])
    assert np.array_equal(grads['unused'], np.zeros((2, 2)))

def test_backward_accumulates_over_shared_inputs():
    graph = Graph()
    x = graph.parameter(np.array([[1.0, 2.0]]), 'x')
    square = apply(graph, 'matmul', x, x, transposeB=True)

    assert np.allclose(backward(graph, apply(graph, 'sum', square))['x'], [[2.0, 4.0]])

def test_backward_needs_a_scalar():
    graph = Graph()
    x = graph.parameter(np.ones(3), 'x')
    out = apply(graph, 'relu', x)

    with pytest.raises(ContractError): backward(graph, out)
    assert np.array_equal(backward(graph, out, np.full(3, 2.0))['x'], np.full(3, 2.0))

def test_relu_derivative_at_zero():
    graph = Graph()
    x = graph.parameter(np.zeros(2), 'x')

    assert np.array_equal(backward(graph, apply(graph, 'sum', apply(graph, 'relu', x)))['x'], [0.0, 0.0])

def test_crossentropy_mask_removes_entries():
    logits = np.array([[0.0, 50.0, 1.0]])
    mask = np.array([[False, True, False]])

    masked = primitive_forward('crossentropy', [logits], {'targets': np.array([0]), 'mask': mask})

    assert np.isclose(masked, np.log(1 + np.e))

def test_dropout_is_identity_in_evaluation():
    x = np.arange(6.0).reshape(2, 3)

    assert np.array_equal(primitive_forward('dropout', [x], {'rate': 0.5, 'training': False}), x)

def test_dropout_keeps_expectation():
    x = np.ones((100, 1000))
    out = primitive_forward('dropout', [x], {'rate': 0.5, 'training': True, 'rng': stream(0, 'dropout')})

    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.01

def test_batchnorm_normalizes_in_training():
    rng = stream(0, 'test')
    x = rng.standard_normal((64, 3)) * 5 + 2
    graph = Graph()
    out = apply(graph, 'batchnorm', x, np.ones(3), np.zeros(3), training=True)

    assert np.allclose(out.value.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(out.value.std(axis=0), 1, atol=1e-3)
    assert np.allclose(out.batchVar, x.var(axis=0, ddof=1))

def test_setpool_average_ignores_member_order():
    rng = stream(1, 'test')
    x = rng.standard_normal((1, 7, 5)).astype(np.float32)
    shuffled = x[:, rng.permutation(7)]

    for mode in ('max', 'avg', 'min'):
        assert np.array_equal(primitive_forward('setpool', [x], {'mode': mode}),
                              primitive_forward('setpool', [shuffled], {'mode': mode}))

def test_adam_first_step_moves_by_learning_rate():
    params = {'w': np.array([1.0, -1.0], dtype=np.float32)}
    grads = {'w': np.array([0.5, -3.0], dtype=np.float32)}

    newParams, state = adam_step(params, grads, AdamState(lr=0.1))

    assert np.allclose(newParams['w'], [0.9, -0.9], atol=1e-6)
    assert newParams['w'].dtype == np.float32
    assert state.t == 1
    assert np.array_equal(params['w'], [1.0, -1.0])

def test_adam_minimizes_a_quadratic():
    params = {'w': np.array([3.0, -2.0])}
    state = AdamState(lr=0.05)
    for _ in range(500):
        params, state = adam_step(params, {'w': 2 * params['w']}, state)

    assert np.allclose(params['w'], 0, atol=1e-2)

@pytest.mark.parametrize("changes", [{'lr': 0}, {'beta1': 1.0}, {'beta2': -0.1}, {'t': -1}])
def test_adam_rejects_bad_hyperparameters(changes):
    with pytest.raises(ConfigurationError): AdamState(**changes)

def test_adam_needs_every_gradient():
    with pytest.raises(ContractError): adam_step({'w': np.zeros(2)}, {}, AdamState())
    with pytest.raises(ContractError): adam_step({'w': np.zeros(2)}, {'w': np.zeros(3)}, AdamState())

def test_grad_check_with_explicit_sizes():
    report = grad_check('linear', {'n': 3, 'fin': 4, 'fout': 2}, seed=5)

    assert report.passed
    assert 'linear' in str(report)

def test_grad_check_detects_a_wrong_rule():
    case = GradCheckCase('scale', [np.ones(4)], {'factor': 2.0}, (0,))
    assert grad_check('scale', case).passed

    from group_contrast.nodes import Scale
    original = Scale.backward
    try:
        Scale.backward = lambda self, grad: (grad,)
        report = grad_check('scale', case)
    finally:
        Scale.backward = original

    assert not report.passed
    assert report.maxRelError > 0.49

def test_unknown_grad_check_case():
    with pytest.raises(ConfigurationError): grad_check('nothing')

def test_gradient_suite_covers_every_neural_primitive():
    kinds = {report.case for report in gradient_suite(seeds=2)}

    assert {'conv1d', 'linear', 'batchnorm', 'batchnorm-eval', 'relu', 'maxpool', 'avgpool',
            'dropout', 'crossentropy'} <= kinds
