# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

from __future__ import annotations

import copy
import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from group_contrast import ConfigurationError, ContractError, stream
from group_contrast.nodes import PRIMITIVES, Leaf, Node, Primitive

log = logging.getLogger(__name__)


class Graph:
    """A tape of primitive applications, recorded in topological order.

    Contains the following variables:

    - ``nodes``, every node of the graph, indexed by ``Node.index``. A node's
      inputs always precede it, so the list is a topological order;
    - ``count``, the number of nodes;
    - ``height``, the greatest ``depth`` of any node;
    - ``maxDegree``, the greatest number of inputs that a single node has.

    Nodes are created with ``parameter``, ``constant`` and :py:func:`apply`.
    Values are computed eagerly and cached on the nodes, so a graph is
    acyclic by construction.
    """
    nodes = None
    count = 0
    height = 0
    maxDegree = 0

    def __init__(self):
        self.nodes = []
        self.names = {}
        self.count = 0
        self.height = 0
        self.maxDegree = 0

    def add(self, node: Node) -> Node:
        node.graph = self
        node.index = self.count
        node.depth = 1 + max((i.depth for i in node.inputs), default=-1)
        self.nodes.append(node)

        self.count += 1
        self.height = node.depth if node.depth > self.height else self.height
        self.maxDegree = len(node.inputs) if len(node.inputs) > self.maxDegree else self.maxDegree

        return node

    def parameter(self, value, name: str) -> Leaf:
        """Add a named leaf whose gradient :py:func:`backward` reports."""
        if name in self.names:
            raise ContractError(f'Parameter `{name}` is already in the graph')
        leaf = self.add(Leaf(value, name, requiresGrad=True))
        self.names[name] = leaf
        return leaf
    def constant(self, value) -> Leaf:
        """Add an unnamed leaf that no gradient flows to."""
        return self.add(Leaf(value))

    def __repr__(self):
        return (f'Graph{{count = {self.count}, height = {self.height}, '
                f'maxDegree={self.maxDegree}}}')

def apply(graph: Graph, kind: str, *inputs, **attrs) -> Primitive:
    """Apply the primitive ``kind`` to ``inputs`` and record it in ``graph``.

    Inputs that are not nodes are added to the graph as constants first.
    Raises |ConfigurationError| for unknown kinds and |DimensionError| for
    inputs the primitive cannot handle.
    """
    cls = PRIMITIVES.get(kind)
    if cls is None:
        raise ConfigurationError(f'Unknown primitive kind `{kind}`, expected one of '
                                 f'{sorted(PRIMITIVES)}')

    nodes = [i if isinstance(i, Node) else graph.constant(i) for i in inputs]
    for node in nodes:
        if node.graph is not graph:
            raise ContractError(f'Input {node!r} of `{kind}` belongs to another graph')

    primitive = cls(nodes, attrs)
    values = [node.value for node in nodes]
    primitive.check(*values)
    primitive.value = np.asarray(primitive.forward(*values))
    primitive.requiresGrad = any(node.requiresGrad for node in nodes)

    return graph.add(primitive)

def primitive_forward(kind: str, inputs, attrs: dict | None = None) -> np.ndarray:
    """Evaluate one primitive on plain arrays, outside of any training graph."""
    return apply(Graph(), kind, *inputs, **(attrs or {})).value

def backward(graph: Graph, output: Node, outputGrad=None) -> dict:
    """Back-propagate from ``output`` and return the gradient map.

    The map is keyed by parameter name and holds one gradient per named
    parameter of ``graph``. Parameters the output does not depend on get
    zero tensors.

    ``output`` must be a scalar unless ``outputGrad``, the gradient of some
    scalar with respect to ``output``, is given.
    """
    if output.graph is not graph:
        raise ContractError(f'{output!r} is not part of {graph!r}')
    if outputGrad is None:
        if output.value.size != 1 or output.value.ndim > 1:
            raise ContractError(f'Loss must be a scalar, got shape {output.value.shape}')
        outputGrad = np.ones_like(output.value)
    outputGrad = np.asarray(outputGrad, dtype=output.value.dtype)
    if outputGrad.shape != output.value.shape:
        raise ContractError(f'Output gradient of shape {outputGrad.shape} does not '
                            f'match output of shape {output.value.shape}')

    grads = {output.index: outputGrad}
    result = {}
    #Walks the tape backwards, every consumer of a node is visited before it
    for node in reversed(graph.nodes[: output.index + 1]):
        grad = grads.pop(node.index, None)
        if grad is None or not node.requiresGrad:
            continue

        if isinstance(node, Leaf):
            if node.name is not None:
                result[node.name] = grad
            continue

        for source, sourceGrad in zip(node.inputs, node.backward(grad)):
            if sourceGrad is None or not source.requiresGrad:
                continue
            if source.index in grads:
                grads[source.index] = grads[source.index] + sourceGrad
            else:
                grads[source.index] = sourceGrad

    for name, leaf in graph.names.items():
        if name not in result:
            result[name] = np.zeros_like(leaf.value)
        else:
            result[name] = np.asarray(result[name], dtype=leaf.value.dtype).reshape(leaf.value.shape)
    return result

@dataclass
class AdamState:
    """Optimizer state of Adam.

    ``m`` and ``v`` map parameter names to the first and second moment
    estimates and are created lazily, zero-initialized, on the first step. ``t``
    is the number of completed steps.
    """
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f'Learning rate must be positive, got {self.lr}')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError(f'Betas must lie in [0, 1), got {self.beta1}, {self.beta2}')
        if self.t < 0:
            raise ConfigurationError(f'Step counter must be non-negative, got {self.t}')

def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update.

    Returns new parameter and state objects, the inputs are left untouched.
    Every parameter needs a gradient of its own shape.
    """
    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    newParams, newM, newV = {}, {}, {}
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ContractError(f'No gradient for parameter `{name}`')
        if grad.shape != param.shape:
            raise ContractError(f'Gradient of `{name}` has shape {grad.shape}, '
                                f'parameter has shape {param.shape}')
        dtype = param.dtype.type
        grad = grad.astype(param.dtype, copy=False)

        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        if m.shape != param.shape or v.shape != param.shape:
            raise ContractError(f'Moments of `{name}` do not match the parameter shape')

        m = dtype(state.beta1) * m + dtype(1.0 - state.beta1) * grad
        v = dtype(state.beta2) * v + dtype(1.0 - state.beta2) * (grad * grad)
        mHat = m / dtype(correction1)
        vHat = v / dtype(correction2)

        newParams[name] = param - dtype(state.lr) * mHat / (np.sqrt(vHat) + dtype(state.epsilon))
        newM[name] = m
        newV[name] = v

    newState = AdamState(state.lr, state.beta1, state.beta2, state.epsilon, t,
                         {**state.m, **newM}, {**state.v, **newV})
    return newParams, newState

@dataclass
class GradCheckCase:
    """Inputs and attributes for checking one primitive.

    ``wrt`` lists the indices of the inputs that are differentiated.
    """
    kind: str
    inputs: list
    attrs: dict
    wrt: tuple

@dataclass
class GradCheckReport:
    """Outcome of a gradient check.

    ``maxAbsError`` and ``maxRelError`` are the largest absolute and relative
    differences between the analytic and the central-difference gradients,
    ``passed`` tells whether every element was within tolerance.
    """
    case: str
    seed: int
    maxAbsError: float
    maxRelError: float
    passed: bool

    def __str__(self):
        verdict = 'ok' if self.passed else 'FAILED'
        return (f'{self.case:<16} seed={self.seed:<4} max abs={self.maxAbsError:.3e} '
                f'max rel={self.maxRelError:.3e} {verdict}')

def _pick(rng, sizes: dict, key: str, low: int, high: int) -> int:
    if key in sizes:
        return int(sizes[key])
    return int(rng.integers(low, high + 1))

def _separated(rng, shape) -> np.ndarray:
    #Distinct magnitudes of at least 0.1, so no finite difference step crosses
    #a kink of relu or max
    count = int(np.prod(shape))
    values = (rng.permutation(count) + 1) * 0.1 * rng.choice([-1.0, 1.0], count)
    return values.reshape(shape)

def _case_linear(rng, **sizes):
    n, fin, fout = _pick(rng, sizes, 'n', 1, 5), _pick(rng, sizes, 'fin', 1, 8), _pick(rng, sizes, 'fout', 1, 8)
    inputs = [rng.standard_normal((n, fin)), rng.standard_normal((fout, fin)), rng.standard_normal(fout)]
    return GradCheckCase('linear', inputs, {}, (0, 1, 2))

def _case_conv(rng, **sizes):
    n, fin, fout = _pick(rng, sizes, 'n', 1, 2), _pick(rng, sizes, 'fin', 1, 3), _pick(rng, sizes, 'fout', 1, 3)
    k = _pick(rng, sizes, 'k', 1, 4)
    length = _pick(rng, sizes, 'length', k, k + 6)
    other = _pick(rng, sizes, 'other', 1, 3)
    axis = _pick(rng, sizes, 'axis', 2, 3)
    stride = _pick(rng, sizes, 'stride', 1, 2)
    padding = _pick(rng, sizes, 'padding', 0, k // 2)
    shape = (n, fin, length, other) if axis == 2 else (n, fin, other, length)
    inputs = [rng.standard_normal(shape), rng.standard_normal((fout, fin, k)), rng.standard_normal(fout)]
    return GradCheckCase('conv1d', inputs, {'axis': axis, 'stride': stride, 'padding': padding}, (0, 1, 2))

def _case_batchnorm(rng, training=True, **sizes):
    n, f = _pick(rng, sizes, 'n', 2, 6), _pick(rng, sizes, 'f', 1, 4)
    spatial = () if rng.random() < 0.5 else (_pick(rng, sizes, 'a', 1, 3), _pick(rng, sizes, 'b', 1, 3))
    x = rng.standard_normal((n, f) + spatial) * 2 + 1
    attrs = {'training': training}
    if not training:
        attrs['runningMean'] = rng.standard_normal(f)
        attrs['runningVar'] = rng.random(f) + 0.5
    return GradCheckCase('batchnorm', [x, rng.standard_normal(f), rng.standard_normal(f)], attrs, (0, 1, 2))

def _case_relu(rng, **sizes):
    shape = (_pick(rng, sizes, 'n', 1, 4), _pick(rng, sizes, 'f', 1, 6))
    return GradCheckCase('relu', [_separated(rng, shape)], {}, (0,))

def _case_pool(kind):
    def case(rng, **sizes):
        size = _pick(rng, sizes, 'size', 1, 4)
        stride = _pick(rng, sizes, 'stride', 1, size)
        padding = _pick(rng, sizes, 'padding', 0, size - 1)
        length = _pick(rng, sizes, 'length', size, size + 6)
        shape = (_pick(rng, sizes, 'n', 1, 2), _pick(rng, sizes, 'f', 1, 3), length)
        x = _separated(rng, shape) if kind == 'maxpool' else rng.standard_normal(shape)
        return GradCheckCase(kind, [x], {'size': size, 'stride': stride, 'padding': padding}, (0,))
    return case

def _case_dropout(training):
    def case(rng, **sizes):
        shape = (_pick(rng, sizes, 'n', 1, 4), _pick(rng, sizes, 'f', 1, 6))
        attrs = {'rate': 0.5, 'training': training, 'rng': stream(int(rng.integers(2**31)), 'dropout')}
        return GradCheckCase('dropout', [rng.standard_normal(shape)], attrs, (0,))
    return case

def _case_crossentropy(rng, **sizes):
    n, k = _pick(rng, sizes, 'n', 1, 5), _pick(rng, sizes, 'k', 2, 6)
    targets = rng.integers(0, k, n)
    mask = None
    if k > 2 and rng.random() < 0.5:
        mask = np.zeros((n, k), dtype=bool)
        for row, target in enumerate(targets):
            mask[row, (target + 1) % k] = True
    return GradCheckCase('crossentropy', [rng.standard_normal((n, k)) * 3],
                         {'targets': targets, 'mask': mask}, (0,))

def _case_softmax(rng, **sizes):
    shape = (_pick(rng, sizes, 'n', 1, 4), _pick(rng, sizes, 'k', 1, 6))
    return GradCheckCase('softmax', [rng.standard_normal(shape)], {}, (0,))

def _case_add(rng, **sizes):
    shape = (_pick(rng, sizes, 'n', 1, 4), _pick(rng, sizes, 'f', 1, 6))
    return GradCheckCase('add', [rng.standard_normal(shape), rng.standard_normal(shape)], {}, (0, 1))

def _case_matmul(rng, **sizes):
    n, k, m = _pick(rng, sizes, 'n', 1, 5), _pick(rng, sizes, 'k', 1, 5), _pick(rng, sizes, 'm', 1, 5)
    transpose = bool(rng.random() < 0.5)
    b = rng.standard_normal((m, k) if transpose else (k, m))
    return GradCheckCase('matmul', [rng.standard_normal((n, k)), b], {'transposeB': transpose}, (0, 1))

def _case_l2normalize(rng, **sizes):
    shape = (_pick(rng, sizes, 'n', 1, 4), _pick(rng, sizes, 'h', 1, 6))
    return GradCheckCase('l2normalize', [rng.standard_normal(shape) + 0.5], {}, (0,))

def _case_setpool(rng, **sizes):
    shape = (_pick(rng, sizes, 'g', 1, 3), _pick(rng, sizes, 'q', 1, 4), _pick(rng, sizes, 'h', 1, 5))
    mode = sizes.get('mode', ('max', 'avg', 'min')[int(rng.integers(3))])
    return GradCheckCase('setpool', [_separated(rng, shape)], {'mode': mode}, (0,))

def _case_mean(rng, **sizes):
    shape = (_pick(rng, sizes, 'n', 1, 3), _pick(rng, sizes, 'f', 1, 3), _pick(rng, sizes, 'a', 1, 3),
             _pick(rng, sizes, 'b', 1, 3))
    return GradCheckCase('mean', [rng.standard_normal(shape)], {'axes': (2, 3)}, (0,))

def _case_reshape(rng, **sizes):
    n, f = _pick(rng, sizes, 'n', 1, 4), _pick(rng, sizes, 'f', 1, 3)
    return GradCheckCase('reshape', [rng.standard_normal((n, f, 2))], {'shape': (n * 2, f)}, (0,))

def _case_concat(rng, **sizes):
    f = _pick(rng, sizes, 'f', 1, 4)
    inputs = [rng.standard_normal((_pick(rng, {}, 'n', 1, 3), f)) for _ in range(2)]
    return GradCheckCase('concat', inputs, {'axis': 0}, (0, 1))

#Case name -> builder taking (rng, **sizes)
GRADCHECK_CASES: dict[str, Callable] = {
    'conv1d': _case_conv,
    'linear': _case_linear,
    'batchnorm': _case_batchnorm,
    'batchnorm-eval': lambda rng, **sizes: _case_batchnorm(rng, training=False, **sizes),
    'relu': _case_relu,
    'maxpool': _case_pool('maxpool'),
    'avgpool': _case_pool('avgpool'),
    'dropout': _case_dropout(False),
    'dropout-train': _case_dropout(True),
    'crossentropy': _case_crossentropy,
    'softmax': _case_softmax,
    'add': _case_add,
    'matmul': _case_matmul,
    'l2normalize': _case_l2normalize,
    'setpool': _case_setpool,
    'mean': _case_mean,
    'reshape': _case_reshape,
    'concat': _case_concat,
}

def _as64(value):
    if isinstance(value, np.ndarray) and value.dtype.kind == 'f':
        return value.astype(np.float64)
    return value

def grad_check(kind: str, shapeSpec: dict | GradCheckCase | None = None, seed: int = 0,
               step: float = 1e-5, rtol: float = 1e-3, atol: float = 1e-5) -> GradCheckReport:
    """Compare a primitive's backward rule against central differences.

    ``kind`` names an entry of ``GRADCHECK_CASES``. ``shapeSpec`` either fixes
    some of the sizes the case builder would otherwise draw (for example
    ``{'fin': 4, 'fout': 3}`` for ``linear``) or is a complete
    :py:class:`GradCheckCase`. Everything is evaluated in 64-bit. The scalar
    that is differentiated is the output weighted by a fixed random
    projection.
    """
    rng = stream(seed, 'gradcheck', kind)
    if isinstance(shapeSpec, GradCheckCase):
        case = shapeSpec
    else:
        builder = GRADCHECK_CASES.get(kind)
        if builder is None:
            raise ConfigurationError(f'No gradient check case `{kind}`, expected one of '
                                     f'{sorted(GRADCHECK_CASES)}')
        case = builder(rng, **(shapeSpec or {}))

    inputs = [_as64(np.asarray(value)) for value in case.inputs]
    attrs = {key: _as64(value) for key, value in case.attrs.items()}

    def evaluate(values):
        #Deep copies keep random attributes, such as a dropout rng, identical
        return primitive_forward(case.kind, values, copy.deepcopy(attrs))

    graph = Graph()
    nodes = [graph.parameter(value, f'input{i}') if i in case.wrt else graph.constant(value)
             for i, value in enumerate(inputs)]
    output = apply(graph, case.kind, *nodes, **copy.deepcopy(attrs))
    projection = rng.standard_normal(output.value.shape)
    analytic = backward(graph, output, projection)

    maxAbs = 0.0
    maxRel = 0.0
    passed = True
    for i in case.wrt:
        numeric = np.zeros_like(inputs[i])
        for j in range(inputs[i].size):
            shifted = [value.copy() for value in inputs]
            shifted[i].flat[j] += step
            plus = float((evaluate(shifted) * projection).sum())
            shifted[i].flat[j] -= 2 * step
            minus = float((evaluate(shifted) * projection).sum())
            numeric.flat[j] = (plus - minus) / (2 * step)

        grad = analytic[f'input{i}']
        error = np.abs(grad - numeric)
        scale = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-12)
        maxAbs = max(maxAbs, float(error.max(initial=0.0)))
        maxRel = max(maxRel, float((error / scale).max(initial=0.0)))
        passed = passed and bool(np.all(error <= atol + rtol * np.abs(numeric)))

    report = GradCheckReport(kind, seed, maxAbs, maxRel, passed)
    log.debug('%s', report)
    return report

def gradient_suite(seeds: int = 100, cases=None) -> list[GradCheckReport]:
    """Run every registered gradient check case for ``seeds`` seeds."""
    reports = []
    for kind in cases or GRADCHECK_CASES:
        for seed in range(seeds):
            reports.append(grad_check(kind, seed=seed))
    return reports
