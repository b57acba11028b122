# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from group_contrast import ContractError


class DimensionError(ContractError):
    """The inputs of a primitive do not have shapes it can work with.

    The primitive kind can be found in the instance variable ``kind`` and the
    offending input shapes in ``shapes``.
    """
    def __init__(self, kind: str, shapes: list, reason: str):
        super().__init__(f'Bad input shapes {shapes} for `{kind}`, {reason}')
        self.kind = kind
        self.shapes = shapes

class DegenerateRepresentationError(ContractError):
    """A vector that is to be normalized has a norm at or below the guard.

    The index of the offending row can be found in ``row`` and its norm in
    ``norm``.
    """
    def __init__(self, row: int, norm: float, eps: float):
        super().__init__(f'Row {row} has norm {norm!r}, at or below the guard '
                         f'{eps!r}')
        self.row = row
        self.norm = norm

class Node:
    """Base class of all graph nodes.

    A node is one value in a computation recorded by a
    :py:class:`Graph <group_contrast.numerics.Graph>`. Nodes are either |Leaf|
    nodes, holding values given from outside, or |Primitive| nodes, holding
    the result of applying a primitive to other nodes.

    All nodes contain the following variables:

    - ``graph`` -- the graph this node was added to, ``None`` before that;
    - ``index`` -- the position of the node in the graph's topological order.
      Every input of a node has a smaller index than the node itself;
    - ``inputs`` -- a tuple of the nodes this node was computed from. Empty
      for leaves;
    - ``value`` -- the cached output, a numpy array. Never mutated in place
      once the node is in a graph;
    - ``depth`` -- 0 for leaves, otherwise one more than the deepest input;
    - ``requiresGrad`` -- whether a gradient flows back to this node.
    """
    kind = None
    graph = None
    index = -1
    inputs = ()
    value = None
    depth = 0
    requiresGrad = False

    def __init__(self):
        self.graph = None
        self.index = -1
        self.inputs = ()
        self.value = None
        self.depth = 0
        self.requiresGrad = False

    @property
    def shape(self) -> tuple:
        return self.value.shape
    def __repr__(self):
        shape = None if self.value is None else tuple(self.value.shape)
        ids = ','.join(str(node.index) for node in self.inputs)
        return f'{type(self).__name__}#{self.index}({ids}):{shape}'

class Leaf(Node):
    """A node whose value is given rather than computed.

    This node has the following variables:

    - Variables inherited from |Node|;
    - ``name`` -- the name gradients are reported under, ``None`` for
      constants.

    Named leaves that require a gradient are what
    :py:func:`backward <group_contrast.numerics.backward>` reports on.
    """
    kind = 'leaf'
    name = None

    def __init__(self, value, name: str | None = None, requiresGrad: bool = False):
        super().__init__()
        self.value = np.asarray(value)
        self.name = name
        self.requiresGrad = requiresGrad
    def __repr__(self):
        return f'({self.name})' + super().__repr__()

class Primitive(Node):
    """Base class of all computed nodes.

    Subclasses set ``kind``, implement ``forward`` to compute the output from
    the input values, and ``backward`` to map the gradient of the output to a
    tuple holding one gradient (or ``None``) per input. ``check`` raises
    |DimensionError| for inputs the primitive cannot handle and runs before
    ``forward``.

    This node has the following variables:

    - Variables inherited from |Node|;
    - ``attrs`` -- the attribute mapping the primitive was applied with.
    """
    attrs = None

    def __init__(self, inputs, attrs: dict):
        super().__init__()
        self.inputs = tuple(inputs)
        self.attrs = dict(attrs)

    def check(self, *values):
        pass
    def forward(self, *values):
        raise NotImplementedError #no cov
    def backward(self, grad):
        raise NotImplementedError #no cov

    def fail(self, reason: str):
        raise DimensionError(self.kind, [tuple(np.shape(v.value)) for v in self.inputs], reason)
    def expect_ndim(self, values, *ndims):
        for value, ndim in zip(values, ndims):
            if ndim is not None and value.ndim != ndim:
                self.fail(f'expected {ndims} dimensions')

def _pad_last(x, padding: int, fill=0.0):
    if padding == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(padding, padding)]
    return np.pad(x, widths, constant_values=fill)

def _windows(x, size: int, stride: int):
    #(..., L) -> (..., Lout, size)
    return sliding_window_view(x, size, axis=-1)[..., ::stride, :]

def _out_length(length: int, size: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - size) // stride + 1

class Add(Primitive):
    """Elementwise sum of two tensors of equal shape, used for residuals."""
    kind = 'add'

    def check(self, a, b):
        if a.shape != b.shape:
            self.fail('operands must have equal shapes')
    def forward(self, a, b):
        return a + b
    def backward(self, grad):
        return grad, grad

class Relu(Primitive):
    """Rectified linear unit. The derivative at exactly 0 is 0."""
    kind = 'relu'

    def forward(self, x):
        return np.maximum(x, 0)
    def backward(self, grad):
        return (grad * (self.inputs[0].value > 0),)

class Linear(Primitive):
    """Fully-connected layer, ``x @ weight.T + bias``.

    Inputs are ``x`` of shape (N, in), ``weight`` of shape (out, in) and
    ``bias`` of shape (out,).
    """
    kind = 'linear'

    def check(self, x, weight, bias):
        self.expect_ndim((x, weight, bias), 2, 2, 1)
        if x.shape[1] != weight.shape[1]:
            self.fail(f'input width {x.shape[1]} does not match weight width '
                      f'{weight.shape[1]}')
        if bias.shape[0] != weight.shape[0]:
            self.fail('bias length does not match the output width')
    def forward(self, x, weight, bias):
        return x @ weight.T + bias
    def backward(self, grad):
        x, weight, _ = (node.value for node in self.inputs)
        return grad @ weight, grad.T @ x, grad.sum(axis=0)

class Conv1d(Primitive):
    """Convolution of a 4-axis tensor with a 1D kernel.

    Input ``x`` has shape (N, in, A, B), ``weight`` has shape (out, in, k) and
    the optional ``bias`` shape (out,). The kernel slides along the axis given
    by the ``axis`` attribute, 2 or 3, and spans a single position of the other
    axis. ``stride`` and zero ``padding`` apply along ``axis`` only. This is a
    cross-correlation, as in every deep learning framework.
    """
    kind = 'conv1d'

    def check(self, x, weight, *bias):
        self.expect_ndim((x, weight), 4, 3)
        axis = self.attrs.get('axis', 3)
        if axis not in (2, 3):
            self.fail(f'axis must be 2 or 3, got {axis}')
        if x.shape[1] != weight.shape[1]:
            self.fail(f'{x.shape[1]} input feature maps but the kernel expects '
                      f'{weight.shape[1]}')
        if bias and bias[0].shape != (weight.shape[0],):
            self.fail('bias length does not match the number of kernels')
        if _out_length(x.shape[axis], weight.shape[2], self.attrs.get('stride', 1),
                       self.attrs.get('padding', 0)) < 1:
            self.fail(f'kernel of length {weight.shape[2]} does not fit an axis of '
                      f'length {x.shape[axis]}')

    def forward(self, x, weight, *bias):
        axis = self.attrs.get('axis', 3)
        stride = self.attrs.get('stride', 1)
        padding = self.attrs.get('padding', 0)

        #Kernel axis last: (N, in, other, L)
        moved = np.moveaxis(x, axis, -1)
        self.paddedLength = moved.shape[-1] + 2 * padding
        self.win = _windows(_pad_last(moved, padding), weight.shape[2], stride)

        out = np.tensordot(self.win, weight, axes=([1, 4], [1, 2]))
        #(N, other, Lout, out) -> (N, out, other, Lout)
        out = out.transpose(0, 3, 1, 2)
        if bias:
            out = out + bias[0][None, :, None, None]
        return np.ascontiguousarray(np.moveaxis(out, -1, axis))

    def backward(self, grad):
        axis = self.attrs.get('axis', 3)
        stride = self.attrs.get('stride', 1)
        padding = self.attrs.get('padding', 0)
        x, weight = self.inputs[0].value, self.inputs[1].value
        k = weight.shape[2]

        moved = np.moveaxis(grad, axis, -1)
        lout = moved.shape[-1]

        gradWeight = np.tensordot(moved, self.win, axes=([0, 2, 3], [0, 2, 3]))

        gradWin = np.tensordot(moved, weight, axes=([1], [0]))
        #(N, other, Lout, in, k) -> (N, in, other, Lout, k)
        gradWin = gradWin.transpose(0, 3, 1, 2, 4)
        gradPadded = np.zeros(gradWin.shape[:3] + (self.paddedLength,), dtype=grad.dtype)
        span = stride * (lout - 1) + 1
        for j in range(k):
            gradPadded[..., j : j + span : stride] += gradWin[..., j]
        gradX = gradPadded[..., padding : self.paddedLength - padding]
        gradX = np.ascontiguousarray(np.moveaxis(gradX, -1, axis))
        assert gradX.shape == x.shape

        if len(self.inputs) == 3:
            return gradX, gradWeight, moved.sum(axis=(0, 2, 3))
        return gradX, gradWeight

class BatchNorm(Primitive):
    """Batch normalization over every axis except axis 1.

    Inputs are ``x`` of shape (N, F) or (N, F, ...), ``gamma`` and ``beta`` of
    shape (F,). In training mode (``training`` attribute true) the batch
    statistics are used and exposed after the forward pass as ``batchMean``
    and ``batchVar``, the latter unbiased, for the caller to fold into its
    running statistics. In evaluation mode the ``runningMean`` and
    ``runningVar`` attributes are used instead. ``eps`` defaults to 1e-5.
    """
    kind = 'batchnorm'
    batchMean = None
    batchVar = None

    def check(self, x, gamma, beta):
        if x.ndim < 2:
            self.fail('expected a batch of at least 2 dimensions')
        f = x.shape[1]
        if gamma.shape != (f,) or beta.shape != (f,):
            self.fail(f'affine terms must have shape ({f},)')
        if self.attrs.get('training', True):
            if x.size // f < 2:
                self.fail('training mode needs more than one value per feature')
        elif 'runningMean' not in self.attrs or 'runningVar' not in self.attrs:
            self.fail('evaluation mode needs running statistics')

    def _axes(self, x):
        return (0,) + tuple(range(2, x.ndim))
    def _broadcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, gamma, beta):
        eps = self.attrs.get('eps', 1e-5)
        axes = self._axes(x)
        if self.attrs.get('training', True):
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // x.shape[1]
            self.batchMean = mean
            self.batchVar = var * (n / (n - 1))
        else:
            mean = np.asarray(self.attrs['runningMean'], dtype=x.dtype)
            var = np.asarray(self.attrs['runningVar'], dtype=x.dtype)

        self.invStd = 1.0 / np.sqrt(self._broadcast(var, x) + x.dtype.type(eps))
        self.xhat = (x - self._broadcast(mean, x)) * self.invStd
        return self._broadcast(gamma, x) * self.xhat + self._broadcast(beta, x)

    def backward(self, grad):
        x, gamma, _ = (node.value for node in self.inputs)
        axes = self._axes(x)

        gradGamma = (grad * self.xhat).sum(axis=axes)
        gradBeta = grad.sum(axis=axes)
        gradXhat = grad * self._broadcast(gamma, x)

        if not self.attrs.get('training', True):
            return gradXhat * self.invStd, gradGamma, gradBeta

        n = x.size // x.shape[1]
        gradX = (self.invStd / n) * (
                n * gradXhat
                - gradXhat.sum(axis=axes, keepdims=True)
                - self.xhat * (gradXhat * self.xhat).sum(axis=axes, keepdims=True))
        return gradX, gradGamma, gradBeta

class _Pool(Primitive):
    """Shared shape handling of the pooling primitives.

    Attributes are ``size`` (window length), ``stride`` (defaults to
    ``size``), ``padding`` (defaults to 0) and ``axis`` (defaults to the last
    axis).
    """
    fill = 0.0

    def _params(self, x):
        size = self.attrs['size']
        stride = self.attrs.get('stride', size)
        padding = self.attrs.get('padding', 0)
        axis = self.attrs.get('axis', -1) % x.ndim
        return size, stride, padding, axis

    def check(self, x):
        if 'size' not in self.attrs:
            self.fail('pooling needs a `size` attribute')
        size, stride, padding, axis = self._params(x)
        if size < 1 or stride < 1 or padding < 0 or padding >= size:
            self.fail(f'invalid window size={size}, stride={stride}, padding={padding}')
        if _out_length(x.shape[axis], size, stride, padding) < 1:
            self.fail(f'window of length {size} does not fit an axis of length '
                      f'{x.shape[axis]}')

    def forward(self, x):
        size, stride, padding, axis = self._params(x)
        moved = np.moveaxis(x, axis, -1)
        self.paddedLength = moved.shape[-1] + 2 * padding
        win = _windows(_pad_last(moved, padding, self.fill), size, stride)
        return np.ascontiguousarray(np.moveaxis(self.reduce(win), -1, axis))

    def backward(self, grad):
        x = self.inputs[0].value
        size, stride, padding, axis = self._params(x)
        moved = np.moveaxis(grad, axis, -1)
        gradPadded = self.spread(moved, size, stride)
        gradX = gradPadded[..., padding : self.paddedLength - padding]
        return (np.ascontiguousarray(np.moveaxis(gradX, -1, axis)),)

class MaxPool(_Pool):
    """Max pooling along one axis. Padding is filled with -inf, ties route the
    gradient to the first maximum of the window."""
    kind = 'maxpool'
    fill = -np.inf

    def reduce(self, win):
        self.argmax = win.argmax(axis=-1)
        return np.take_along_axis(win, self.argmax[..., None], axis=-1)[..., 0]
    def spread(self, grad, size, stride):
        lead = grad.shape[:-1]
        lout = grad.shape[-1]
        rows = int(np.prod(lead)) if lead else 1
        positions = (np.arange(lout) * stride + self.argmax).reshape(rows, lout)
        gradPadded = np.zeros((rows, self.paddedLength), dtype=grad.dtype)
        np.add.at(gradPadded, (np.arange(rows)[:, None], positions), grad.reshape(rows, lout))
        return gradPadded.reshape(lead + (self.paddedLength,))

class AvgPool(_Pool):
    """Average pooling along one axis. Zero padding counts towards the
    average."""
    kind = 'avgpool'

    def reduce(self, win):
        return win.mean(axis=-1)
    def spread(self, grad, size, stride):
        lout = grad.shape[-1]
        gradPadded = np.zeros(grad.shape[:-1] + (self.paddedLength,), dtype=grad.dtype)
        span = stride * (lout - 1) + 1
        share = grad / size
        for j in range(size):
            gradPadded[..., j : j + span : stride] += share
        return gradPadded

class Dropout(Primitive):
    """Inverted dropout.

    Attributes are ``rate`` in [0, 1), ``training`` and ``rng``, a numpy
    generator the mask is drawn from. Survivors are scaled by 1/(1 - rate) so
    that evaluation mode is exactly the identity.
    """
    kind = 'dropout'
    mask = None

    def check(self, x):
        rate = self.attrs.get('rate', 0.5)
        if not 0.0 <= rate < 1.0:
            self.fail(f'rate must lie in [0, 1), got {rate}')
        if self.attrs.get('training', False) and rate > 0 and self.attrs.get('rng') is None:
            self.fail('training mode needs an `rng` attribute')

    def forward(self, x):
        rate = self.attrs.get('rate', 0.5)
        if not self.attrs.get('training', False) or rate == 0:
            self.mask = None
            return x
        keep = self.attrs['rng'].random(x.shape) >= rate
        self.mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
        return x * self.mask
    def backward(self, grad):
        if self.mask is None:
            return (grad,)
        return (grad * self.mask,)

class Reshape(Primitive):
    """Reshape to the ``shape`` attribute, -1 allowed once."""
    kind = 'reshape'

    def check(self, x):
        try:
            np.empty(x.shape, dtype=np.bool_).reshape(self.attrs['shape'])
        except (KeyError, ValueError):
            self.fail(f'cannot reshape to {self.attrs.get("shape")}')
    def forward(self, x):
        return x.reshape(self.attrs['shape'])
    def backward(self, grad):
        return (grad.reshape(self.inputs[0].value.shape),)

class Softmax(Primitive):
    """Softmax along the last axis."""
    kind = 'softmax'

    def forward(self, x):
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        return shifted / shifted.sum(axis=-1, keepdims=True)
    def backward(self, grad):
        s = self.value
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)

class CrossEntropy(Primitive):
    """Mean softmax cross-entropy of a batch of logits.

    The input holds logits of shape (N, K). The ``targets`` attribute holds one
    class index per row. The optional ``mask`` attribute, a boolean (N, K)
    array, removes entries from the softmax altogether, which is how an anchor
    is kept out of its own denominator. Computed with log-sum-exp.
    """
    kind = 'crossentropy'

    def check(self, logits):
        self.expect_ndim((logits,), 2)
        targets = np.asarray(self.attrs.get('targets'))
        if targets.shape != (logits.shape[0],):
            self.fail('one target per row expected')
        if targets.min() < 0 or targets.max() >= logits.shape[1]:
            self.fail('target index out of range')
        mask = self.attrs.get('mask')
        if mask is not None:
            if np.shape(mask) != logits.shape:
                self.fail('mask must have the shape of the logits')
            if np.asarray(mask)[np.arange(len(targets)), targets].any():
                self.fail('a target entry is masked')

    def forward(self, logits):
        targets = np.asarray(self.attrs['targets'])
        mask = self.attrs.get('mask')
        if mask is not None:
            logits = np.where(mask, -np.inf, logits)
        top = logits.max(axis=-1, keepdims=True)
        lse = top + np.log(np.exp(logits - top).sum(axis=-1, keepdims=True))
        self.prob = np.exp(logits - lse)
        rows = np.arange(len(targets))
        losses = lse[:, 0] - logits[rows, targets]
        return np.asarray(losses.mean(), dtype=logits.dtype)
    def backward(self, grad):
        targets = np.asarray(self.attrs['targets'])
        delta = self.prob.copy()
        delta[np.arange(len(targets)), targets] -= 1
        return (delta * (grad / len(targets)),)

class MatMul(Primitive):
    """Matrix product ``a @ b``, or ``a @ b.T`` with ``transposeB``."""
    kind = 'matmul'

    def check(self, a, b):
        self.expect_ndim((a, b), 2, 2)
        inner = b.shape[1] if self.attrs.get('transposeB', False) else b.shape[0]
        if a.shape[1] != inner:
            self.fail('inner dimensions differ')
    def forward(self, a, b):
        if self.attrs.get('transposeB', False):
            return a @ b.T
        return a @ b
    def backward(self, grad):
        a, b = (node.value for node in self.inputs)
        if self.attrs.get('transposeB', False):
            return grad @ b, grad.T @ a
        return grad @ b.T, a.T @ grad

class Concat(Primitive):
    """Concatenate any number of inputs along ``axis`` (default 0)."""
    kind = 'concat'

    def check(self, *values):
        axis = self.attrs.get('axis', 0)
        shapes = {v.shape[:axis] + v.shape[axis + 1:] for v in values}
        if not values or len(shapes) != 1:
            self.fail('inputs differ outside the concatenation axis')
    def forward(self, *values):
        return np.concatenate(values, axis=self.attrs.get('axis', 0))
    def backward(self, grad):
        axis = self.attrs.get('axis', 0)
        bounds = np.cumsum([node.value.shape[axis] for node in self.inputs])[:-1]
        return tuple(np.split(grad, bounds, axis=axis))

class L2Normalize(Primitive):
    """Scale every row (last axis) to unit L2 norm.

    Raises |DegenerateRepresentationError| when a norm is at or below the
    ``eps`` attribute (default 1e-12).
    """
    kind = 'l2normalize'

    def forward(self, x):
        eps = self.attrs.get('eps', 1e-12)
        self.norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        flat = self.norm.reshape(-1)
        bad = np.flatnonzero(flat <= eps)
        if len(bad):
            raise DegenerateRepresentationError(int(bad[0]), float(flat[bad[0]]), eps)
        return x / self.norm
    def backward(self, grad):
        y = self.value
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / self.norm,)

class Scale(Primitive):
    """Multiply by the constant ``factor`` attribute."""
    kind = 'scale'

    def forward(self, x):
        return x * x.dtype.type(self.attrs['factor'])
    def backward(self, grad):
        return (grad * grad.dtype.type(self.attrs['factor']),)

SET_POOLING_MODES = ('max', 'avg', 'min')

class SetPool(Primitive):
    """Symmetric pooling of a set of vectors.

    The input has shape (G, Q, H): G sets of Q members. The output has shape
    (G, H), the elementwise maximum, average or minimum over the members as
    selected by the ``mode`` attribute. The average sums members in sorted
    order so that the result does not depend on member order, bit for bit.
    """
    kind = 'setpool'

    def check(self, x):
        self.expect_ndim((x,), 3)
        if x.shape[1] < 1:
            self.fail('a set needs at least one member')
        if self.attrs.get('mode', 'max') not in SET_POOLING_MODES:
            self.fail(f'mode must be one of {SET_POOLING_MODES}')

    def forward(self, x):
        mode = self.attrs.get('mode', 'max')
        if mode == 'avg':
            return np.sort(x, axis=1).mean(axis=1)
        pick = x.argmax if mode == 'max' else x.argmin
        self.pick = pick(axis=1)
        return np.take_along_axis(x, self.pick[:, None, :], axis=1)[:, 0, :]
    def backward(self, grad):
        x = self.inputs[0].value
        if self.attrs.get('mode', 'max') == 'avg':
            return (np.broadcast_to(grad[:, None, :] / x.shape[1], x.shape).copy(),)
        gradX = np.zeros_like(x, dtype=grad.dtype)
        np.put_along_axis(gradX, self.pick[:, None, :], grad[:, None, :], axis=1)
        return (gradX,)

class Mean(Primitive):
    """Mean over the ``axes`` attribute, used as global average pooling."""
    kind = 'mean'

    def forward(self, x):
        return x.mean(axis=tuple(self.attrs['axes']))
    def backward(self, grad):
        x = self.inputs[0].value
        axes = tuple(a % x.ndim for a in self.attrs['axes'])
        count = int(np.prod([x.shape[a] for a in axes]))
        return (np.broadcast_to(np.expand_dims(grad, axes) / count, x.shape).copy(),)

class Sum(Primitive):
    """Sum of all elements, a scalar."""
    kind = 'sum'

    def forward(self, x):
        return np.asarray(x.sum(), dtype=x.dtype)
    def backward(self, grad):
        x = self.inputs[0].value
        return (np.full(x.shape, grad, dtype=x.dtype),)

PRIMITIVES = {cls.kind: cls for cls in (
    Add, Relu, Linear, Conv1d, BatchNorm, MaxPool, AvgPool, Dropout, Reshape,
    Softmax, CrossEntropy, MatMul, Concat, L2Normalize, Scale, SetPool, Mean, Sum,
)}
