# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from group_contrast import ConfigurationError, ContractError, stream
from group_contrast.corpus import BadMagicError, FormatError, TruncatedError
from group_contrast.nodes import SET_POOLING_MODES, Node
from group_contrast.numerics import Graph, apply

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'SGMCCKPT'
CHECKPOINT_VERSION = 1
#Kernel orientation -> axis of the (N, F, channel, time) activations
AXES = {'channel': 2, 'time': 3}
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BlockConfig:
    """One residual block: two convolutions with kernels of length
    ``kernel``, the first oriented along ``orientation[0]``, the second along
    ``orientation[1]``. ``stride`` downsamples along the first orientation."""
    kernel: int
    width: int
    stride: int = 1
    orientation: tuple = ('time', 'channel')

@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the base encoder.

    A stem convolution along time (``stemKernel``, ``stemWidth``,
    ``stemStride``) with batch normalization, ReLU and max pooling along time
    (``poolSize``, ``poolStride``), then the residual ``blocks``, global
    average pooling and, when the last block is not ``outputDim`` wide, a
    linear head to ``outputDim``.
    """
    blocks: tuple
    stemKernel: int = 9
    stemWidth: int = 64
    stemStride: int = 2
    poolSize: int = 3
    poolStride: int = 2
    outputDim: int = 512

    def validate(self):
        if self.outputDim < 1:
            raise ConfigurationError(f'Output dimension must be positive, got {self.outputDim}')
        if not self.blocks:
            raise ConfigurationError('Encoder needs at least one residual block')
        for i, block in enumerate(self.blocks):
            if block.kernel < 1 or block.kernel % 2 == 0:
                raise ConfigurationError(f'Block {i} kernel length {block.kernel} must be odd '
                                         f'so that the residual path keeps its shape')
            if block.width < 1 or block.stride < 1:
                raise ConfigurationError(f'Block {i} width and stride must be positive')
            if len(block.orientation) != 2 or any(o not in AXES for o in block.orientation):
                raise ConfigurationError(f'Block {i} orientation {block.orientation} must name '
                                         f'two of {sorted(AXES)}')
        if min(self.stemKernel, self.stemWidth, self.stemStride, self.poolSize,
               self.poolStride) < 1:
            raise ConfigurationError('Stem sizes must be positive')

    @property
    def convLayers(self) -> int:
        """Convolutions on the main path, shortcuts not counted."""
        return 1 + 2 * len(self.blocks)

def _deep_blocks():
    widths = (64, 64, 128, 128, 256, 256, 512, 512)
    kernels = (15, 15, 11, 11, 7, 7, 3, 3)
    blocks = []
    for i, (kernel, width) in enumerate(zip(kernels, widths)):
        stride = 2 if i > 0 and width != widths[i - 1] else 1
        blocks.append(BlockConfig(kernel, width, stride))
    return tuple(blocks)

ENCODER_PRESETS = {
    'deep': EncoderConfig(_deep_blocks(), stemKernel=9, stemWidth=64, stemStride=2,
                           outputDim=512),
    'tiny': EncoderConfig((BlockConfig(5, 8, 1), BlockConfig(3, 16, 2)), stemKernel=5,
                          stemWidth=8, stemStride=2, outputDim=32),
}

def encoder_preset(name: str) -> EncoderConfig:
    try:
        return ENCODER_PRESETS[name]
    except KeyError:
        raise ConfigurationError(f'Unknown encoder preset `{name}`, expected one of '
                                 f'{sorted(ENCODER_PRESETS)}') from None

@dataclass(frozen=True)
class ProjectorConfig:
    """The group projector: a three-layer perceptron applied to every member
    followed by symmetric pooling over the members."""
    hidden: tuple = (1024, 2048, 4096)
    pooling: str = 'max'
    dropout: float = 0.5

    def validate(self):
        if len(self.hidden) != 3 or min(self.hidden) < 1:
            raise ConfigurationError(f'Projector needs three positive widths, got {self.hidden}')
        if self.pooling not in SET_POOLING_MODES:
            raise ConfigurationError(f'Unknown pooling `{self.pooling}`, expected one of '
                                     f'{SET_POOLING_MODES}')
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f'Dropout rate {self.dropout} outside [0, 1)')

    @property
    def outputDim(self) -> int:
        return self.hidden[-1]

@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple = (512, 256, 128)
    nClasses: int = 2
    dropout: float = 0.5

    def validate(self):
        if self.nClasses < 2:
            raise ConfigurationError(f'A classifier needs at least 2 classes, got {self.nClasses}')
        if min(self.hidden, default=1) < 1:
            raise ConfigurationError(f'Classifier widths must be positive, got {self.hidden}')
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f'Dropout rate {self.dropout} outside [0, 1)')

TINY_PROJECTOR = ProjectorConfig(hidden=(64, 64, 64))
TINY_CLASSIFIER_HIDDEN = (32, 16)

@dataclass
class ModelBundle:
    """Every network of the pipeline with its parameters.

    - ``params`` -- trainable arrays keyed ``encoder.*``, ``projector.*`` and
      ``classifier.*``;
    - ``buffers`` -- batch normalization running statistics, keyed the same
      way;
    - ``inputShape`` -- the (C, M) window shape the encoder was built for,
      or ``None`` to accept any;
    - ``training`` -- the mode forward passes run in by default.

    Arrays are replaced, never modified in place, so copying the dictionaries
    is enough to snapshot a bundle.
    """
    encoderConfig: EncoderConfig
    projectorConfig: ProjectorConfig | None = None
    classifierConfig: ClassifierConfig | None = None
    inputShape: tuple | None = None
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    training: bool = False

    def part(self, prefix: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + '.')}
    def parameter_count(self, prefix: str = '') -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))
    def copy(self) -> ModelBundle:
        return dataclasses.replace(self, params=dict(self.params), buffers=dict(self.buffers))
    def astype(self, dtype) -> ModelBundle:
        return dataclasses.replace(self, params={k: v.astype(dtype) for k, v in self.params.items()},
                                   buffers={k: v.astype(dtype) for k, v in self.buffers.items()})
    def without(self, prefix: str) -> ModelBundle:
        """A copy with every parameter and buffer of ``prefix`` dropped."""
        keep = lambda name: not name.startswith(prefix + '.')
        return dataclasses.replace(self,
                                   projectorConfig=None if prefix == 'projector' else self.projectorConfig,
                                   classifierConfig=None if prefix == 'classifier' else self.classifierConfig,
                                   params={k: v for k, v in self.params.items() if keep(k)},
                                   buffers={k: v for k, v in self.buffers.items() if keep(k)})

    def digest(self) -> bytes:
        """SHA-256 of the encoder and projector architecture."""
        description = {
            'encoder': dataclasses.asdict(self.encoderConfig),
            'projector': None if self.projectorConfig is None else dataclasses.asdict(self.projectorConfig),
            'inputShape': None if self.inputShape is None else list(self.inputShape),
        }
        return hashlib.sha256(json.dumps(description, sort_keys=True).encode('utf-8')).digest()

def _uniform(rng, shape, fanIn: int, gain: float) -> np.ndarray:
    bound = gain / np.sqrt(fanIn)
    return rng.uniform(-bound, bound, shape).astype(np.float32)

def _init_conv(store: dict, name: str, fout: int, fin: int, k: int, rng):
    #Kaiming uniform over the fan-in
    store[name + '.weight'] = _uniform(rng, (fout, fin, k), fin * k, np.sqrt(6.0))

def _init_linear(store: dict, name: str, fout: int, fin: int, rng):
    store[name + '.weight'] = _uniform(rng, (fout, fin), fin, np.sqrt(6.0))
    store[name + '.bias'] = _uniform(rng, (fout,), fin, 1.0)

def _init_bn(store: dict, buffers: dict, name: str, width: int):
    store[name + '.gamma'] = np.ones(width, dtype=np.float32)
    store[name + '.beta'] = np.zeros(width, dtype=np.float32)
    buffers[name + '.runningMean'] = np.zeros(width, dtype=np.float32)
    buffers[name + '.runningVar'] = np.ones(width, dtype=np.float32)

def build_encoder(config: EncoderConfig, rng: np.random.Generator) -> tuple[dict, dict]:
    """Initialize the encoder, returning its parameters and buffers."""
    config.validate()
    params, buffers = {}, {}

    _init_conv(params, 'encoder.stem.conv', config.stemWidth, 1, config.stemKernel, rng)
    _init_bn(params, buffers, 'encoder.stem.bn', config.stemWidth)

    width = config.stemWidth
    for i, block in enumerate(config.blocks):
        prefix = f'encoder.block{i}'
        _init_conv(params, prefix + '.conv1', block.width, width, block.kernel, rng)
        _init_bn(params, buffers, prefix + '.bn1', block.width)
        _init_conv(params, prefix + '.conv2', block.width, block.width, block.kernel, rng)
        _init_bn(params, buffers, prefix + '.bn2', block.width)
        if block.stride != 1 or block.width != width:
            _init_conv(params, prefix + '.shortcut', block.width, width, 1, rng)
            _init_bn(params, buffers, prefix + '.shortcutBn', block.width)
        width = block.width

    if width != config.outputDim:
        _init_linear(params, 'encoder.head', config.outputDim, width, rng)
    return params, buffers

def build_projector(config: ProjectorConfig, inputDim: int, rng: np.random.Generator) -> tuple[dict, dict]:
    config.validate()
    params, buffers = {}, {}
    width = inputDim
    for i, hidden in enumerate(config.hidden):
        _init_linear(params, f'projector.fc{i}', hidden, width, rng)
        if i < len(config.hidden) - 1:
            _init_bn(params, buffers, f'projector.bn{i}', hidden)
        width = hidden
    return params, buffers

def build_classifier(config: ClassifierConfig, inputDim: int, rng: np.random.Generator) -> tuple[dict, dict]:
    config.validate()
    params, buffers = {}, {}
    width = inputDim
    for i, hidden in enumerate(config.hidden):
        _init_linear(params, f'classifier.fc{i}', hidden, width, rng)
        _init_bn(params, buffers, f'classifier.bn{i}', hidden)
        width = hidden
    _init_linear(params, 'classifier.out', config.nClasses, width, rng)
    return params, buffers

def build_model(encoderConfig: EncoderConfig, projectorConfig: ProjectorConfig | None = None,
                classifierConfig: ClassifierConfig | None = None, inputShape: tuple | None = None,
                seed: int = 0) -> ModelBundle:
    """Initialize every requested network from the ``init`` stream of ``seed``.

    Each network draws from a substream of its own, so adding a classifier
    does not change the encoder's initial weights.
    """
    bundle = ModelBundle(encoderConfig, projectorConfig, classifierConfig,
                         None if inputShape is None else tuple(inputShape))
    params, buffers = build_encoder(encoderConfig, stream(seed, 'init', 'encoder'))
    bundle.params.update(params)
    bundle.buffers.update(buffers)
    if projectorConfig is not None:
        attach_projector(bundle, projectorConfig, seed)
    if classifierConfig is not None:
        attach_classifier(bundle, classifierConfig, seed)
    return bundle

def attach_projector(bundle: ModelBundle, config: ProjectorConfig, seed: int):
    params, buffers = build_projector(config, bundle.encoderConfig.outputDim,
                                      stream(seed, 'init', 'projector'))
    bundle.projectorConfig = config
    bundle.params.update(params)
    bundle.buffers.update(buffers)

def attach_classifier(bundle: ModelBundle, config: ClassifierConfig, seed: int):
    """Give ``bundle`` a freshly initialized classifier, replacing any old one."""
    params, buffers = build_classifier(config, bundle.encoderConfig.outputDim,
                                       stream(seed, 'init', 'classifier'))
    bundle.classifierConfig = config
    bundle.params = {k: v for k, v in bundle.params.items() if not k.startswith('classifier.')}
    bundle.buffers = {k: v for k, v in bundle.buffers.items() if not k.startswith('classifier.')}
    bundle.params.update(params)
    bundle.buffers.update(buffers)

class Binding:
    """A bundle's parameters bound into one graph for one forward pass.

    Parameters become graph leaves on first use. Those under a prefix in
    ``trainable`` are named parameters that gradients are reported for,
    all others are constants. In training mode batch normalization uses batch
    statistics and folds them into the bundle's running buffers, and dropout
    draws its masks from ``rng``.
    """
    def __init__(self, bundle: ModelBundle, graph: Graph | None = None, training: bool | None = None,
                 rng: np.random.Generator | None = None, trainable=('encoder', 'projector', 'classifier')):
        self.bundle = bundle
        self.graph = graph if graph is not None else Graph()
        self.training = bundle.training if training is None else training
        self.rng = rng
        self.trainable = tuple(trainable)
        self.leaves = {}

    def param(self, name: str) -> Node:
        leaf = self.leaves.get(name)
        if leaf is None:
            value = self.bundle.params.get(name)
            if value is None:
                raise ContractError(f'Bundle has no parameter `{name}`')
            if name.split('.', 1)[0] in self.trainable:
                leaf = self.graph.parameter(value, name)
            else:
                leaf = self.graph.constant(value)
            self.leaves[name] = leaf
        return leaf

    def conv(self, x: Node, name: str, axis: int, stride: int = 1) -> Node:
        weight = self.param(name + '.weight')
        k = weight.value.shape[2]
        return apply(self.graph, 'conv1d', x, weight, axis=axis, stride=stride, padding=k // 2)
    def linear(self, x: Node, name: str) -> Node:
        return apply(self.graph, 'linear', x, self.param(name + '.weight'), self.param(name + '.bias'))
    def batchnorm(self, x: Node, name: str) -> Node:
        buffers = self.bundle.buffers
        out = apply(self.graph, 'batchnorm', x, self.param(name + '.gamma'), self.param(name + '.beta'),
                    training=self.training, runningMean=buffers[name + '.runningMean'],
                    runningVar=buffers[name + '.runningVar'])
        if self.training:
            for stat, batch in (('.runningMean', out.batchMean), ('.runningVar', out.batchVar)):
                old = buffers[name + stat]
                buffers[name + stat] = ((1 - BN_MOMENTUM) * old + BN_MOMENTUM * batch).astype(old.dtype)
        return out
    def relu(self, x: Node) -> Node:
        return apply(self.graph, 'relu', x)
    def dropout(self, x: Node, rate: float) -> Node:
        if not self.training or rate == 0:
            return x
        return apply(self.graph, 'dropout', x, rate=rate, training=True, rng=self.rng)

def as_input(samples, dtype=np.float32) -> np.ndarray:
    """Turn |EegSample| objects or an (N, M, C) array into the (N, 1, C, M)
    layout of the encoder."""
    if isinstance(samples, np.ndarray):
        values = samples
    else:
        values = np.stack([sample.values for sample in samples])
    if values.ndim != 3:
        raise ContractError(f'Expected a batch of M x C windows, got shape {values.shape}')
    return np.ascontiguousarray(values.transpose(0, 2, 1)[:, None], dtype=dtype)

def encoder_forward(binding: Binding, x: Node) -> Node:
    """Record the encoder on ``x`` of shape (N, 1, C, M), giving (N, D)."""
    config = binding.bundle.encoderConfig
    time = AXES['time']

    h = binding.conv(x, 'encoder.stem.conv', time, config.stemStride)
    h = binding.relu(binding.batchnorm(h, 'encoder.stem.bn'))
    h = apply(binding.graph, 'maxpool', h, size=config.poolSize, stride=config.poolStride,
              padding=config.poolSize // 2, axis=time)

    for i, block in enumerate(config.blocks):
        prefix = f'encoder.block{i}'
        first, second = (AXES[o] for o in block.orientation)
        out = binding.conv(h, prefix + '.conv1', first, block.stride)
        out = binding.relu(binding.batchnorm(out, prefix + '.bn1'))
        out = binding.conv(out, prefix + '.conv2', second)
        out = binding.batchnorm(out, prefix + '.bn2')
        shortcut = h
        if prefix + '.shortcut.weight' in binding.bundle.params:
            shortcut = binding.conv(h, prefix + '.shortcut', first, block.stride)
            shortcut = binding.batchnorm(shortcut, prefix + '.shortcutBn')
        h = binding.relu(apply(binding.graph, 'add', out, shortcut))

    h = apply(binding.graph, 'mean', h, axes=(2, 3))
    if 'encoder.head.weight' in binding.bundle.params:
        h = binding.linear(h, 'encoder.head')
    return h

def base_projector_forward(binding: Binding, reps: Node) -> Node:
    """Record the per-member perceptron on (n, D) representations."""
    config = binding.bundle.projectorConfig
    h = reps
    for i in range(len(config.hidden)):
        h = binding.linear(h, f'projector.fc{i}')
        if i < len(config.hidden) - 1:
            h = binding.relu(binding.batchnorm(h, f'projector.bn{i}'))
            h = binding.dropout(h, config.dropout)
    return h

def projector_forward(binding: Binding, reps: Node, groupSize: int) -> Node:
    """Record the group projector on (G * groupSize, D) representations, the
    members of every group contiguous, giving (G, H)."""
    if binding.bundle.projectorConfig is None:
        raise ContractError('Bundle has no group projector')
    n = reps.value.shape[0]
    if groupSize < 1 or n % groupSize:
        raise ContractError(f'{n} representations do not form groups of {groupSize}')
    upgraded = base_projector_forward(binding, reps)
    sets = apply(binding.graph, 'reshape', upgraded, shape=(n // groupSize, groupSize, -1))
    return apply(binding.graph, 'setpool', sets, mode=binding.bundle.projectorConfig.pooling)

def classifier_forward(binding: Binding, h: Node) -> Node:
    config = binding.bundle.classifierConfig
    if config is None:
        raise ContractError('Bundle has no classifier')
    for i in range(len(config.hidden)):
        h = binding.linear(h, f'classifier.fc{i}')
        h = binding.relu(binding.batchnorm(h, f'classifier.bn{i}'))
        h = binding.dropout(h, config.dropout)
    return binding.linear(h, 'classifier.out')

def _dtype(bundle: ModelBundle):
    return bundle.params['encoder.stem.conv.weight'].dtype

def encode(bundle: ModelBundle, samples, training: bool = False, rng=None) -> np.ndarray:
    """Representations of a batch of windows, one D-vector per sample."""
    x = as_input(samples, _dtype(bundle))
    if bundle.inputShape is not None and x.shape[2:] != tuple(bundle.inputShape):
        raise ContractError(f'Windows of shape {x.shape[2:]} (C, M) do not match the encoder '
                            f'input {tuple(bundle.inputShape)}')
    binding = Binding(bundle, training=training, rng=rng, trainable=())
    return encoder_forward(binding, binding.graph.constant(x)).value

def project_group(bundle: ModelBundle, reps) -> np.ndarray:
    """Group representation of the Q member representations ``reps``.

    Runs in evaluation mode. Every member is projected on its own before the
    pooling, so the result is bit-identical under any member order.
    """
    reps = np.asarray(reps, dtype=_dtype(bundle))
    if reps.ndim != 2 or reps.shape[0] < 1:
        raise ContractError(f'Expected a non-empty Q x D group, got shape {reps.shape}')
    if reps.shape[1] != bundle.encoderConfig.outputDim:
        raise ContractError(f'Representations of width {reps.shape[1]}, expected '
                            f'{bundle.encoderConfig.outputDim}')
    if bundle.projectorConfig is None:
        raise ContractError('Bundle has no group projector')

    upgraded = []
    for member in reps:
        binding = Binding(bundle, training=False, trainable=())
        upgraded.append(base_projector_forward(binding, binding.graph.constant(member[None])).value[0])
    graph = Graph()
    sets = graph.constant(np.stack(upgraded)[None])
    return apply(graph, 'setpool', sets, mode=bundle.projectorConfig.pooling).value[0]

def classify(bundle: ModelBundle, h) -> np.ndarray:
    """Class logits of a batch of representations, in evaluation mode."""
    h = np.asarray(h, dtype=_dtype(bundle))
    if h.ndim != 2 or h.shape[1] != bundle.encoderConfig.outputDim:
        raise ContractError(f'Expected N x {bundle.encoderConfig.outputDim} representations, '
                            f'got shape {h.shape}')
    binding = Binding(bundle, training=False, trainable=())
    return classifier_forward(binding, binding.graph.constant(h)).value

class DigestMismatchError(FormatError):
    """A checkpoint was written for a different architecture than the one
    it is loaded into."""

_U32 = struct.Struct('<I')

def write_checkpoint(path, tensors: dict, digest: bytes):
    """Write named tensors with the architecture ``digest``.

    Layout: magic, version, 32-byte digest, tensor count, then per tensor the
    name length, name, number of axes, extents and float32 payload.
    """
    if len(digest) != 32:
        raise ContractError('Checkpoint digests are 32 bytes')
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), digest, _U32.pack(len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode('utf-8')
        value = np.asarray(value)
        chunks += [_U32.pack(len(encoded)), encoded, _U32.pack(value.ndim)]
        chunks += [_U32.pack(extent) for extent in value.shape]
        chunks.append(np.ascontiguousarray(value, dtype='<f4').tobytes())
    with open(path, 'wb') as file:
        file.write(b''.join(chunks))
    log.debug('Wrote checkpoint %s with %d tensors', path, len(tensors))

def read_checkpoint(path, digest: bytes | None = None) -> dict:
    """Read the tensors of a checkpoint, verifying ``digest`` when given."""
    with open(path, 'rb') as file:
        data = file.read()

    if data[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(path, CHECKPOINT_MAGIC, data[:8])

    offset = 8
    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise TruncatedError(path, offset, offset + size, len(data))
        chunk = data[offset : offset + size]
        offset += size
        return chunk
    def u32() -> int:
        return _U32.unpack(take(4))[0]

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f'unsupported version {version}, expected {CHECKPOINT_VERSION}', path, 8)
    found = take(32)
    if digest is not None and found != digest:
        raise DigestMismatchError('architecture digest does not match the configuration', path, 12)

    tensors = {}
    for _ in range(u32()):
        name = take(u32()).decode('utf-8')
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * count), dtype='<f4').reshape(shape).astype(np.float32)
    if offset != len(data):
        raise FormatError(f'{len(data) - offset} trailing bytes', path, offset)
    return tensors

def save_model(path, bundle: ModelBundle, extra: dict | None = None):
    """Checkpoint the bundle's parameters and buffers, plus ``extra`` tensors."""
    tensors = dict(bundle.params)
    tensors.update(bundle.buffers)
    tensors.update(extra or {})
    write_checkpoint(path, tensors, bundle.digest())

def load_model(path, bundle: ModelBundle) -> tuple[ModelBundle, dict]:
    """Load a checkpoint into a copy of ``bundle``.

    Every parameter and buffer the checkpoint holds replaces the bundle's;
    the architecture digest must match. Returns the new bundle and the
    tensors that are neither parameters nor buffers.
    """
    tensors = read_checkpoint(path, bundle.digest())
    loaded = bundle.copy()
    extra = {}
    for name, value in tensors.items():
        table = loaded.params if name in bundle.params else loaded.buffers if name in bundle.buffers else None
        if table is None:
            extra[name] = value
            continue
        if value.shape != table[name].shape:
            raise FormatError(f'tensor `{name}` has shape {value.shape}, expected '
                              f'{table[name].shape}', path, 0)
        table[name] = value.astype(table[name].dtype)
    return loaded, extra
