# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from group_contrast import ConfigurationError, ContractError, GroupContrastError, stream
from group_contrast.corpus import Corpus, SyntheticSpec, generate_synthetic_corpus
from group_contrast.grouping import (
    AugmentedBatch,
    SamplerConfig,
    epoch_batches,
    meiosis_batch,
    new_epoch,
    sample_minibatch,
)
from group_contrast.network import (
    ENCODER_PRESETS,
    TINY_PROJECTOR,
    Binding,
    ClassifierConfig,
    ModelBundle,
    as_input,
    attach_classifier,
    build_encoder,
    build_model,
    classifier_forward,
    classify,
    encode,
    encoder_forward,
    load_model,
    projector_forward,
    save_model,
)
from group_contrast.nodes import Node
from group_contrast.numerics import AdamState, GradCheckReport, Graph, adam_step, apply, backward

log = logging.getLogger(__name__)


class DivergenceError(GroupContrastError):
    """The training loss stopped being finite.

    Contains the following variables:

    - ``iteration`` -- zero-based index of the iteration whose loss diverged;
    - ``loss`` -- the offending value.
    """
    iteration = None
    loss = None

    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f'Loss became {loss} at iteration {iteration}')

@dataclass(frozen=True)
class LossConfig:
    """``temperature`` divides every similarity, ``eps`` is the smallest
    representation norm that is still normalized."""
    temperature: float = 0.1
    eps: float = 1e-12

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f'Temperature must be positive, got {self.temperature}')
        if not self.eps > 0:
            raise ConfigurationError(f'Norm guard must be positive, got {self.eps}')

def cosine_similarity(z1, z2, eps: float = 1e-12) -> float:
    """Cosine of the angle between two representations, in [-1, 1]."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 1:
        raise ContractError(f'Expected two vectors of one length, got {z1.shape} and {z2.shape}')
    unit = apply(Graph(), 'l2normalize', np.stack([z1, z2]), eps=eps).value
    return float(np.clip(unit[0] @ unit[1], -1.0, 1.0))

def ntxent_node(graph: Graph, z: Node, config: LossConfig) -> Node:
    """Record the contrastive loss of ``z``, the 2P group representations
    with every A group before every B group.

    Row i is the anchor, row (i + P) mod 2P its positive and the anchor is
    masked out of its own denominator.
    """
    n = z.value.shape[0]
    if n < 2 or n % 2:
        raise ContractError(f'Expected 2P group representations with P >= 1, got {n}')
    unit = apply(graph, 'l2normalize', z, eps=config.eps)
    similarity = apply(graph, 'matmul', unit, unit, transposeB=True)
    logits = apply(graph, 'scale', similarity, factor=1.0 / config.temperature)
    targets = (np.arange(n) + n // 2) % n
    return apply(graph, 'crossentropy', logits, targets=targets, mask=np.eye(n, dtype=bool))

def ntxent_graph(graph: Graph, zA: Node, zB: Node, config: LossConfig) -> Node:
    if zA.value.shape != zB.value.shape:
        raise ContractError(f'Sides differ in shape: {zA.value.shape} and {zB.value.shape}')
    return ntxent_node(graph, apply(graph, 'concat', zA, zB, axis=0), config)

def group_ntxent_loss(zA, zB, config: LossConfig | None = None) -> float:
    """Mean contrastive loss over both sides of P pairs of group
    representations, each of shape (P, H)."""
    config = config or LossConfig()
    zA = np.asarray(zA)
    zB = np.asarray(zB)
    if zA.ndim != 2 or zA.shape[0] < 1:
        raise ContractError(f'Expected P x H representations with P >= 1, got shape {zA.shape}')
    graph = Graph()
    return float(ntxent_graph(graph, graph.constant(zA), graph.constant(zB), config).value)

def pretrain_accuracy(zA, zB, eps: float = 1e-12) -> float:
    """Fraction of anchors, over both sides, whose positive partner is
    strictly more similar than every other candidate of its denominator.
    Ties count as misses."""
    zA = np.asarray(zA, dtype=np.float64)
    zB = np.asarray(zB, dtype=np.float64)
    if zA.ndim != 2 or zA.shape != zB.shape:
        raise ContractError(f'Expected two P x H sides of one shape, got {zA.shape} and {zB.shape}')
    P = zA.shape[0]
    if P < 2:
        raise ContractError(f'Retrieval needs at least 2 groups, got {P}')

    unit = apply(Graph(), 'l2normalize', np.concatenate([zA, zB]), eps=eps).value
    similarity = unit @ unit.T
    n = 2 * P
    rows = np.arange(n)
    targets = (rows + P) % n
    positive = similarity[rows, targets]
    others = similarity.copy()
    others[rows, rows] = -np.inf
    others[rows, targets] = -np.inf
    return float(np.mean(positive > others.max(axis=1)))

@dataclass(frozen=True)
class PretrainConfig:
    """Hyperparameters of contrastive pre-training.

    ``checkpointEvery`` is a number of epochs, 0 writes only the final
    checkpoint. ``validateEvery`` is the epoch cadence of the validation
    retrieval accuracy, 0 disables it.
    """
    epochs: int = 300
    P: int = 4
    Q: int = 2
    lr: float = 1e-3
    temperature: float = 0.1
    consistent: bool = True
    augmenter: str = 'crossover'
    redrawSubjects: bool = False
    seed: int = 0
    checkpointEvery: int = 0
    validateEvery: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f'Pre-training needs at least one epoch, got {self.epochs}')
        if self.checkpointEvery < 0 or self.validateEvery < 0:
            raise ConfigurationError('Checkpoint and validation cadences must be non-negative')
        if not self.lr > 0:
            raise ConfigurationError(f'Learning rate must be positive, got {self.lr}')
        #Both raise ConfigurationError on invalid values
        _ = (self.sampler, self.loss)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.P, self.Q, self.consistent, self.redrawSubjects, self.augmenter)
    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.temperature)

@dataclass(frozen=True)
class FinetuneConfig:
    """Hyperparameters of supervised fine-tuning.

    At most one of ``labelsPerClass`` (labelled training samples kept per
    class) and ``labelFraction`` (share of the labelled training samples kept,
    per class) may be set. ``fromScratch`` reinitializes the encoder of every
    run, giving the fully supervised baseline on the same budget.
    """
    epochs: int = 40
    batchSize: int = 32
    lr: float = 1e-3
    labelsPerClass: int | None = None
    labelFraction: float | None = None
    nRuns: int = 5
    seed: int = 0
    hidden: tuple = (512, 256, 128)
    dropout: float = 0.5
    fromScratch: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.nRuns < 1:
            raise ConfigurationError('Fine-tuning needs at least one epoch and one run')
        if self.batchSize < 2:
            raise ConfigurationError(f'Batch size must be at least 2, got {self.batchSize}')
        if not self.lr > 0:
            raise ConfigurationError(f'Learning rate must be positive, got {self.lr}')
        if self.labelsPerClass is not None and self.labelFraction is not None:
            raise ConfigurationError('Set at most one of labelsPerClass and labelFraction')
        if self.labelsPerClass is not None and self.labelsPerClass < 1:
            raise ConfigurationError(f'labelsPerClass must be at least 1, got {self.labelsPerClass}')
        if self.labelFraction is not None and not 0 < self.labelFraction <= 1:
            raise ConfigurationError(f'labelFraction must lie in (0, 1], got {self.labelFraction}')

@dataclass
class RunLog:
    """Everything a training run records.

    Per iteration: ``iterationEpochs``, ``losses`` and ``accPre``. Per epoch:
    ``epochLosses``, ``epochAccPre`` (train batches) and ``valAccPre`` (NaN
    when not computed). Fine-tuning fills ``finetuneTrajectory`` with the
    per-epoch accuracy of the best run and ``confusion``. Values are stored
    as float32 so that a log restored from a checkpoint is identical to the
    one that was saved.

    Once pre-training ends, ``finalAccPre`` holds the evaluation-mode
    retrieval accuracy of the pre-training task over the training clips and
    ``stimulusAccPre`` the stimulus retrieval accuracy over the validation
    clips, NaN without them.
    """
    iterationEpochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    accPre: list = field(default_factory=list)
    epochLosses: list = field(default_factory=list)
    epochAccPre: list = field(default_factory=list)
    valAccPre: list = field(default_factory=list)
    finetuneTrajectory: list = field(default_factory=list)
    confusion: np.ndarray | None = None
    wallClock: float = 0.0
    finalAccPre: float = float('nan')
    stimulusAccPre: float = float('nan')

    @property
    def iterations(self) -> int:
        return len(self.losses)
    @property
    def epochs(self) -> int:
        return len(self.epochLosses)

    def record_iteration(self, epoch: int, loss: float, accPre: float):
        self.iterationEpochs.append(epoch)
        self.losses.append(float(np.float32(loss)))
        self.accPre.append(float(np.float32(accPre)))

    def record_epoch(self, epoch: int, valAccPre: float = float('nan')):
        """Close ``epoch``, averaging the iterations recorded for it."""
        mine = [i for i, e in enumerate(self.iterationEpochs) if e == epoch]
        loss = np.mean([self.losses[i] for i in mine]) if mine else np.nan
        accuracies = [self.accPre[i] for i in mine if not np.isnan(self.accPre[i])]
        self.epochLosses.append(float(np.float32(loss)))
        self.epochAccPre.append(float(np.float32(np.mean(accuracies))) if accuracies else float('nan'))
        self.valAccPre.append(float(np.float32(valAccPre)))

    def records(self) -> tuple:
        """The deterministic part of the log, wall-clock excluded."""
        return (self.iterationEpochs, self.losses, self.accPre, self.epochLosses,
                self.epochAccPre, self.valAccPre)

    def tensors(self) -> dict:
        return {
            'log.iterationEpochs': np.asarray(self.iterationEpochs, dtype=np.float32),
            'log.losses': np.asarray(self.losses, dtype=np.float32),
            'log.accPre': np.asarray(self.accPre, dtype=np.float32),
            'log.epochLosses': np.asarray(self.epochLosses, dtype=np.float32),
            'log.epochAccPre': np.asarray(self.epochAccPre, dtype=np.float32),
            'log.valAccPre': np.asarray(self.valAccPre, dtype=np.float32),
            'log.wallClock': np.asarray(self.wallClock, dtype=np.float32),
        }
    @classmethod
    def from_tensors(cls, tensors: dict) -> RunLog:
        def values(name):
            return [float(v) for v in tensors[name].reshape(-1)]
        return cls([int(v) for v in values('log.iterationEpochs')], values('log.losses'),
                   values('log.accPre'), values('log.epochLosses'), values('log.epochAccPre'),
                   values('log.valAccPre'), wallClock=float(tensors['log.wallClock']))

    def write(self, directory):
        """Write ``runlog.txt`` and ``summary.txt``, plus ``confusion.txt``
        when a confusion matrix was recorded."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        epoch = 0
        for i, e in enumerate(self.iterationEpochs):
            while epoch < e and epoch < self.epochs:
                lines.append(self._epoch_line(epoch))
                epoch += 1
            lines.append(f'iteration {i} epoch {e} loss {self.losses[i]:.9g} '
                         f'acc_pre {self.accPre[i]:.9g}')
        while epoch < self.epochs:
            lines.append(self._epoch_line(epoch))
            epoch += 1
        (directory / 'runlog.txt').write_text(''.join(line + '\n' for line in lines))

        summary = {
            'iterations': self.iterations,
            'epochs': self.epochs,
            'final_loss': f'{self.epochLosses[-1]:.9g}' if self.epochs else 'nan',
            'final_acc_pre': f'{self.epochAccPre[-1]:.9g}' if self.epochs else 'nan',
            'final_val_acc_pre': f'{self.valAccPre[-1]:.9g}' if self.epochs else 'nan',
            'final_train_acc_pre': f'{self.finalAccPre:.9g}',
            'stimulus_acc_pre': f'{self.stimulusAccPre:.9g}',
            'wall_clock': f'{self.wallClock:.3f}',
        }
        (directory / 'summary.txt').write_text(''.join(f'{k} = {v}\n' for k, v in summary.items()))
        if self.confusion is not None:
            write_confusion(directory / 'confusion.txt', self.confusion)
        log.debug('Wrote run log to %s', directory)

    def _epoch_line(self, epoch: int) -> str:
        return (f'epoch {epoch} loss {self.epochLosses[epoch]:.9g} acc_pre '
                f'{self.epochAccPre[epoch]:.9g} val_acc_pre {self.valAccPre[epoch]:.9g}')

    @classmethod
    def read(cls, directory) -> RunLog:
        """Read back the records of ``runlog.txt``."""
        path = Path(directory) / 'runlog.txt'
        runLog = cls()
        for number, line in enumerate(path.read_text().splitlines(), start=1):
            fields = line.split()
            try:
                if fields[0] == 'iteration':
                    runLog.iterationEpochs.append(int(fields[3]))
                    runLog.losses.append(_float32(fields[5]))
                    runLog.accPre.append(_float32(fields[7]))
                elif fields[0] == 'epoch':
                    runLog.epochLosses.append(_float32(fields[3]))
                    runLog.epochAccPre.append(_float32(fields[5]))
                    runLog.valAccPre.append(_float32(fields[7]))
                else:
                    raise ValueError(fields[0])
            except (IndexError, ValueError):
                raise ContractError(f'Malformed run log record at {path}:{number}: {line!r}') from None
        return runLog

#Nine significant digits identify a float32 exactly
def _float32(text: str) -> float:
    return float(np.float32(float(text)))

def write_confusion(path, confusion: np.ndarray):
    rows = [' '.join(str(int(v)) for v in row) for row in confusion]
    Path(path).write_text(''.join(row + '\n' for row in rows))

def _trainable(bundle: ModelBundle, prefixes) -> list:
    return [name for name in bundle.params if name.split('.', 1)[0] in prefixes]

def group_representations(binding: Binding, batch: AugmentedBatch) -> Node:
    """Record encoder and projector on every member of ``batch``, giving the
    (2P, H) group representations, A groups first."""
    dtype = binding.bundle.params['encoder.stem.conv.weight'].dtype
    x = binding.graph.constant(as_input(batch.stacked(), dtype))
    reps = encoder_forward(binding, x)
    return projector_forward(binding, reps, batch.valuesA.shape[1])

def contrastive_step(bundle: ModelBundle, batch: AugmentedBatch, config: LossConfig,
                     rng: np.random.Generator) -> tuple[float, float, dict]:
    """Forward and backward pass of one training iteration.

    Returns the loss, the retrieval accuracy of the batch (NaN for a single
    pair) and the gradient of every encoder and projector parameter.
    """
    graph = Graph()
    binding = Binding(bundle, graph, training=True, rng=rng, trainable=('encoder', 'projector'))
    z = group_representations(binding, batch)
    loss = ntxent_node(graph, z, config)
    grads = backward(graph, loss)

    P = batch.P
    accuracy = pretrain_accuracy(z.value[:P], z.value[P:], config.eps) if P >= 2 else float('nan')
    return float(loss.value), accuracy, grads

def retrieval_accuracy(bundle: ModelBundle, corpus: Corpus, sampler: SamplerConfig, clips, seed: int,
                       passes: int = 1, name: str = 'validation') -> float:
    """Retrieval accuracy of the groups ``sampler`` draws from ``clips``, in
    evaluation mode.

    Every pass walks through the clips once. Batches and augmentations come
    from the fixed ``name`` streams of ``seed``, so values of different epochs
    or models are comparable. NaN when there are fewer than two clips.
    """
    clips = np.asarray(clips)
    if len(clips) < 2:
        return float('nan')
    sampler = dataclasses.replace(sampler, P=max(2, sampler.P))
    correct = 0.0
    anchors = 0
    for p in range(passes):
        state = new_epoch(clips, stream(seed, name, p, 'sampler'))
        augmentRng = stream(seed, name, p, 'augment')
        for batch in epoch_batches(corpus, sampler, state, stream(seed, name, p, 'subjects')):
            augmented = meiosis_batch(batch, augmentRng, sampler.augmenter)
            binding = Binding(bundle, training=False, trainable=())
            z = group_representations(binding, augmented).value
            correct += pretrain_accuracy(z[: augmented.P], z[augmented.P :]) * 2 * augmented.P
            anchors += 2 * augmented.P
    return correct / anchors if anchors else float('nan')

def validation_accuracy(bundle: ModelBundle, corpus: Corpus, config: PretrainConfig,
                        split: str = 'val') -> float:
    """Retrieval accuracy of the pre-training task over the clips of
    ``split``. NaN when the split has fewer than two clips."""
    return retrieval_accuracy(bundle, corpus, config.sampler, corpus.clips(split), config.seed)

def stimulus_accuracy(bundle: ModelBundle, corpus: Corpus, config: PretrainConfig,
                      split: str = 'val') -> float:
    """Retrieval accuracy of stimuli over the clips of ``split``.

    Every group holds 2Q subjects of one clip and is split into halves
    without any exchange of data, so a half can only find its partner through
    what the subjects' windows of one stimulus have in common. Every variant
    is scored on the same task.
    """
    sampler = SamplerConfig(config.P, config.Q, consistent=True, redrawSubjects=config.redrawSubjects,
                            augmenter='none')
    return retrieval_accuracy(bundle, corpus, sampler, corpus.clips(split), config.seed,
                              name='stimulus')

def _training_state(bundle: ModelBundle, state: AdamState, epoch: int, runLog: RunLog) -> dict:
    extra = {'state.t': np.asarray(state.t, dtype=np.float32),
             'state.epoch': np.asarray(epoch, dtype=np.float32)}
    for name in state.m:
        extra['adam.m.' + name] = state.m[name]
        extra['adam.v.' + name] = state.v[name]
    extra.update(runLog.tensors())
    return extra

def _restore(extra: dict, lr: float) -> tuple[AdamState, int, RunLog]:
    try:
        m = {k[len('adam.m.'):]: v for k, v in extra.items() if k.startswith('adam.m.')}
        v = {k[len('adam.v.'):]: v for k, v in extra.items() if k.startswith('adam.v.')}
        state = AdamState(lr=lr, t=int(extra['state.t']), m=m, v=v)
        return state, int(extra['state.epoch']), RunLog.from_tensors(extra)
    except KeyError as error:
        raise ContractError(f'Checkpoint lacks training state {error}') from None

#Passes over the training clips behind the final retrieval accuracy
FINAL_PASSES = 4

def checkpoint_name(epoch: int) -> str:
    return f'checkpoint-{epoch:05d}.ckpt'

def pretrain(corpus: Corpus, config: PretrainConfig, bundle: ModelBundle, outDir=None,
             resume=None) -> tuple[ModelBundle, RunLog]:
    """Contrastive pre-training of encoder and group projector.

    Every epoch draws a clip permutation, subject subsets, split positions
    and dropout masks from the ``sampler``, ``augment`` and ``dropout``
    streams of that epoch, so resuming from a checkpoint written at the end of
    an epoch continues exactly as the uninterrupted run would.

    With ``outDir`` checkpoints are written every ``checkpointEvery`` epochs,
    ``pretrained.ckpt`` at the end, and the run log beside them. ``resume``
    names a checkpoint to continue from.

    Returns the trained bundle without its projector, and the run log.
    """
    if bundle.projectorConfig is None:
        raise ContractError('Pre-training needs a bundle with a group projector')
    sampler = config.sampler
    sampler.check(corpus)
    trainClips = corpus.clips('train') if corpus.splitOfClip is not None else corpus.clips()
    if len(trainClips) < 2:
        raise ContractError(f'Pre-training needs at least 2 training clips, got {len(trainClips)}')

    bundle = bundle.copy()
    names = _trainable(bundle, ('encoder', 'projector'))
    state = AdamState(lr=config.lr)
    runLog = RunLog()
    startEpoch = 0
    if resume is not None:
        bundle, extra = load_model(resume, bundle)
        state, startEpoch, runLog = _restore(extra, config.lr)
        log.info('Resuming pre-training from %s at epoch %d', resume, startEpoch)
    if outDir is not None:
        outDir = Path(outDir)
        outDir.mkdir(parents=True, exist_ok=True)
    hasValidation = corpus.splitOfClip is not None and len(corpus.clips('val')) >= 2

    for epoch in range(startEpoch, config.epochs):
        started = time.perf_counter()
        epochState = new_epoch(trainClips, stream(config.seed, 'sampler', epoch))
        subjectRng = stream(config.seed, 'sampler', epoch, 'subjects')
        augmentRng = stream(config.seed, 'augment', epoch)
        dropoutRng = stream(config.seed, 'dropout', epoch)

        for batch in epoch_batches(corpus, sampler, epochState, subjectRng):
            augmented = meiosis_batch(batch, augmentRng, sampler.augmenter)
            loss, accuracy, grads = contrastive_step(bundle, augmented, config.loss, dropoutRng)
            if not np.isfinite(loss):
                raise DivergenceError(runLog.iterations, loss)
            params, state = adam_step({name: bundle.params[name] for name in names}, grads, state)
            bundle.params.update(params)
            runLog.record_iteration(epoch, loss, accuracy)
            log.debug('Iteration %d: loss %.6f, acc_pre %.4f', runLog.iterations - 1, loss, accuracy)

        valAccuracy = float('nan')
        if hasValidation and config.validateEvery and (epoch + 1) % config.validateEvery == 0:
            valAccuracy = validation_accuracy(bundle, corpus, config)
        runLog.record_epoch(epoch, valAccuracy)
        runLog.wallClock += time.perf_counter() - started
        log.info('Epoch %d/%d: loss %.6f, acc_pre %.4f, val acc_pre %.4f', epoch + 1, config.epochs,
                 runLog.epochLosses[-1], runLog.epochAccPre[-1], runLog.valAccPre[-1])

        if outDir is not None and config.checkpointEvery and (epoch + 1) % config.checkpointEvery == 0:
            save_model(outDir / checkpoint_name(epoch + 1), bundle,
                       _training_state(bundle, state, epoch + 1, runLog))

    runLog.finalAccPre = retrieval_accuracy(bundle, corpus, sampler, trainClips, config.seed,
                                            FINAL_PASSES, 'final')
    if hasValidation:
        runLog.stimulusAccPre = stimulus_accuracy(bundle, corpus, config)
    log.info('Final acc_pre %.4f, stimulus acc_pre %.4f', runLog.finalAccPre, runLog.stimulusAccPre)

    if outDir is not None:
        save_model(outDir / 'pretrained.ckpt', bundle,
                   _training_state(bundle, state, config.epochs, runLog))
        runLog.write(outDir)
    return bundle.without('projector'), runLog

def confusion_matrix(labels, predictions, nClasses: int) -> np.ndarray:
    """Counts of (true, predicted) pairs, rows indexed by the true class."""
    confusion = np.zeros((nClasses, nClasses), dtype=np.int64)
    np.add.at(confusion, (np.asarray(labels), np.asarray(predictions)), 1)
    return confusion

@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

def predict(bundle: ModelBundle, values: np.ndarray, batchSize: int = 256) -> np.ndarray:
    """Predicted classes of (N, M, C) windows, in evaluation mode."""
    predictions = []
    for start in range(0, len(values), batchSize):
        logits = classify(bundle, encode(bundle, values[start : start + batchSize]))
        predictions.append(logits.argmax(axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

def evaluate(bundle: ModelBundle, corpus: Corpus, split: str = 'test', batchSize: int = 256) -> Evaluation:
    """Accuracy and confusion matrix of the classifier on ``split``."""
    if bundle.classifierConfig is None:
        raise ContractError('Evaluation needs a bundle with a classifier')
    values, labels, _ = corpus.flatten(split)
    if labels is None:
        raise ContractError('Evaluation needs a labelled corpus')
    if len(labels) == 0:
        raise ContractError(f'Split `{split}` is empty')
    confusion = confusion_matrix(labels, predict(bundle, values, batchSize),
                                 bundle.classifierConfig.nClasses)
    return Evaluation(float(np.trace(confusion) / confusion.sum()), confusion)

def label_budget(labels: np.ndarray, nClasses: int, rng: np.random.Generator,
                 labelsPerClass: int | None = None, labelFraction: float | None = None) -> np.ndarray:
    """Sorted indices of the labelled samples kept for training.

    Every class must be present. ``labelsPerClass`` keeps exactly that many
    samples of each class, ``labelFraction`` that share of each class (at least
    one), and with neither every sample is kept.
    """
    kept = []
    for c in range(nClasses):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ContractError(f'Class {c} is absent from the training labels')
        if labelsPerClass is not None:
            if labelsPerClass > len(members):
                raise ContractError(f'Class {c} has {len(members)} training samples, '
                                    f'{labelsPerClass} requested')
            members = rng.choice(members, labelsPerClass, replace=False)
        elif labelFraction is not None:
            count = max(1, int(round(len(members) * labelFraction)))
            members = rng.choice(members, count, replace=False)
        kept.append(members)
    return np.sort(np.concatenate(kept))

@dataclass
class FinetuneResult:
    """Outcome of the fine-tuning runs.

    ``accuracies`` and ``valAccuracies`` hold the test and validation
    accuracy of every run (validation is NaN without a validation split).
    ``model`` and ``log`` belong to the run with the best test accuracy; the
    log carries its per-epoch trajectory and confusion matrix.
    """
    accuracies: list
    valAccuracies: list
    bestRun: int
    model: ModelBundle
    log: RunLog

    @property
    def meanAccuracy(self) -> float:
        return float(np.mean(self.accuracies))
    @property
    def sdAccuracy(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0
    @property
    def confusion(self) -> np.ndarray:
        return self.log.confusion

    def write(self, directory):
        """Write ``metrics.txt`` and the best run's log and confusion matrix."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [f'run {i} test_accuracy {acc:.6f} val_accuracy {val:.6f}'
                 for i, (acc, val) in enumerate(zip(self.accuracies, self.valAccuracies))]
        lines += [f'mean_accuracy = {self.meanAccuracy:.6f}', f'sd_accuracy = {self.sdAccuracy:.6f}',
                  f'best_run = {self.bestRun}']
        lines += [f'epoch {i} accuracy {acc:.6f}' for i, acc in enumerate(self.log.finetuneTrajectory)]
        (directory / 'metrics.txt').write_text(''.join(line + '\n' for line in lines))
        write_confusion(directory / 'confusion.txt', self.confusion)

def _split_accuracy(model: ModelBundle, corpus: Corpus, split: str) -> float:
    if corpus.splitOfClip is None or len(corpus.clips(split)) == 0:
        return float('nan')
    return evaluate(model, corpus, split).accuracy

def _finetune_run(bundle: ModelBundle, corpus: Corpus, config: FinetuneConfig, run: int,
                  values: np.ndarray, labels: np.ndarray, testSplit: str):
    runSeed = int(stream(config.seed, 'finetune', run).integers(2 ** 31))
    model = bundle.without('projector')
    if config.fromScratch:
        params, buffers = build_encoder(model.encoderConfig, stream(runSeed, 'init', 'encoder'))
        model.params.update(params)
        model.buffers.update(buffers)
    attach_classifier(model, ClassifierConfig(tuple(config.hidden), max(2, corpus.nClasses),
                                              config.dropout), runSeed)

    names = _trainable(model, ('encoder', 'classifier'))
    state = AdamState(lr=config.lr)
    orderRng = stream(runSeed, 'sampler')
    dropoutRng = stream(runSeed, 'dropout')
    dtype = model.params['encoder.stem.conv.weight'].dtype
    trajectory = []
    iteration = 0

    for epoch in range(config.epochs):
        order = orderRng.permutation(len(labels))
        for start in range(0, len(order), config.batchSize):
            chosen = order[start : start + config.batchSize]
            if len(chosen) < 2:
                #Batch normalization needs two samples
                continue
            graph = Graph()
            binding = Binding(model, graph, training=True, rng=dropoutRng,
                              trainable=('encoder', 'classifier'))
            h = encoder_forward(binding, graph.constant(as_input(values[chosen], dtype)))
            logits = classifier_forward(binding, h)
            loss = apply(graph, 'crossentropy', logits, targets=labels[chosen])
            if not np.isfinite(loss.value):
                raise DivergenceError(iteration, float(loss.value))
            params, state = adam_step({name: model.params[name] for name in names},
                                      backward(graph, loss), state)
            model.params.update(params)
            iteration += 1

        accuracy = _split_accuracy(model, corpus, 'val')
        if np.isnan(accuracy):
            accuracy = float(np.mean(predict(model, values) == labels))
        trajectory.append(accuracy)
        log.debug('Fine-tuning run %d epoch %d: accuracy %.4f', run, epoch, accuracy)

    return model, trajectory, evaluate(model, corpus, testSplit), _split_accuracy(model, corpus, 'val')

def finetune(bundle: ModelBundle, corpus: Corpus, config: FinetuneConfig,
             testSplit: str = 'test') -> FinetuneResult:
    """Train encoder and a fresh classifier on the labelled training clips.

    Repeats ``nRuns`` times with seeds derived from the config seed. The
    training subset of a label budget is drawn once from the ``subsample``
    stream, so every run sees the same labelled samples.
    """
    if corpus.clipLabels is None:
        raise ContractError('Fine-tuning needs a labelled corpus')
    split = 'train' if corpus.splitOfClip is not None else None
    values, labels, _ = corpus.flatten(split)
    kept = label_budget(labels, max(2, corpus.nClasses), stream(config.seed, 'subsample'),
                        config.labelsPerClass, config.labelFraction)
    if len(kept) < 2:
        raise ContractError('Fine-tuning needs at least 2 labelled training samples')
    values, labels = values[kept], labels[kept]
    if corpus.splitOfClip is None:
        testSplit = None
    log.info('Fine-tuning on %d labelled samples, %d runs', len(labels), config.nRuns)

    accuracies, valAccuracies = [], []
    best = None
    for run in range(config.nRuns):
        model, trajectory, evaluation, valAccuracy = _finetune_run(
                bundle, corpus, config, run, values, labels, testSplit)
        accuracies.append(evaluation.accuracy)
        valAccuracies.append(valAccuracy)
        log.info('Fine-tuning run %d: test accuracy %.4f', run, evaluation.accuracy)
        if best is None or evaluation.accuracy > accuracies[best[0]]:
            runLog = RunLog(finetuneTrajectory=trajectory, confusion=evaluation.confusion)
            best = (run, model, runLog)

    return FinetuneResult(accuracies, valAccuracies, best[0], best[1], best[2])

def select_checkpoint(paths, bundle: ModelBundle, corpus: Corpus,
                      config: FinetuneConfig) -> tuple[Path, dict]:
    """The pre-training checkpoint with the best mean validation accuracy
    after fine-tuning, and the score of every checkpoint."""
    paths = [Path(path) for path in paths]
    if not paths:
        raise ContractError('No checkpoints to select from')
    if corpus.splitOfClip is None or len(corpus.clips('val')) == 0:
        raise ContractError('Checkpoint selection needs a validation split')
    scores = {}
    for path in paths:
        loaded, _ = load_model(path, bundle)
        result = finetune(loaded, corpus, config)
        scores[path] = float(np.mean(result.valAccuracies))
        log.info('Checkpoint %s: validation accuracy %.4f', path, scores[path])
    best = max(paths, key=lambda path: scores[path])
    return best, scores

def _variant(changes: dict):
    return lambda config: dataclasses.replace(config, **changes)

VARIANTS = {
    'complete': _variant({}),
    'non-group': _variant({'Q': 1, 'augmenter': 'crossover'}),
    'non-augment': _variant({'augmenter': 'none'}),
    'mixup-augment': _variant({'augmenter': 'mixup'}),
    'non-consistent': _variant({'consistent': False}),
    'consistent-only': _variant({'Q': 1, 'augmenter': 'none'}),
}

def variant_config(config: PretrainConfig, variant: str) -> PretrainConfig:
    """The pre-training configuration of an ablation ``variant``."""
    try:
        return VARIANTS[variant](config)
    except KeyError:
        raise ConfigurationError(f'Unknown variant `{variant}`, expected one of '
                                 f'{list(VARIANTS)}') from None

@dataclass
class ExperimentRow:
    """One line of an ablation or sweep table. Numbers are NaN for a cell
    that was not run, ``note`` tells why.

    ``accPre`` scores the pre-training task of the row itself on the training
    clips, ``valAccPre`` on the validation clips. ``stimulusAccPre`` scores
    stimulus retrieval on the validation clips, the same task for every row.
    """
    name: str
    P: int
    Q: int
    accPre: float = float('nan')
    valAccPre: float = float('nan')
    stimulusAccPre: float = float('nan')
    meanAccuracy: float = float('nan')
    sdAccuracy: float = float('nan')
    note: str = ''

def run_experiment(name: str, corpus: Corpus, pretrainConfig: PretrainConfig,
                   finetuneConfig: FinetuneConfig, bundle: ModelBundle, outDir=None) -> ExperimentRow:
    """Pre-train a copy of ``bundle``, fine-tune it and summarize both."""
    encoder, runLog = pretrain(corpus, pretrainConfig, bundle.copy(), outDir)
    result = finetune(encoder, corpus, finetuneConfig)
    if outDir is not None:
        result.write(Path(outDir) / 'finetune')
    return ExperimentRow(name, pretrainConfig.P, pretrainConfig.Q, runLog.finalAccPre,
                         runLog.valAccPre[-1], runLog.stimulusAccPre, result.meanAccuracy,
                         result.sdAccuracy)

def run_ablation(corpus: Corpus, pretrainConfig: PretrainConfig, finetuneConfig: FinetuneConfig,
                 bundle: ModelBundle, variants=None, outDir=None) -> list[ExperimentRow]:
    """Run every ablation variant from the same initial bundle."""
    variants = list(VARIANTS) if variants is None else list(variants)
    configs = [(variant, variant_config(pretrainConfig, variant)) for variant in variants]
    rows = []
    for variant, config in configs:
        log.info('Ablation variant %s', variant)
        target = None if outDir is None else Path(outDir) / variant
        rows.append(run_experiment(variant, corpus, config, finetuneConfig, bundle, target))
    return rows

def sweep_pq(corpus: Corpus, qs, ps, pretrainConfig: PretrainConfig, finetuneConfig: FinetuneConfig,
             bundle: ModelBundle, outDir=None) -> list[ExperimentRow]:
    """Pre-train and fine-tune every (Q, P) cell. Cells whose groups need
    more subjects than the corpus has are kept in the grid, marked
    infeasible."""
    qs, ps = list(qs), list(ps)
    if not qs or not ps:
        raise ContractError('Sweeps need at least one Q and one P')
    rows = []
    for Q in qs:
        for P in ps:
            name = f'Q={Q} P={P}'
            if 2 * Q > corpus.nSubjects:
                note = f'infeasible: 2Q={2 * Q} exceeds {corpus.nSubjects} subjects'
                log.warning('Skipping %s, %s', name, note)
                rows.append(ExperimentRow(name, P, Q, note=note))
                continue
            config = dataclasses.replace(pretrainConfig, P=P, Q=Q)
            target = None if outDir is None else Path(outDir) / f'q{Q}-p{P}'
            rows.append(run_experiment(name, corpus, config, finetuneConfig, bundle, target))
    return rows

def format_table(rows) -> str:
    header = (f'{"name":<16} {"P":>3} {"Q":>3} {"acc_pre":>8} {"val_acc_pre":>11} {"stim_acc_pre":>12} '
              f'{"accuracy":>17}  note')
    lines = [header]
    for row in rows:
        accuracy = f'{row.meanAccuracy:.4f} +- {row.sdAccuracy:.4f}'
        lines.append(f'{row.name:<16} {row.P:>3} {row.Q:>3} {row.accPre:>8.4f} {row.valAccPre:>11.4f} '
                     f'{row.stimulusAccPre:>12.4f} {accuracy:>17}  {row.note}'.rstrip())
    return '\n'.join(lines)

def check_end_to_end(seed: int = 0, entries: int = 6, step: float = 1e-6, rtol: float = 1e-2,
                     atol: float = 1e-8) -> GradCheckReport:
    """Compare the gradient of the contrastive loss with respect to sampled
    entries of one encoder weight against central differences, on the tiny
    model in 64-bit. Every evaluation draws the same dropout masks."""
    corpus = generate_synthetic_corpus(SyntheticSpec(nClips=4, nSubjects=4, channels=4,
                                                     samples=16, seed=seed))
    bundle = build_model(ENCODER_PRESETS['tiny'], TINY_PROJECTOR, seed=seed).astype(np.float64)
    sampler = SamplerConfig(P=2, Q=2)
    batch = sample_minibatch(corpus, sampler, new_epoch(corpus.clips(), stream(seed, 'sampler')),
                             stream(seed, 'sampler', 'subjects'))
    augmented = meiosis_batch(batch, stream(seed, 'augment'))
    config = LossConfig(temperature=0.5)

    def evaluate_loss(model: ModelBundle):
        graph = Graph()
        binding = Binding(model.copy(), graph, training=True, rng=stream(seed, 'dropout'),
                          trainable=('encoder',))
        loss = ntxent_node(graph, group_representations(binding, augmented), config)
        return graph, loss

    rng = stream(seed, 'gradcheck', 'end-to-end')
    weights = [name for name in bundle.params if name.startswith('encoder.') and name.endswith('.weight')]
    name = weights[int(rng.integers(len(weights)))]
    graph, loss = evaluate_loss(bundle)
    analytic = backward(graph, loss)[name]

    maxAbs = 0.0
    maxRel = 0.0
    passed = True
    for index in rng.choice(bundle.params[name].size, min(entries, bundle.params[name].size),
                            replace=False):
        values = []
        for delta in (step, -step):
            shifted = bundle.copy()
            shifted.params[name] = bundle.params[name].copy()
            shifted.params[name].flat[index] += delta
            values.append(float(evaluate_loss(shifted)[1].value))
        numeric = (values[0] - values[1]) / (2 * step)
        error = abs(analytic.flat[index] - numeric)
        maxAbs = max(maxAbs, error)
        maxRel = max(maxRel, error / max(abs(numeric), abs(analytic.flat[index]), 1e-12))
        passed = passed and error <= atol + rtol * abs(numeric)

    report = GradCheckReport(f'end-to-end ({name})', seed, maxAbs, maxRel, passed)
    log.debug('%s', report)
    return report
