# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from group_contrast import ConfigurationError, ContractError
from group_contrast.corpus import Corpus, EegSample, write_tensor

log = logging.getLogger(__name__)

BATCH_MAGIC = b'SGMCBTCH'
AUGMENTERS = ('crossover', 'mixup', 'none')


@dataclass(frozen=True)
class SamplerConfig:
    """How minibatches are drawn.

    - ``P`` -- clips, and so groups, per iteration;
    - ``Q`` -- members of each augmented group; source groups hold 2Q;
    - ``consistent`` -- whether every member of a group shares the group's
      stimulus. When false, every member is drawn from any training clip and
      any subject;
    - ``redrawSubjects`` -- draw a fresh subject subset for every group
      instead of one per iteration;
    - ``augmenter`` -- ``'crossover'`` (Meiosis), ``'mixup'`` or ``'none'``
      (pairing and separation only).
    """
    P: int = 8
    Q: int = 2
    consistent: bool = True
    redrawSubjects: bool = False
    augmenter: str = 'crossover'

    def __post_init__(self):
        if self.P < 1 or self.Q < 1:
            raise ConfigurationError(f'P and Q must be positive, got P={self.P}, Q={self.Q}')
        if self.augmenter not in AUGMENTERS:
            raise ConfigurationError(f'Unknown augmenter `{self.augmenter}`, expected one of '
                                     f'{AUGMENTERS}')

    def check(self, corpus: Corpus):
        if 2 * self.Q > corpus.nSubjects:
            raise ConfigurationError(f'Groups of 2Q={2 * self.Q} need as many subjects, the '
                                     f'corpus has {corpus.nSubjects}')

@dataclass
class EpochState:
    """Progress through one epoch: a permutation of the training clips and
    the number of them already consumed."""
    order: np.ndarray
    cursor: int = 0

    @property
    def remaining(self) -> int:
        return len(self.order) - self.cursor

def new_epoch(clips, rng: np.random.Generator) -> EpochState:
    return EpochState(rng.permutation(np.asarray(clips)), 0)

@dataclass(frozen=True, eq=False)
class GroupBatch:
    """P groups of 2Q samples.

    ``values`` has shape (P, 2Q, M, C); ``clipIds`` and ``subjectIds`` have
    shape (P, 2Q) and tag every member. ``groupClipIds`` holds the stimulus of
    each group; when ``consistent`` every member of group ``i`` carries it.
    """
    values: np.ndarray
    clipIds: np.ndarray
    subjectIds: np.ndarray
    groupClipIds: np.ndarray
    consistent: bool = True

    @property
    def P(self) -> int:
        return self.values.shape[0]
    @property
    def groups(self) -> list:
        return [[EegSample(self.values[i, k], int(self.clipIds[i, k]), int(self.subjectIds[i, k]))
                 for k in range(self.values.shape[1])] for i in range(self.P)]

@dataclass(frozen=True, eq=False)
class AugmentedBatch:
    """The 2P augmented groups of one iteration, as P pairs.

    ``valuesA`` and ``valuesB`` have shape (P, Q, M, C): group A and group B
    of every pair. ``clipIdsA``/``clipIdsB`` tag every member, ``subjectIdsA``
    /``subjectIdsB`` hold the (prefix donor, suffix donor) subject pair of
    every member. ``splitPosition`` is the c shared by the whole batch.
    """
    valuesA: np.ndarray
    valuesB: np.ndarray
    clipIdsA: np.ndarray
    clipIdsB: np.ndarray
    subjectIdsA: np.ndarray
    subjectIdsB: np.ndarray
    splitPosition: int

    @property
    def P(self) -> int:
        return self.valuesA.shape[0]
    @property
    def pairs(self) -> list:
        def group(values, clips, subjects, i):
            return [EegSample(values[i, k], int(clips[i, k]), tuple(subjects[i, k]))
                    for k in range(values.shape[1])]
        return [(group(self.valuesA, self.clipIdsA, self.subjectIdsA, i),
                 group(self.valuesB, self.clipIdsB, self.subjectIdsB, i)) for i in range(self.P)]
    def stacked(self) -> np.ndarray:
        """Every member of every group, groups A first: shape (2P * Q, M, C)."""
        values = np.concatenate([self.valuesA, self.valuesB])
        return values.reshape((-1,) + values.shape[2:])

def _subjects(corpus: Corpus, config: SamplerConfig, count: int, rng) -> np.ndarray:
    if config.redrawSubjects:
        return np.stack([rng.choice(corpus.nSubjects, 2 * config.Q, replace=False)
                         for _ in range(count)])
    shared = rng.choice(corpus.nSubjects, 2 * config.Q, replace=False)
    return np.broadcast_to(shared, (count, 2 * config.Q)).copy()

def _take(corpus: Corpus, state: EpochState, config: SamplerConfig) -> np.ndarray:
    if state.remaining < 1:
        raise ContractError('Epoch has no unconsumed clips left')
    config.check(corpus)
    count = min(config.P, state.remaining)
    clips = state.order[state.cursor : state.cursor + count]
    state.cursor += count
    return clips

def sample_minibatch(corpus: Corpus, config: SamplerConfig, state: EpochState,
                     rng: np.random.Generator) -> GroupBatch:
    """Draw the next batch of clip-homogeneous groups.

    Takes the next ``min(P, remaining)`` clips of the epoch permutation and
    fills group ``i`` with the windows of clip ``i`` recorded from 2Q distinct
    subjects.
    """
    clips = _take(corpus, state, config)
    subjects = _subjects(corpus, config, len(clips), rng)
    clipIds = np.repeat(clips[:, None], 2 * config.Q, axis=1)
    #(P, 2Q, C, M) -> (P, 2Q, M, C)
    values = corpus.tensor[clipIds, subjects].transpose(0, 1, 3, 2)
    return GroupBatch(np.ascontiguousarray(values), clipIds, subjects, clips.copy())

def sample_nonconsistent(corpus: Corpus, config: SamplerConfig, state: EpochState,
                         rng: np.random.Generator, trainClips=None) -> GroupBatch:
    """Draw the next batch of groups whose members may come from any clip.

    The epoch still advances through the clip permutation, which bounds the
    number of iterations, but every member's clip is drawn uniformly from
    ``trainClips`` (the clips of the permutation when not given) and its
    subject uniformly from all subjects, independently of every other member.
    The two halves of a group are then no more alike than any two groups.
    """
    clips = _take(corpus, state, config)
    pool = np.asarray(trainClips) if trainClips is not None else state.order
    shape = (len(clips), 2 * config.Q)
    clipIds = rng.choice(pool, size=shape, replace=True)
    subjects = rng.integers(0, corpus.nSubjects, size=shape)
    values = corpus.tensor[clipIds, subjects].transpose(0, 1, 3, 2)
    return GroupBatch(np.ascontiguousarray(values), clipIds, subjects, clips.copy(), consistent=False)

def epoch_batches(corpus: Corpus, config: SamplerConfig, state: EpochState,
                  rng: np.random.Generator):
    """Yield every batch of an epoch.

    A final remainder of a single clip is consumed without being emitted,
    since a lone group has no negatives.
    """
    trainClips = state.order.copy()
    while state.remaining > 0:
        if state.remaining == 1 and config.P > 1:
            log.debug('Skipping the last clip %d of the epoch', state.order[state.cursor])
            state.cursor += 1
            break
        if config.consistent:
            yield sample_minibatch(corpus, config, state, rng)
        else:
            yield sample_nonconsistent(corpus, config, state, rng, trainClips)

def _check_position(c: int, length: int):
    if not 2 <= c <= length - 2:
        raise ContractError(f'Split position {c} outside [2, {length - 2}] for windows of '
                            f'{length} samples')

def crossover(a: EegSample, b: EegSample, c: int) -> tuple[EegSample, EegSample]:
    """Exchange the first ``c`` time samples of two windows.

    The first result holds the first ``c`` rows of ``b`` followed by the rest
    of ``a``, the second the reverse. Results take the clip of their suffix
    donor and the subject pair (prefix donor, suffix donor).
    """
    if a.values.shape != b.values.shape:
        raise ContractError(f'Cannot cross windows of shapes {a.values.shape} and '
                            f'{b.values.shape}')
    _check_position(c, a.values.shape[0])

    first = np.concatenate([b.values[:c], a.values[c:]])
    second = np.concatenate([a.values[:c], b.values[c:]])
    return (EegSample(first, a.clipId, (b.subjectId, a.subjectId)),
            EegSample(second, b.clipId, (a.subjectId, b.subjectId)))

def mixup_crossover(a: EegSample, b: EegSample, lam: float | None = None,
                    rng: np.random.Generator | None = None) -> tuple[EegSample, EegSample]:
    """Mix two windows, ``lam * a + (1 - lam) * b`` and the mirror image.

    ``lam`` is drawn uniformly from [0, 1] with ``rng`` when not given.
    """
    if a.values.shape != b.values.shape:
        raise ContractError(f'Cannot mix windows of shapes {a.values.shape} and '
                            f'{b.values.shape}')
    if lam is None:
        if rng is None:
            raise ContractError('Mixup needs either a coefficient or a random stream')
        lam = float(rng.uniform())
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f'Mixup coefficient {lam} outside [0, 1]')

    first = lam * a.values + (1 - lam) * b.values
    second = (1 - lam) * a.values + lam * b.values
    return (EegSample(first.astype(a.values.dtype), a.clipId, (a.subjectId, b.subjectId)),
            EegSample(second.astype(a.values.dtype), b.clipId, (b.subjectId, a.subjectId)))

def _matching(size: int, rng: np.random.Generator):
    """A uniformly random perfect matching and a side for every pair.

    Shuffles the members and pairs position k with position k + size/2.
    Returns the two member index arrays and whether each pair's results are
    swapped between the output groups.
    """
    if size < 2 or size % 2:
        raise ContractError(f'Meiosis needs an even group of at least 2, got {size}')
    order = rng.permutation(size)
    half = size // 2
    swap = rng.integers(0, 2, half).astype(bool)
    return order[:half], order[half:], swap

def _separate(firstOut, secondOut, swap):
    #Partners always land in different groups
    groupA = np.where(swap[:, None, None], secondOut, firstOut)
    groupB = np.where(swap[:, None, None], firstOut, secondOut)
    return groupA, groupB

def _recombine(a, b, c, augmenter, rng):
    #a, b: (pairs, M, C) -> both results of every pair
    if augmenter == 'crossover':
        return (np.concatenate([b[:, :c], a[:, c:]], axis=1),
                np.concatenate([a[:, :c], b[:, c:]], axis=1))
    if augmenter == 'mixup':
        lam = rng.uniform(size=(len(a), 1, 1)).astype(a.dtype)
        return lam * a + (1 - lam) * b, (1 - lam) * a + lam * b
    return a, b

def meiosis(group, c: int, rng: np.random.Generator) -> tuple[list, list]:
    """Split a group of 2Q samples into two homologous groups of Q.

    Members are matched into Q random pairs, every pair is crossed at the
    shared position ``c`` and its two results go to different output groups,
    which one to which chosen at random.
    """
    group = list(group)
    first, second, swap = _matching(len(group), rng)
    groupA, groupB = [], []
    for i, j, flip in zip(first, second, swap):
        left, right = crossover(group[i], group[j], c)
        if flip:
            left, right = right, left
        groupA.append(left)
        groupB.append(right)
    return groupA, groupB

def meiosis_batch(batch: GroupBatch, rng: np.random.Generator,
                  augmenter: str = 'crossover') -> AugmentedBatch:
    """Augment every group of ``batch`` with one split position.

    Draws c uniformly from 2..M-2 once and applies Meiosis to every group
    with it. ``augmenter`` swaps the crossover for mixup (``'mixup'``) or for
    nothing at all (``'none'``); pairing and separation are kept.

    Only homologous partners, recorded under one stimulus, exchange data. The
    groups of a non-consistent batch are paired and separated as drawn.
    """
    if batch.P < 1:
        raise ContractError('Cannot augment an empty batch')
    if augmenter not in AUGMENTERS:
        raise ConfigurationError(f'Unknown augmenter `{augmenter}`, expected one of {AUGMENTERS}')
    if not batch.consistent:
        augmenter = 'none'
    length = batch.values.shape[2]
    if length < 4:
        raise ContractError(f'Windows of {length} samples have no interior split position')
    c = int(rng.integers(2, length - 1))

    outA, outB, clipsA, clipsB, subjectsA, subjectsB = [], [], [], [], [], []
    for i in range(batch.P):
        first, second, swap = _matching(batch.values.shape[1], rng)
        a, b = batch.values[i, first], batch.values[i, second]
        firstOut, secondOut = _recombine(a, b, c, augmenter, rng)
        groupA, groupB = _separate(firstOut, secondOut, swap)
        outA.append(groupA)
        outB.append(groupB)

        #Clip of the suffix donor and (prefix donor, suffix donor) subjects
        clipFirst, clipSecond = batch.clipIds[i, first], batch.clipIds[i, second]
        subjectFirst = np.stack([batch.subjectIds[i, second], batch.subjectIds[i, first]], axis=1)
        subjectSecond = np.stack([batch.subjectIds[i, first], batch.subjectIds[i, second]], axis=1)
        if augmenter != 'crossover':
            #Without an exchange the first result is dominated by the first member
            subjectFirst, subjectSecond = subjectSecond, subjectFirst
        clipsA.append(np.where(swap, clipSecond, clipFirst))
        clipsB.append(np.where(swap, clipFirst, clipSecond))
        subjectsA.append(np.where(swap[:, None], subjectSecond, subjectFirst))
        subjectsB.append(np.where(swap[:, None], subjectFirst, subjectSecond))

    return AugmentedBatch(np.stack(outA), np.stack(outB), np.stack(clipsA), np.stack(clipsB),
                          np.stack(subjectsA), np.stack(subjectsB), c)

def dump_batch(batch, path):
    """Write a batch in the corpus container layout, for debugging.

    A |GroupBatch| is written as (P, 2Q, C, M), an |AugmentedBatch| as
    (2P, Q, C, M) with all A groups first.
    """
    if isinstance(batch, AugmentedBatch):
        values = np.concatenate([batch.valuesA, batch.valuesB])
    else:
        values = batch.values
    write_tensor(path, BATCH_MAGIC, values.transpose(0, 1, 3, 2))
