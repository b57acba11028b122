# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

import numpy as np

from group_contrast.corpus import SyntheticSpec, generate_synthetic_corpus, split_by_clip
from group_contrast.network import ENCODER_PRESETS, ProjectorConfig, build_model


def small_corpus(seed=0, split=True, **changes):
    spec = dict(nClips=8, nSubjects=4, channels=4, samples=16, nClasses=2, seed=seed)
    spec.update(changes)
    corpus = generate_synthetic_corpus(SyntheticSpec(**spec))
    return split_by_clip(corpus, seed=seed) if split else corpus

def desk_corpus(seed=0):
    """The corpus of the desk profile: 32 clips, 8 subjects, 4 x 32 windows."""
    return small_corpus(seed, nClips=32, nSubjects=8, samples=32)

def expected_chance(nClips, P):
    """Mean chance retrieval accuracy over the batches of an epoch of
    ``nClips`` clips, including a short last batch."""
    sizes = [P] * (nClips // P) + ([nClips % P] if nClips % P >= 2 else [])
    return float(np.mean([1 / (2 * p - 1) for p in sizes]))

def tiny_bundle(corpus=None, seed=0, pooling='max', hidden=(16, 16, 16)):
    inputShape = None if corpus is None else (corpus.channels, corpus.samples)
    return build_model(ENCODER_PRESETS['tiny'], ProjectorConfig(hidden, pooling), inputShape=inputShape,
                       seed=seed)

def random_group(rng, size, length, channels):
    """``size`` windows of ``length`` x ``channels`` whose entries are all
    distinct, so that every slice can be traced."""
    values = rng.permutation(size * length * channels).astype(np.float32)
    return values.reshape(size, length, channels)

def slices(values):
    """The multiset of (time index, channel row) slices of windows, as a
    sorted list."""
    found = []
    for window in np.asarray(values).reshape((-1,) + np.shape(values)[-2:]):
        for t, row in enumerate(window):
            found.append((t, tuple(row.tolist())))
    return sorted(found)
