# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Return the random stream named by ``names`` under ``seed``.

    All randomness of the package flows from a single integer seed. Components
    draw from their own named substream, for example ``stream(seed, 'sampler',
    epoch)`` or ``stream(seed, 'init')``, so that any one of them can be
    reproduced without replaying the others.

    The generator is numpy's counter-based Philox. The names are folded into
    the seed sequence's spawn key with CRC-32, which is stable across runs and
    platforms.
    """
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ConfigurationError(f'Seed must be a non-negative integer, got {seed!r}')

    key = tuple(zlib.crc32(str(name).encode('utf-8')) for name in names)
    sequence = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(sequence))

class GroupContrastError(Exception):
    """Base class of all group_contrast errors. Does not define anything."""

class ContractError(GroupContrastError):
    """A precondition of an operation was violated.

    Raised for bad shapes, out of range positions, empty inputs and the like.
    The message names the offending value.
    """

class ConfigurationError(GroupContrastError):
    """A configuration is invalid or names something that does not exist.

    Raised for unknown primitive kinds, unknown presets, pooling kinds or
    ablation variants, and for hyperparameters outside their domain.
    """
