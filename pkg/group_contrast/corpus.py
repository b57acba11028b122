# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from group_contrast import ConfigurationError, ContractError, GroupContrastError, stream

log = logging.getLogger(__name__)

CORPUS_MAGIC = b'SGMCCORP'
FORMAT_VERSION = 1
#magic, version, then four extents
HEADER = struct.Struct('<8s5I')
#Largest payload a header may declare, 64 GiB
MAX_PAYLOAD_BYTES = 1 << 36
SPLITS = ('train', 'val', 'test')


@dataclass(frozen=True, eq=False)
class EegSample:
    """One window of a recording.

    - ``values`` -- an M x C array, time samples by channels;
    - ``clipId`` -- the stimulus the window was recorded under;
    - ``subjectId`` -- who it was recorded from. Augmented samples carry a
      pair ``(prefix donor, suffix donor)`` instead.
    """
    values: np.ndarray
    clipId: int
    subjectId: object

@dataclass(frozen=True, eq=False)
class Corpus:
    """A stimulus-aligned dataset.

    - ``tensor`` -- float32 array of shape (clips, subjects, C, M);
    - ``clipLabels`` -- one class label per clip, or ``None``;
    - ``splitOfClip`` -- one of ``'train'``, ``'val'``, ``'test'`` per clip,
      or ``None`` before splitting;
    - ``provenance`` -- free-form string pairs describing where the data
      came from.

    The window of clip ``v`` recorded from subject ``s`` is ``tensor[v, s]``,
    channels by time. :py:meth:`sample` returns it the other way around, as
    an |EegSample|.
    """
    tensor: np.ndarray
    clipLabels: tuple | None = None
    splitOfClip: tuple | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tensor.ndim != 4:
            raise ContractError(f'Corpus tensor must have 4 axes, got shape {self.tensor.shape}')
        if self.tensor.shape[3] < 4:
            raise ContractError(f'Windows need at least 4 time samples, got {self.tensor.shape[3]}')
        if self.clipLabels is not None and len(self.clipLabels) != self.nClips:
            raise ContractError(f'{len(self.clipLabels)} labels for {self.nClips} clips')
        if self.splitOfClip is not None:
            if len(self.splitOfClip) != self.nClips:
                raise ContractError(f'{len(self.splitOfClip)} split tags for {self.nClips} clips')
            unknown = set(self.splitOfClip) - set(SPLITS)
            if unknown:
                raise ContractError(f'Unknown split tags {sorted(unknown)}')

    @property
    def nClips(self) -> int:
        return self.tensor.shape[0]
    @property
    def nSubjects(self) -> int:
        return self.tensor.shape[1]
    @property
    def channels(self) -> int:
        return self.tensor.shape[2]
    @property
    def samples(self) -> int:
        return self.tensor.shape[3]
    @property
    def nClasses(self) -> int:
        if self.clipLabels is None:
            return 0
        return int(max(self.clipLabels)) + 1

    def sample(self, clip: int, subject: int) -> EegSample:
        return EegSample(self.tensor[clip, subject].T, int(clip), int(subject))

    def clips(self, split: str | None = None) -> np.ndarray:
        """Ids of the clips tagged ``split``, every clip when ``split`` is None."""
        if split is None:
            return np.arange(self.nClips)
        if self.splitOfClip is None:
            raise ContractError('Corpus has not been split')
        if split not in SPLITS:
            raise ContractError(f'Unknown split `{split}`, expected one of {SPLITS}')
        return np.array([i for i, tag in enumerate(self.splitOfClip) if tag == split], dtype=np.int64)

    def flatten(self, split: str | None = None):
        """The fine-tuning view of the corpus.

        Clips and subjects are merged into one sample axis. Returns the values
        as an (N, M, C) array, the label of each sample (``None`` for an
        unlabelled corpus) and the clip id of each sample.
        """
        clipIds = self.clips(split)
        values = self.tensor[clipIds].transpose(0, 1, 3, 2).reshape(-1, self.samples, self.channels)
        sampleClips = np.repeat(clipIds, self.nSubjects)
        labels = None
        if self.clipLabels is not None:
            labels = np.asarray(self.clipLabels, dtype=np.int64)[sampleClips]
        return np.ascontiguousarray(values), labels, sampleClips

    def replace(self, **changes) -> Corpus:
        return dataclasses.replace(self, **changes)

class EmptySpecError(ConfigurationError):
    """A synthetic corpus specification asks for no clips."""

class DegenerateChannelError(ContractError):
    """A channel has zero norm and cannot be normalized.

    The channel index can be found in the instance variable ``channel``.
    """
    def __init__(self, channel: int):
        super().__init__(f'Channel {channel} has zero L2 norm')
        self.channel = channel

class FormatError(GroupContrastError):
    """Base class of all errors about malformed files.

    Each instance has the variables ``path``, the file in question, and
    ``offset``, the byte offset at which the problem was found.
    """
    def __init__(self, message: str, path, offset: int):
        super().__init__(f'{path}: {message} at byte {offset}')
        self.path = path
        self.offset = offset

class BadMagicError(FormatError):
    """The file does not start with the expected magic.

    The expected magic can be found in ``expected`` and what was read in
    ``found``.
    """
    def __init__(self, path, expected: bytes, found: bytes):
        super().__init__(f'expected magic {expected!r}, found {found!r}', path, 0)
        self.expected = expected
        self.found = found

class TruncatedError(FormatError):
    """The file holds a different number of bytes than its header declares.

    ``expected`` and ``actual`` hold the two byte counts.
    """
    def __init__(self, path, offset: int, expected: int, actual: int):
        super().__init__(f'declared {expected} bytes but {actual} are present', path, offset)
        self.expected = expected
        self.actual = actual

class DimensionOverflowError(FormatError):
    """The extents in a header describe an impossibly large tensor."""

class MetadataError(FormatError):
    """A line of a metadata sidecar could not be understood.

    The line number, counting from 1, can be found in ``line``.
    """
    def __init__(self, path, line: int, text: str, offset: int):
        super().__init__(f'cannot understand line {line} `{text}`', path, offset)
        self.line = line

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic stimulus-consistent generator.

    Every clip gets a latent signal of ``latentDim`` rows, a sum of
    ``components`` sinusoids per row with frequencies drawn from its class's
    band. Every subject gets a mixing matrix, a shared base plus
    ``subjectMixing`` times a private perturbation, and an offset scaled by
    ``offsetScale``. Gaussian noise of standard deviation ``noise`` is added
    last. Frequencies are in cycles per window; the class bands split
    ``[bandLow, bandHigh]`` evenly, ``bandHigh`` defaulting to M / 4.
    """
    nClips: int = 32
    nSubjects: int = 8
    channels: int = 4
    samples: int = 32
    nClasses: int = 2
    latentDim: int = 2
    components: int = 2
    subjectMixing: float = 0.5
    offsetScale: float = 0.1
    noise: float = 0.1
    bandLow: float = 1.0
    bandHigh: float | None = None
    seed: int = 0

    def validate(self):
        if self.nClips == 0:
            raise EmptySpecError('Synthetic corpus needs at least one clip')
        if min(self.nClips, self.nSubjects, self.channels, self.nClasses,
               self.latentDim, self.components) < 1:
            raise ConfigurationError(f'Every count of {self} must be positive')
        if self.nClips < self.nClasses:
            raise ConfigurationError(f'{self.nClips} clips cannot cover {self.nClasses} classes')
        if self.samples < 4:
            raise ConfigurationError(f'Windows need at least 4 time samples, got {self.samples}')
        if self.noise < 0 or self.subjectMixing < 0 or self.offsetScale < 0:
            raise ConfigurationError('Noise, mixing and offset scales must be non-negative')
        high = self.bandHigh if self.bandHigh is not None else self.samples / 4
        if not 0 < self.bandLow < high:
            raise ConfigurationError(f'Empty frequency band [{self.bandLow}, {high}]')

def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Generate a labelled corpus in which clips, not subjects, carry structure.

    Clip ``v`` is labelled ``v % nClasses``. The result is a pure function of
    ``spec``.
    """
    spec.validate()
    rng = stream(spec.seed, 'synthetic')
    high = spec.bandHigh if spec.bandHigh is not None else spec.samples / 4
    width = (high - spec.bandLow) / spec.nClasses
    t = np.arange(spec.samples) / spec.samples

    labels = tuple(v % spec.nClasses for v in range(spec.nClips))
    latent = np.zeros((spec.nClips, spec.latentDim, spec.samples))
    for v, label in enumerate(labels):
        low = spec.bandLow + label * width
        shape = (spec.latentDim, spec.components)
        amplitude = rng.uniform(0.5, 1.5, shape)
        frequency = rng.uniform(low, low + width, shape)
        phase = rng.uniform(0, 2 * np.pi, shape)
        waves = amplitude[..., None] * np.sin(2 * np.pi * frequency[..., None] * t + phase[..., None])
        latent[v] = waves.sum(axis=1)

    scale = 1.0 / np.sqrt(spec.latentDim)
    base = rng.standard_normal((spec.channels, spec.latentDim)) * scale
    mixing = base + spec.subjectMixing * scale * rng.standard_normal(
            (spec.nSubjects, spec.channels, spec.latentDim))
    offsets = spec.offsetScale * rng.standard_normal((spec.nSubjects, spec.channels, 1))

    tensor = np.einsum('sck,vkm->vscm', mixing, latent) + offsets[None]
    if spec.noise > 0:
        tensor = tensor + spec.noise * rng.standard_normal(tensor.shape)

    provenance = {'source': 'synthetic'}
    provenance.update({key: str(value) for key, value in dataclasses.asdict(spec).items()})
    log.info('Generated synthetic corpus of %d clips x %d subjects, shape %dx%d',
             spec.nClips, spec.nSubjects, spec.channels, spec.samples)
    return Corpus(tensor.astype(np.float32), labels, None, provenance)

def baseline_subtract(trial, nBaseline: int) -> list:
    """Subtract the mean of the first ``nBaseline`` windows from the others.

    Returns the ``len(trial) - nBaseline`` stimulus windows with the averaged
    baseline window removed.
    """
    windows = [np.asarray(window) for window in trial]
    if nBaseline < 1 or len(windows) <= nBaseline:
        raise ContractError(f'{len(windows)} windows cannot hold {nBaseline} baseline '
                            f'windows and at least one stimulus window')
    shapes = {window.shape for window in windows}
    if len(shapes) != 1:
        raise ContractError(f'Windows of a trial differ in shape: {sorted(shapes)}')

    baseline = np.mean(windows[:nBaseline], axis=0)
    return [window - baseline for window in windows[nBaseline:]]

def l2_normalize_per_channel(trial) -> np.ndarray:
    """Scale every channel (row) of a C x T trial to unit L2 norm."""
    trial = np.asarray(trial)
    norms = np.sqrt((trial * trial).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise DegenerateChannelError(int(zero[0]))
    return trial / norms[:, None]

def window_segment(trial, windowLen: int) -> list:
    """Cut a C x T trial into consecutive non-overlapping windows.

    A trailing partial window is dropped.
    """
    trial = np.asarray(trial)
    if windowLen < 1 or trial.shape[1] < windowLen:
        raise ContractError(f'Trial of length {trial.shape[1]} is shorter than a window '
                            f'of length {windowLen}')
    count = trial.shape[1] // windowLen
    return [trial[:, i * windowLen : (i + 1) * windowLen] for i in range(count)]

def binarize_ratings(ratings, threshold: float = 5.0) -> np.ndarray:
    """Ratings above ``threshold`` are high (1), all others low (0)."""
    return (np.asarray(ratings, dtype=np.float64) > threshold).astype(np.int64)

def combine_labels(valence, arousal) -> np.ndarray:
    """Four-category labels from binary valence and arousal.

    0 is low valence and low arousal, 1 low valence and high arousal, 2 high
    valence and low arousal, 3 high valence and high arousal.
    """
    return 2 * np.asarray(valence, dtype=np.int64) + np.asarray(arousal, dtype=np.int64)

def corpus_from_trials(trials, windowLen: int, nBaseline: int = 0, labels=None,
                       normalize: bool = False, note: str = 'imported trials') -> Corpus:
    """Build a corpus from whole trials.

    ``trials`` has shape (videos, subjects, C, T). Each trial is optionally
    L2-normalized per channel, cut into windows of ``windowLen`` samples and,
    when ``nBaseline`` is positive, has its averaged leading baseline windows
    subtracted from the rest. Window ``j`` of video ``i`` becomes a clip
    watched by every subject. ``labels`` holds one label per video, inherited
    by all of its clips.
    """
    trials = np.asarray(trials)
    if trials.ndim != 4:
        raise ContractError(f'Trials must have shape (videos, subjects, C, T), got {trials.shape}')
    videos, subjects = trials.shape[:2]

    segments = []
    for i in range(videos):
        perSubject = []
        for s in range(subjects):
            trial = trials[i, s]
            if normalize:
                trial = l2_normalize_per_channel(trial)
            windows = window_segment(trial, windowLen)
            if nBaseline > 0:
                windows = baseline_subtract(windows, nBaseline)
            perSubject.append(np.stack(windows))
        segments.append(np.stack(perSubject, axis=1))

    #(videos, segments, subjects, C, M) -> (clips, subjects, C, M)
    tensor = np.stack(segments).reshape((-1, subjects) + segments[0].shape[2:])
    clipLabels = None
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != videos:
            raise ContractError(f'{len(labels)} labels for {videos} videos')
        clipLabels = tuple(int(label) for label in np.repeat(labels, segments[0].shape[0]))

    provenance = {'source': note, 'windowLen': str(windowLen), 'nBaseline': str(nBaseline),
                  'normalize': str(normalize)}
    return Corpus(tensor.astype(np.float32), clipLabels, None, provenance)

def split_by_clip(corpus: Corpus, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> Corpus:
    """Assign every clip to the train, val or test split at random.

    The validation and test sets get ``round(n * ratio)`` clips, the rest goes
    to training. Whole clips are assigned, so no stimulus is shared between
    splits.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f'Split ratios must be three non-negative fractions summing to 1, '
                            f'got {ratios}')
    n = corpus.nClips
    if n < 3:
        raise ContractError(f'Cannot split {n} clips three ways')

    nVal = round(n * ratios[1])
    nTest = round(n * ratios[2])
    nTrain = n - nVal - nTest
    order = stream(seed, 'split').permutation(n)

    tags = [''] * n
    for position, clip in enumerate(order):
        if position < nTrain:
            tags[clip] = 'train'
        elif position < nTrain + nVal:
            tags[clip] = 'val'
        else:
            tags[clip] = 'test'

    log.info('Split %d clips into %d/%d/%d', n, nTrain, nVal, nTest)
    return corpus.replace(splitOfClip=tuple(tags))

def write_tensor(path, magic: bytes, tensor: np.ndarray):
    """Write a 4-axis tensor in the container layout shared by corpora and
    batch dumps."""
    if tensor.ndim != 4:
        raise ContractError(f'Container tensors have 4 axes, got shape {tensor.shape}')
    header = HEADER.pack(magic, FORMAT_VERSION, *tensor.shape)
    with open(path, 'wb') as file:
        file.write(header)
        file.write(np.ascontiguousarray(tensor, dtype='<f4').tobytes())
    log.debug('Wrote %s', path)

def read_tensor(path, magic: bytes) -> np.ndarray:
    with open(path, 'rb') as file:
        data = file.read()

    if len(data) < len(magic) or data[: len(magic)] != magic:
        raise BadMagicError(path, magic, data[: len(magic)])
    if len(data) < HEADER.size:
        raise TruncatedError(path, len(data), HEADER.size, len(data))

    _, version, *extents = HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise FormatError(f'unsupported version {version}, expected {FORMAT_VERSION}', path, 8)
    if min(extents) < 1:
        raise DimensionOverflowError(f'zero extent in {tuple(extents)}', path, 12)
    declared = 4
    for extent in extents:
        declared *= extent
        if declared > MAX_PAYLOAD_BYTES:
            raise DimensionOverflowError(f'extents {tuple(extents)} exceed the payload limit',
                                         path, 12)
    actual = len(data) - HEADER.size
    if actual != declared:
        raise TruncatedError(path, HEADER.size + min(actual, declared), declared, actual)

    values = np.frombuffer(data, dtype='<f4', offset=HEADER.size)
    return values.reshape(extents).astype(np.float32)

def meta_path(path) -> Path:
    return Path(path).with_suffix('.meta')

def write_corpus(corpus: Corpus, path):
    """Write ``corpus`` to ``path`` and its metadata to the ``.meta`` sidecar.

    Provenance keys and values must fit on one line, and keys cannot hold
    ``=``; a corpus breaking this raises |ContractError| before anything is
    written.
    """
    for key, value in corpus.provenance.items():
        if any(ch in str(key) + str(value) for ch in '\r\n') or '=' in str(key):
            raise ContractError(f'Provenance entry {key!r}: {value!r} does not fit on one metadata line')
    write_tensor(path, CORPUS_MAGIC, corpus.tensor)

    lines = ['# group_contrast corpus metadata', f'version={FORMAT_VERSION}']
    if corpus.clipLabels is not None:
        lines += [f'label={clip}:{label}' for clip, label in enumerate(corpus.clipLabels)]
    if corpus.splitOfClip is not None:
        lines += [f'split={clip}:{tag}' for clip, tag in enumerate(corpus.splitOfClip)]
    lines += [f'provenance.{key}={value}' for key, value in corpus.provenance.items()]
    with open(meta_path(path), 'w', encoding='utf-8', newline='\n') as file:
        file.write('\n'.join(lines) + '\n')

def _parse_meta(path, nClips: int):
    labels, splits, provenance = {}, {}, {}
    offset = 0
    with open(path, encoding='utf-8', newline='\n') as file:
        text = file.read()
    for number, line in enumerate(text.split('\n'), start=1):
        start = offset
        offset += len(line.encode('utf-8')) + 1
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise MetadataError(path, number, line, start)
        try:
            if key == 'version':
                if int(value) != FORMAT_VERSION:
                    raise MetadataError(path, number, line, start)
            elif key in ('label', 'split'):
                clip, _, item = value.partition(':')
                clip = int(clip)
                if not 0 <= clip < nClips:
                    raise MetadataError(path, number, line, start)
                if key == 'label':
                    labels[clip] = int(item)
                elif item in SPLITS:
                    splits[clip] = item
                else:
                    raise MetadataError(path, number, line, start)
            elif key.startswith('provenance.'):
                provenance[key[len('provenance.'):]] = value
            else:
                raise MetadataError(path, number, line, start)
        except ValueError:
            raise MetadataError(path, number, line, start) from None

    for name, table in (('labels', labels), ('split tags', splits)):
        if table and len(table) != nClips:
            raise FormatError(f'{name} given for {len(table)} of {nClips} clips', path, offset)
    clipLabels = tuple(labels[i] for i in range(nClips)) if labels else None
    splitOfClip = tuple(splits[i] for i in range(nClips)) if splits else None
    return clipLabels, splitOfClip, provenance

def read_corpus(path) -> Corpus:
    """Read a corpus written by :py:func:`write_corpus`.

    A missing sidecar yields an unlabelled, unsplit corpus, which is how
    externally converted recordings enter the package.
    """
    tensor = read_tensor(path, CORPUS_MAGIC)
    sidecar = meta_path(path)
    if not sidecar.exists():
        return Corpus(tensor, provenance={'source': str(path)})
    clipLabels, splitOfClip, provenance = _parse_meta(sidecar, tensor.shape[0])
    return Corpus(tensor, clipLabels, splitOfClip, provenance)
