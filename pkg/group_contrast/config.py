# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

"""Run configuration files.

A run is described by a YAML mapping with the sections ``run``, ``corpus``,
``encoder``, ``projector``, ``classifier``, ``pretrain``, ``finetune`` and
``sweep``, each itself a mapping of keys to values. The file names a profile
in ``run``; the profile's values are read first and every key of the file
overrides them.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import yaml

from group_contrast import ConfigurationError, ContractError
from group_contrast.corpus import (
    Corpus,
    SyntheticSpec,
    generate_synthetic_corpus,
    read_corpus,
    split_by_clip,
)
from group_contrast.network import (
    EncoderConfig,
    ModelBundle,
    ProjectorConfig,
    build_model,
    encoder_preset,
)
from group_contrast.objective import VARIANTS, FinetuneConfig, PretrainConfig

log = logging.getLogger(__name__)

#Values of the published training recipes, plus a desk-scale one
PROFILES = {
    'deap-like': {
        'corpus': {'clips': 2400, 'subjects': 32, 'channels': 32, 'samples': 128, 'classes': 2},
        'encoder': {'preset': 'deep'},
        'projector': {'hidden': [1024, 2048, 4096]},
        'classifier': {'hidden': [512, 256, 128]},
        'pretrain': {'epochs': 2800, 'batch_size': 32, 'lr': 1e-4, 'tau': 0.1, 'p': 8, 'q': 2},
        'finetune': {'epochs': 60, 'batch_size': 2048, 'lr': 1e-3},
    },
    'seed-like': {
        'corpus': {'clips': 3394, 'subjects': 15, 'channels': 62, 'samples': 200, 'classes': 3},
        'encoder': {'preset': 'deep'},
        'projector': {'hidden': [1024, 2048, 4096]},
        'classifier': {'hidden': [512, 256, 128]},
        'pretrain': {'epochs': 3288, 'batch_size': 64, 'lr': 1e-3, 'tau': 0.1, 'p': 16, 'q': 2},
        'finetune': {'epochs': 70, 'batch_size': 256, 'lr': 1e-3},
    },
    'desk': {
        'corpus': {'clips': 32, 'subjects': 8, 'channels': 4, 'samples': 32, 'classes': 2,
                   'noise': 0.1},
        'encoder': {'preset': 'tiny'},
        'projector': {'hidden': [64, 64, 64]},
        'classifier': {'hidden': [32, 16]},
        'pretrain': {'epochs': 300, 'lr': 1e-3, 'tau': 0.1, 'p': 4, 'q': 2},
        'finetune': {'epochs': 40, 'batch_size': 32, 'lr': 1e-3},
    },
}

def _int(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f'not an integer: {value!r}')
    return value
def _float(value) -> float:
    #YAML reads exponents without a dot, like 1e-4, as strings
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ValueError(f'not a number: {value!r}')
    return float(value)
def _str(value) -> str:
    if not isinstance(value, str):
        raise ValueError(f'not a string: {value!r}')
    return value
def _bool(value) -> bool:
    if not isinstance(value, bool):
        raise ValueError(f'not a boolean: {value!r}')
    return value
def _list(parse):
    def parse_list(value) -> tuple:
        if not isinstance(value, list):
            value = [value]
        return tuple(parse(item) for item in value)
    return parse_list
def _optional(parse):
    return lambda value: None if value is None else parse(value)

#section -> key -> value parser
KEYS = {
    'run': {'seed': _int, 'out': _str, 'profile': _str, 'variant': _str},
    'corpus': {'path': _str, 'clips': _int, 'subjects': _int, 'channels': _int, 'samples': _int,
               'classes': _int, 'latent_dim': _int, 'components': _int, 'subject_mixing': _float,
               'offset_scale': _float, 'noise': _float, 'band_low': _float,
               'band_high': _optional(_float), 'split': _list(_float)},
    'encoder': {'preset': _str, 'output_dim': _int},
    'projector': {'hidden': _list(_int), 'pooling': _str, 'dropout': _float},
    'classifier': {'hidden': _list(_int), 'dropout': _float},
    'pretrain': {'epochs': _int, 'batch_size': _int, 'lr': _float, 'tau': _float, 'p': _int,
                 'q': _int, 'consistent': _bool, 'augmenter': _str, 'redraw_subjects': _bool,
                 'checkpoint_every': _int, 'validate_every': _int},
    'finetune': {'epochs': _int, 'batch_size': _int, 'lr': _float,
                 'labels_per_class': _optional(_int), 'label_fraction': _optional(_float),
                 'runs': _int, 'from_scratch': _bool, 'checkpoint': _str},
    'sweep': {'q': _list(_int), 'p': _list(_int)},
}

@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs.

    ``corpusPath`` is ``None`` for a synthetic corpus generated from
    ``synthetic``. ``checkpoint`` names the pre-trained checkpoint fine-tuning
    starts from; ``None`` means the ``pretrained.ckpt`` of the output
    directory.
    """
    seed: int
    out: Path
    profile: str
    variant: str
    corpusPath: Path | None
    synthetic: SyntheticSpec
    splitRatios: tuple
    encoder: EncoderConfig
    projector: ProjectorConfig
    classifierHidden: tuple
    classifierDropout: float
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    checkpoint: Path | None
    sweepQ: tuple
    sweepP: tuple

    def synthetic_corpus(self) -> Corpus:
        return split_by_clip(generate_synthetic_corpus(self.synthetic), self.splitRatios, self.seed)

    def load_corpus(self) -> Corpus:
        """Read the corpus, or generate the synthetic one, split by clip
        unless it already is."""
        if self.corpusPath is not None:
            corpus = read_corpus(self.corpusPath)
        else:
            corpus = generate_synthetic_corpus(self.synthetic)
        if corpus.splitOfClip is None:
            corpus = split_by_clip(corpus, self.splitRatios, self.seed)
        return corpus

    def new_bundle(self, corpus: Corpus, projector: bool = True) -> ModelBundle:
        """A freshly initialized encoder, with a projector when asked, for
        windows of ``corpus``."""
        return build_model(self.encoder, self.projector if projector else None,
                           inputShape=(corpus.channels, corpus.samples), seed=self.seed)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

def _sections(text: str, source: str) -> dict:
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as error:
        raise ConfigurationError(f'{source}: {error}') from None
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigurationError(f'{source}: expected a mapping of sections, got {type(document).__name__}')
    for section, keys in document.items():
        if section not in KEYS:
            raise ConfigurationError(f'{source}: unknown section `{section}`')
        if keys is not None and not isinstance(keys, dict):
            raise ConfigurationError(f'{source}: section `{section}` is not a mapping')
    return {section: keys or {} for section, keys in document.items()}

def _read(sections: dict, source: str) -> dict:
    values = {}
    for section, keys in sections.items():
        values[section] = {}
        for key, value in keys.items():
            parse = KEYS[section].get(key)
            if parse is None:
                raise ConfigurationError(f'{source}: unknown key `{key}` in `{section}`')
            try:
                values[section][key] = parse(value)
            except ValueError as error:
                raise ConfigurationError(f'{source}: bad value for `{key}` in `{section}`: '
                                         f'{error}') from None
    return values

def parse_config(text: str = '', source: str = '<string>', base: Path | None = None,
                 seed: int | None = None, out=None) -> RunConfig:
    """Parse configuration ``text``.

    ``seed`` and ``out`` override the file. Relative paths are taken from
    ``base``. A seed is mandatory, either in ``run`` or as ``seed``.
    """
    sections = _sections(text, source)
    profile = sections.get('run', {}).get('profile', 'desk')
    if profile not in PROFILES:
        raise ConfigurationError(f'{source}: unknown profile `{profile}`, expected one of '
                                 f'{sorted(PROFILES)}')
    merged = {section: dict(keys) for section, keys in PROFILES[profile].items()}
    for section, keys in sections.items():
        merged.setdefault(section, {}).update(keys)

    values = _read(merged, source)
    get = lambda section, key, default=None: values.get(section, {}).get(key, default)
    base = Path(base) if base is not None else Path('.')

    seed = seed if seed is not None else get('run', 'seed')
    if seed is None:
        raise ConfigurationError(f'{source}: no seed given, set `seed` in `run` or pass --seed')
    if seed < 0:
        raise ConfigurationError(f'{source}: seed must be non-negative, got {seed}')

    synthetic = SyntheticSpec(
        nClips=get('corpus', 'clips', 32), nSubjects=get('corpus', 'subjects', 8),
        channels=get('corpus', 'channels', 4), samples=get('corpus', 'samples', 32),
        nClasses=get('corpus', 'classes', 2), latentDim=get('corpus', 'latent_dim', 2),
        components=get('corpus', 'components', 2),
        subjectMixing=get('corpus', 'subject_mixing', 0.5),
        offsetScale=get('corpus', 'offset_scale', 0.1), noise=get('corpus', 'noise', 0.1),
        bandLow=get('corpus', 'band_low', 1.0), bandHigh=get('corpus', 'band_high'), seed=seed)
    splitRatios = get('corpus', 'split', (0.7, 0.15, 0.15))
    if len(splitRatios) != 3:
        raise ConfigurationError(f'{source}: split needs three ratios, got {splitRatios}')
    corpusPath = get('corpus', 'path')

    encoder = encoder_preset(get('encoder', 'preset', 'tiny'))
    if get('encoder', 'output_dim') is not None:
        encoder = dataclasses.replace(encoder, outputDim=get('encoder', 'output_dim'))
    encoder.validate()
    projector = ProjectorConfig(get('projector', 'hidden', ProjectorConfig.hidden),
                                get('projector', 'pooling', 'max'),
                                get('projector', 'dropout', 0.5))
    projector.validate()

    pretrain = PretrainConfig(
        epochs=get('pretrain', 'epochs', 300), P=get('pretrain', 'p', 4), Q=get('pretrain', 'q', 2),
        lr=get('pretrain', 'lr', 1e-3), temperature=get('pretrain', 'tau', 0.1),
        consistent=get('pretrain', 'consistent', True),
        augmenter=get('pretrain', 'augmenter', 'crossover'),
        redrawSubjects=get('pretrain', 'redraw_subjects', False), seed=seed,
        checkpointEvery=get('pretrain', 'checkpoint_every', 0),
        validateEvery=get('pretrain', 'validate_every', 1))
    #Profiles record the batch size of their recipe, only an explicit one is checked
    batchSize = get('pretrain', 'batch_size')
    if 'batch_size' in sections.get('pretrain', {}) and batchSize != 2 * pretrain.P * pretrain.Q:
        raise ConfigurationError(f'{source}: pre-training batch size {batchSize} is not '
                                 f'2PQ = {2 * pretrain.P * pretrain.Q}')

    classifierHidden = get('classifier', 'hidden', (512, 256, 128))
    classifierDropout = get('classifier', 'dropout', 0.5)
    finetune = FinetuneConfig(
        epochs=get('finetune', 'epochs', 40), batchSize=get('finetune', 'batch_size', 32),
        lr=get('finetune', 'lr', 1e-3), labelsPerClass=get('finetune', 'labels_per_class'),
        labelFraction=get('finetune', 'label_fraction'), nRuns=get('finetune', 'runs', 5),
        seed=seed, hidden=classifierHidden, dropout=classifierDropout,
        fromScratch=get('finetune', 'from_scratch', False))
    checkpoint = get('finetune', 'checkpoint')

    variant = get('run', 'variant', 'complete')
    if variant not in VARIANTS:
        raise ConfigurationError(f'{source}: unknown variant `{variant}`, expected one of {list(VARIANTS)}')

    out = Path(out) if out is not None else base / get('run', 'out', 'runs')
    return RunConfig(
        seed=seed, out=out, profile=profile, variant=variant,
        corpusPath=None if corpusPath is None else base / corpusPath,
        synthetic=synthetic, splitRatios=splitRatios, encoder=encoder, projector=projector,
        classifierHidden=classifierHidden, classifierDropout=classifierDropout,
        pretrain=pretrain, finetune=finetune,
        checkpoint=None if checkpoint is None else base / checkpoint,
        sweepQ=get('sweep', 'q', (1, 2, 3, 4)), sweepP=get('sweep', 'p', (2, 4, 8, 16, 32, 64)))

def load_config(path=None, seed: int | None = None, out=None) -> RunConfig:
    """Read a configuration file, or the bare ``desk`` profile when ``path``
    is ``None``."""
    if path is None:
        return parse_config('', '<desk profile>', seed=seed, out=out)
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ContractError(f'Configuration file {path} does not exist') from None
    log.debug('Read configuration %s', path)
    return parse_config(text, str(path), path.parent, seed, out)
