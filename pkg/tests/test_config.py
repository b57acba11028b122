# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

from pathlib import Path

import pytest

from group_contrast import ConfigurationError, ContractError
from group_contrast.config import PROFILES, load_config, parse_config


def test_desk_profile_is_the_default():
    config = parse_config(seed=1)

    assert config.profile == 'desk'
    assert config.seed == 1
    assert config.variant == 'complete'
    assert (config.synthetic.nClips, config.synthetic.nSubjects) == (32, 8)
    assert (config.synthetic.channels, config.synthetic.samples) == (4, 32)
    assert config.encoder.outputDim == 32
    assert config.projector.hidden == (64, 64, 64)
    assert config.classifierHidden == (32, 16)
    assert (config.pretrain.epochs, config.pretrain.P, config.pretrain.Q) == (300, 4, 2)
    assert (config.finetune.epochs, config.finetune.batchSize) == (40, 32)
    assert config.corpusPath is None
    assert config.out == Path('runs')

def test_deap_like_profile():
    config = parse_config('run: {profile: deap-like, seed: 5}\n')

    assert config.encoder.convLayers == 17
    assert config.encoder.outputDim == 512
    assert config.projector.hidden == (1024, 2048, 4096)
    assert config.classifierHidden == (512, 256, 128)
    assert (config.pretrain.epochs, config.pretrain.lr, config.pretrain.temperature) == (2800, 1e-4, 0.1)
    assert (config.pretrain.P, config.pretrain.Q) == (8, 2)
    assert (config.finetune.epochs, config.finetune.batchSize, config.finetune.lr) == (60, 2048, 1e-3)
    assert (config.synthetic.nSubjects, config.synthetic.channels, config.synthetic.samples) == (32, 32, 128)

def test_seed_like_profile():
    config = parse_config('run:\n  profile: seed-like\n', seed=0)

    assert config.synthetic.nClasses == 3
    assert (config.pretrain.epochs, config.pretrain.P, config.pretrain.Q) == (3288, 16, 2)
    assert (config.finetune.epochs, config.finetune.batchSize) == (70, 256)

def test_profile_batch_sizes_are_2pq():
    for name, profile in PROFILES.items():
        pretrain = profile['pretrain']
        if 'batch_size' in pretrain:
            assert pretrain['batch_size'] == 2 * pretrain['p'] * pretrain['q'], name

def test_file_overrides_the_profile():
    config = parse_config('run: {seed: 2, variant: non-group}\n'
                          'pretrain: {epochs: 5, consistent: no, augmenter: mixup, lr: 5e-4}\n'
                          'finetune: {labels_per_class: 3, from_scratch: yes}\n'
                          'projector: {pooling: avg}\n'
                          'corpus: {band_high: null}\n'
                          'sweep: {q: [1, 2], p: 4}\n')

    assert config.variant == 'non-group'
    assert config.pretrain.epochs == 5
    assert config.pretrain.consistent is False
    assert config.pretrain.augmenter == 'mixup'
    assert config.pretrain.lr == 5e-4
    assert config.pretrain.P == 4
    assert config.finetune.labelsPerClass == 3
    assert config.finetune.fromScratch is True
    assert config.projector.pooling == 'avg'
    assert config.synthetic.bandHigh is None
    assert config.sweepQ == (1, 2)
    assert config.sweepP == (4,)

def test_seed_flows_everywhere():
    config = parse_config('run: {seed: 2}\n', seed=7)

    assert config.seed == 7
    assert config.synthetic.seed == 7
    assert config.pretrain.seed == 7
    assert config.finetune.seed == 7

def test_empty_sections_are_allowed():
    assert parse_config('run:\npretrain:\n', seed=0).pretrain.epochs == 300

def test_missing_seed():
    with pytest.raises(ConfigurationError) as error: parse_config('pretrain: {epochs: 3}\n')
    assert 'seed' in str(error.value)

@pytest.mark.parametrize("text", [
        'training: {epochs: 3}\n',
        'pretrain: {epoch: 3}\n',
        'pretrain: {epochs: three}\n',
        'pretrain: {epochs: 2.5}\n',
        'pretrain: {consistent: maybe}\n',
        'pretrain: [epochs, 3]\n',
        'run: {profile: laptop}\n',
        'run: {variant: everything}\n',
        'encoder: {preset: huge}\n',
        'projector: {hidden: [8, 8]}\n',
        'corpus: {split: [0.5, 0.5]}\n',
        'corpus: {clips: true}\n',
        'pretrain: {q: 0}\n',
        'epochs = 3\n',
        'run: {seed: [\n',
        ])
def test_invalid_files(text):
    with pytest.raises(ConfigurationError): parse_config(text, seed=0)

def test_negative_seed():
    with pytest.raises(ConfigurationError): parse_config('run: {seed: -4}\n')

def test_explicit_batch_size_must_be_2pq():
    assert parse_config('pretrain: {batch_size: 16}\n', seed=0).pretrain.P == 4

    with pytest.raises(ConfigurationError): parse_config('pretrain: {batch_size: 20}\n', seed=0)

def test_profile_batch_size_is_not_checked_after_overrides():
    config = parse_config('run: {profile: deap-like}\npretrain: {p: 4}\n', seed=0)

    assert config.pretrain.P == 4

def test_load_config_resolves_relative_paths(tmp_path):
    path = tmp_path / 'run.yaml'
    path.write_text('run:\n  seed: 3\n  out: results\n'
                    'corpus:\n  path: data/corpus.sgmc\n'
                    'finetune:\n  checkpoint: results/pretrain/checkpoint-00010.ckpt\n')

    config = load_config(path)

    assert config.out == tmp_path / 'results'
    assert config.corpusPath == tmp_path / 'data' / 'corpus.sgmc'
    assert config.checkpoint == tmp_path / 'results' / 'pretrain' / 'checkpoint-00010.ckpt'
    assert load_config(path, out=tmp_path / 'elsewhere').out == tmp_path / 'elsewhere'

def test_load_config_without_a_file():
    assert load_config(seed=4).profile == 'desk'

def test_missing_file(tmp_path):
    with pytest.raises(ContractError): load_config(tmp_path / 'absent.yaml')

def test_synthetic_corpus_is_split():
    config = parse_config('corpus: {clips: 20, subjects: 4}\n', seed=0)
    corpus = config.synthetic_corpus()

    assert corpus.nClips == 20
    assert corpus.splitOfClip.count('test') == 3
    assert corpus.splitOfClip == config.load_corpus().splitOfClip

def test_new_bundle_fits_the_corpus():
    config = parse_config('corpus: {clips: 8, subjects: 4, channels: 3, samples: 16}\n', seed=0)
    corpus = config.load_corpus()

    bundle = config.new_bundle(corpus)

    assert bundle.inputShape == (3, 16)
    assert bundle.projectorConfig == config.projector
    assert config.new_bundle(corpus, projector=False).projectorConfig is None
