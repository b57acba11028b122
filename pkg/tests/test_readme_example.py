# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

import pytest

pytestmark = pytest.mark.parametrize("seed", [0, 1])

def test_example(seed):
    from group_contrast.corpus import SyntheticSpec, generate_synthetic_corpus, split_by_clip
    from group_contrast.network import ENCODER_PRESETS, TINY_PROJECTOR, build_model
    from group_contrast.objective import FinetuneConfig, PretrainConfig, finetune, pretrain

    #A small stimulus-aligned corpus: 32 clips watched by 8 subjects.
    corpus = split_by_clip(generate_synthetic_corpus(SyntheticSpec(seed=seed)), seed=seed)

    #Encoder and group projector, sized for the windows of the corpus.
    bundle = build_model(ENCODER_PRESETS['tiny'], TINY_PROJECTOR,
                         inputShape=(corpus.channels, corpus.samples), seed=seed)

    #Groups of 2Q=4 subjects for P=4 clips per iteration.
    encoder, runLog = pretrain(corpus, PretrainConfig(epochs=5, P=4, Q=2), bundle)
    print(f'Final loss {runLog.epochLosses[-1]:.4f}, acc_pre {runLog.epochAccPre[-1]:.4f}')

    #Fine-tune with 4 labelled windows per class, 3 runs.
    config = FinetuneConfig(epochs=5, labelsPerClass=4, nRuns=3, hidden=(32, 16))
    result = finetune(encoder, corpus, config)
    print(f'Test accuracy {result.meanAccuracy:.4f} +- {result.sdAccuracy:.4f}')
