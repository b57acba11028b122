# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

import dataclasses

import numpy as np
import pytest

from group_contrast import ConfigurationError, ContractError, stream
from group_contrast.grouping import epoch_batches, meiosis_batch, new_epoch
from group_contrast.network import (
    ENCODER_PRESETS,
    ClassifierConfig,
    ProjectorConfig,
    attach_classifier,
    build_model,
)
from group_contrast.nodes import DegenerateRepresentationError
from group_contrast.numerics import AdamState, adam_step
from group_contrast.objective import (
    VARIANTS,
    DivergenceError,
    FinetuneConfig,
    LossConfig,
    PretrainConfig,
    RunLog,
    check_end_to_end,
    checkpoint_name,
    confusion_matrix,
    contrastive_step,
    cosine_similarity,
    evaluate,
    finetune,
    format_table,
    group_ntxent_loss,
    label_budget,
    pretrain,
    pretrain_accuracy,
    retrieval_accuracy,
    run_ablation,
    select_checkpoint,
    stimulus_accuracy,
    sweep_pq,
    validation_accuracy,
    variant_config,
)
from tests import desk_corpus, expected_chance, small_corpus, tiny_bundle


@pytest.fixture
def corpus():
    yield small_corpus(nClips=16)

@pytest.fixture
def quiet_bundle(corpus):
    #No projector dropout, so that a fixed batch gives a fixed loss
    yield build_model(ENCODER_PRESETS['tiny'], ProjectorConfig((16, 16, 16), 'max', 0.0),
                      inputShape=(corpus.channels, corpus.samples), seed=1)

@pytest.fixture(scope='module')
def desk_runs():
    #Pre-training runs on the desk corpus, shared by the slow tests
    corpus = desk_corpus()
    runs = {}
    def run(seed, variant='complete', epochs=300):
        key = (seed, variant, epochs)
        if key not in runs:
            config = variant_config(PretrainConfig(epochs=epochs, P=4, Q=2, lr=1e-3, seed=seed), variant)
            runs[key] = pretrain(corpus, config, tiny_bundle(corpus, seed=seed, hidden=(64, 64, 64)))
        return runs[key]
    yield corpus, run

def test_single_pair_has_zero_loss():
    rng = stream(0, 'test')

    loss = group_ntxent_loss(rng.standard_normal((1, 8)), rng.standard_normal((1, 8)))

    assert loss == pytest.approx(0.0, abs=1e-12)

def test_loss_of_orthonormal_pairs():
    z = np.eye(4)[:2]

    #-log(e / (e + 2))
    assert group_ntxent_loss(z, z, LossConfig(temperature=1.0)) == pytest.approx(0.551445, abs=1e-6)

def test_loss_symmetries():
    rng = stream(1, 'test')
    zA, zB = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
    loss = group_ntxent_loss(zA, zB)

    assert group_ntxent_loss(zB, zA) == pytest.approx(loss, rel=1e-12)
    assert group_ntxent_loss(3 * zA, 0.5 * zB) == pytest.approx(loss, rel=1e-9)
    order = rng.permutation(5)
    assert group_ntxent_loss(zA[order], zB[order]) == pytest.approx(loss, rel=1e-12)

def test_loss_rewards_agreement():
    rng = stream(2, 'test')
    zA = rng.standard_normal((6, 16))

    close = group_ntxent_loss(zA, zA + 0.01 * rng.standard_normal((6, 16)))
    far = group_ntxent_loss(zA, rng.standard_normal((6, 16)))

    assert close < far

def test_loss_contract():
    with pytest.raises(ContractError): group_ntxent_loss(np.zeros((2, 4)), np.ones((3, 4)))
    with pytest.raises(ContractError): group_ntxent_loss(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(DegenerateRepresentationError): group_ntxent_loss(np.zeros((2, 4)), np.ones((2, 4)))
    with pytest.raises(ConfigurationError): LossConfig(temperature=0)

def test_cosine_similarity():
    assert cosine_similarity([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 5.0]) == pytest.approx(0.0)
    assert cosine_similarity([1.0, 1.0], [-1.0, -1.0]) == pytest.approx(-1.0)
    with pytest.raises(ContractError): cosine_similarity([1.0], [1.0, 2.0])

@pytest.mark.slow
def test_retrieval_accuracy_at_chance():
    rng = stream(3, 'test')
    scores = [pretrain_accuracy(rng.standard_normal((8, 32)), rng.standard_normal((8, 32)))
              for _ in range(10_000)]

    assert np.mean(scores) == pytest.approx(1 / 15, abs=0.01)

def test_retrieval_accuracy_extremes():
    rng = stream(4, 'test')
    zA = rng.standard_normal((6, 32))

    assert pretrain_accuracy(zA, zA + 1e-3 * rng.standard_normal((6, 32))) == 1.0
    #Ties count as misses
    assert pretrain_accuracy(np.ones((6, 4)), np.ones((6, 4))) == 0.0

def test_retrieval_accuracy_needs_two_groups():
    with pytest.raises(ContractError): pretrain_accuracy(np.ones((1, 4)), np.ones((1, 4)))

@pytest.mark.parametrize("changes", [
        {'epochs': 0}, {'lr': 0.0}, {'P': 0}, {'temperature': -1.0}, {'augmenter': 'cutout'},
        {'checkpointEvery': -1},
        ])
def test_invalid_pretrain_configs(changes):
    with pytest.raises(ConfigurationError): PretrainConfig(**changes)

@pytest.mark.parametrize("changes", [
        {'batchSize': 1}, {'nRuns': 0}, {'labelsPerClass': 2, 'labelFraction': 0.5},
        {'labelsPerClass': 0}, {'labelFraction': 1.5},
        ])
def test_invalid_finetune_configs(changes):
    with pytest.raises(ConfigurationError): FinetuneConfig(**changes)

def test_contrastive_steps_reduce_the_loss(corpus, quiet_bundle):
    rng = stream(5, 'test')
    config = PretrainConfig(P=4, Q=2)
    batch = next(epoch_batches(corpus, config.sampler, new_epoch(corpus.clips('train'), rng), rng))
    augmented = meiosis_batch(batch, rng)
    bundle = quiet_bundle.copy()
    state = AdamState(lr=3e-3)

    losses = []
    for _ in range(20):
        loss, accuracy, grads = contrastive_step(bundle, augmented, config.loss, rng)
        losses.append(loss)
        params, state = adam_step({name: bundle.params[name] for name in grads}, grads, state)
        bundle.params.update(params)

    assert set(grads) == {name for name in bundle.params if not name.startswith('classifier.')}
    assert 0.0 <= accuracy <= 1.0
    assert losses[-1] < losses[0]

def test_pretrain_records_every_iteration(corpus):
    config = PretrainConfig(epochs=2, P=4, Q=2)

    encoder, runLog = pretrain(corpus, config, tiny_bundle(corpus))

    #12 training clips in batches of 4
    assert runLog.iterations == 6
    assert runLog.iterationEpochs == [0, 0, 0, 1, 1, 1]
    assert runLog.epochs == 2
    assert all(np.isfinite(runLog.losses))
    assert all(0.0 <= v <= 1.0 for v in runLog.valAccPre)
    assert encoder.projectorConfig is None
    assert not encoder.part('projector')

def test_pretrain_is_reproducible(corpus):
    config = PretrainConfig(epochs=1, P=4, Q=2, seed=3)

    first, firstLog = pretrain(corpus, config, tiny_bundle(corpus))
    second, secondLog = pretrain(corpus, config, tiny_bundle(corpus))

    assert firstLog.losses == secondLog.losses
    for name, value in first.params.items():
        assert np.array_equal(second.params[name], value)

def test_pretrain_leaves_its_input_alone(corpus):
    bundle = tiny_bundle(corpus)
    before = {name: value.copy() for name, value in bundle.params.items()}

    pretrain(corpus, PretrainConfig(epochs=1, P=4, Q=2), bundle)

    for name, value in before.items():
        assert np.array_equal(bundle.params[name], value)

def test_pretrain_needs_a_projector(corpus):
    with pytest.raises(ContractError):
        pretrain(corpus, PretrainConfig(epochs=1), tiny_bundle(corpus).without('projector'))

def test_pretrain_needs_enough_subjects(corpus):
    with pytest.raises(ConfigurationError):
        pretrain(corpus, PretrainConfig(epochs=1, Q=3), tiny_bundle(corpus))

def test_divergence_is_reported(corpus):
    bundle = tiny_bundle(corpus)
    bundle.params['encoder.head.weight'] = np.full_like(bundle.params['encoder.head.weight'], np.nan)

    with pytest.raises(DivergenceError) as error:
        pretrain(corpus, PretrainConfig(epochs=1, P=4, Q=2), bundle)
    assert error.value.iteration == 0
    assert np.isnan(error.value.loss)

def test_validation_accuracy_is_stable(corpus):
    bundle = tiny_bundle(corpus)
    config = PretrainConfig(P=4, Q=2)

    first = validation_accuracy(bundle, corpus, config)

    assert first == validation_accuracy(bundle, corpus, config)
    assert 0.0 <= first <= 1.0
    assert np.isnan(validation_accuracy(bundle, small_corpus(nClips=8), config))

def test_stimulus_accuracy_scores_consistent_groups(corpus):
    bundle = tiny_bundle(corpus)
    shuffled = PretrainConfig(P=4, Q=2, consistent=False)
    sampler = dataclasses.replace(shuffled.sampler, consistent=True, augmenter='none')

    first = stimulus_accuracy(bundle, corpus, shuffled)

    assert first == stimulus_accuracy(bundle, corpus, PretrainConfig(P=4, Q=2))
    assert first == retrieval_accuracy(bundle, corpus, sampler, corpus.clips('val'), 0, name='stimulus')
    assert 0.0 <= first <= 1.0
    assert np.isnan(stimulus_accuracy(bundle, small_corpus(nClips=8), shuffled))

def test_retrieval_accuracy_passes(corpus):
    bundle = tiny_bundle(corpus)
    sampler = PretrainConfig(P=4, Q=2).sampler
    clips = corpus.clips('train')

    once = retrieval_accuracy(bundle, corpus, sampler, clips, 0, passes=1, name='final')
    twice = retrieval_accuracy(bundle, corpus, sampler, clips, 0, passes=2, name='final')

    assert 0.0 <= once <= 1.0
    assert 0.0 <= twice <= 1.0
    assert np.isnan(retrieval_accuracy(bundle, corpus, sampler, clips[:1], 0))

def test_pretrain_reports_final_accuracies(corpus):
    _, runLog = pretrain(corpus, PretrainConfig(epochs=1, P=4, Q=2), tiny_bundle(corpus))

    assert 0.0 <= runLog.finalAccPre <= 1.0
    assert 0.0 <= runLog.stimulusAccPre <= 1.0

def test_select_checkpoint(corpus, tmp_path):
    pretrain(corpus, PretrainConfig(epochs=2, P=4, Q=2, checkpointEvery=1), tiny_bundle(corpus), tmp_path)
    paths = [tmp_path / checkpoint_name(1), tmp_path / 'pretrained.ckpt']
    config = FinetuneConfig(epochs=1, batchSize=8, nRuns=1, hidden=(8,))

    best, scores = select_checkpoint(paths, tiny_bundle(corpus), corpus, config)

    assert set(scores) == set(paths)
    assert best in paths
    assert scores[best] == max(scores.values())
    assert all(0.0 <= score <= 1.0 for score in scores.values())
    with pytest.raises(ContractError): select_checkpoint([], tiny_bundle(corpus), corpus, config)
    unsplit = corpus.replace(splitOfClip=None)
    with pytest.raises(ContractError): select_checkpoint(paths, tiny_bundle(corpus), unsplit, config)

def test_pretrain_writes_its_outputs(corpus, tmp_path):
    config = PretrainConfig(epochs=2, P=4, Q=2, checkpointEvery=1)

    _, runLog = pretrain(corpus, config, tiny_bundle(corpus), tmp_path)

    assert (tmp_path / 'pretrained.ckpt').exists()
    assert (tmp_path / checkpoint_name(1)).exists()
    assert (tmp_path / 'checkpoint-00002.ckpt').exists()
    lines = (tmp_path / 'runlog.txt').read_text().splitlines()
    assert [line.split()[0] for line in lines] == ['iteration'] * 3 + ['epoch'] + ['iteration'] * 3 + ['epoch']
    assert 'iterations = 6' in (tmp_path / 'summary.txt').read_text()
    for mine, theirs in zip(RunLog.read(tmp_path).records(), runLog.records()):
        np.testing.assert_array_equal(mine, theirs)

def test_run_log_rejects_garbage(tmp_path):
    (tmp_path / 'runlog.txt').write_text('iteration 0 epoch 0 loss 1.0 acc_pre 0.5\nhello\n')

    with pytest.raises(ContractError): RunLog.read(tmp_path)

def test_run_log_survives_a_checkpoint():
    runLog = RunLog()
    runLog.record_iteration(0, 2.5, 0.25)
    runLog.record_iteration(0, 1.5, float('nan'))
    runLog.record_epoch(0, 0.5)

    restored = RunLog.from_tensors(runLog.tensors())

    assert restored.epochLosses == [2.0]
    assert restored.epochAccPre == [0.25]
    assert restored.losses == runLog.losses
    assert restored.valAccPre == [0.5]

def test_confusion_matrix():
    confusion = confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)

    assert confusion.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]

def test_evaluate_counts_every_test_window(corpus):
    bundle = tiny_bundle(corpus).without('projector')
    attach_classifier(bundle, ClassifierConfig((8,), 2), seed=0)

    evaluation = evaluate(bundle, corpus)

    assert evaluation.total == len(corpus.clips('test')) * corpus.nSubjects
    assert evaluation.accuracy == pytest.approx(np.trace(evaluation.confusion) / evaluation.total)
    with pytest.raises(ContractError): evaluate(tiny_bundle(corpus), corpus)
    with pytest.raises(ContractError): evaluate(bundle, corpus.replace(clipLabels=None))

def test_label_budget_per_class():
    labels = np.array([0, 0, 0, 1, 1, 1, 1])
    kept = label_budget(labels, 2, stream(0, 'test'), labelsPerClass=2)

    assert len(kept) == 4
    assert list(np.bincount(labels[kept])) == [2, 2]
    assert list(kept) == sorted(kept)

def test_label_budget_fraction():
    labels = np.array([0] * 10 + [1] * 3)
    kept = label_budget(labels, 2, stream(0, 'test'), labelFraction=0.1)

    assert list(np.bincount(labels[kept])) == [1, 1]
    assert len(label_budget(labels, 2, stream(0, 'test'))) == 13

def test_label_budget_contract():
    labels = np.array([0, 0, 0])

    with pytest.raises(ContractError): label_budget(labels, 2, stream(0, 'test'))
    with pytest.raises(ContractError): label_budget(np.array([0, 1]), 2, stream(0, 'test'), labelsPerClass=2)

def test_finetune_runs(corpus, tmp_path):
    config = FinetuneConfig(epochs=2, batchSize=8, nRuns=2, hidden=(8,), dropout=0.0)

    result = finetune(tiny_bundle(corpus).without('projector'), corpus, config)

    assert len(result.accuracies) == 2
    assert all(0.0 <= acc <= 1.0 for acc in result.accuracies)
    assert result.bestRun == int(np.argmax(result.accuracies))
    assert len(result.log.finetuneTrajectory) == 2
    assert result.confusion.sum() == len(corpus.clips('test')) * corpus.nSubjects
    assert result.model.classifierConfig.nClasses == 2

    result.write(tmp_path)
    metrics = (tmp_path / 'metrics.txt').read_text()
    assert 'mean_accuracy' in metrics
    assert 'sd_accuracy' in metrics
    assert (tmp_path / 'confusion.txt').read_text().count('\n') == 2

def test_finetune_with_a_label_budget(corpus):
    config = FinetuneConfig(epochs=1, batchSize=4, nRuns=1, hidden=(8,), labelsPerClass=2)

    result = finetune(tiny_bundle(corpus), corpus, config)

    assert len(result.accuracies) == 1
    assert result.sdAccuracy == 0.0

def test_finetune_from_scratch_replaces_the_encoder(corpus):
    bundle = tiny_bundle(corpus)
    config = FinetuneConfig(epochs=1, batchSize=8, nRuns=1, hidden=(8,), fromScratch=True, lr=1e-12)

    result = finetune(bundle, corpus, config)

    assert not np.allclose(result.model.params['encoder.stem.conv.weight'],
                           bundle.params['encoder.stem.conv.weight'])

def test_finetune_needs_labels(corpus):
    with pytest.raises(ContractError):
        finetune(tiny_bundle(corpus), corpus.replace(clipLabels=None), FinetuneConfig())

def test_variants():
    config = PretrainConfig(P=8, Q=2)

    assert variant_config(config, 'complete') == config
    assert variant_config(config, 'non-group').Q == 1
    assert variant_config(config, 'non-augment').augmenter == 'none'
    assert variant_config(config, 'mixup-augment').augmenter == 'mixup'
    assert variant_config(config, 'non-consistent').consistent is False
    only = variant_config(config, 'consistent-only')
    assert (only.Q, only.augmenter, only.consistent) == (1, 'none', True)
    with pytest.raises(ConfigurationError): variant_config(config, 'everything')

def test_sweep_marks_infeasible_cells(corpus):
    rows = sweep_pq(corpus, [3], [2, 4], PretrainConfig(epochs=1), FinetuneConfig(), tiny_bundle(corpus))

    assert [(row.P, row.Q) for row in rows] == [(2, 3), (4, 3)]
    assert all(row.note.startswith('infeasible') for row in rows)
    assert all(np.isnan(row.meanAccuracy) for row in rows)
    table = format_table(rows)
    assert table.split('\n')[0].split()[:6] == ['name', 'P', 'Q', 'acc_pre', 'val_acc_pre', 'stim_acc_pre']
    assert table.splitlines()[1].startswith('Q=3 P=2')
    assert 'infeasible' in table

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_end_to_end_gradient(seed):
    report = check_end_to_end(seed)

    assert report.passed, str(report)
    assert report.case.startswith('end-to-end')

@pytest.mark.slow
def test_resumed_run_matches_uninterrupted_run(corpus, tmp_path):
    config = PretrainConfig(epochs=4, P=4, Q=2, checkpointEvery=2, seed=9)

    full, fullLog = pretrain(corpus, config, tiny_bundle(corpus), tmp_path / 'full')
    resumed, resumedLog = pretrain(corpus, config, tiny_bundle(corpus), tmp_path / 'resumed',
                                   resume=tmp_path / 'full' / checkpoint_name(2))

    for name, value in full.params.items():
        assert np.array_equal(resumed.params[name], value)
    for mine, theirs in zip(fullLog.records(), resumedLog.records()):
        np.testing.assert_array_equal(mine, theirs)
    assert ((tmp_path / 'full' / 'pretrained.ckpt').read_bytes()[:48]
            == (tmp_path / 'resumed' / 'pretrained.ckpt').read_bytes()[:48])

@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_desk_pretraining_reaches_retrieval_target(desk_runs, seed):
    _, run = desk_runs

    _, runLog = run(seed)

    assert runLog.epochs == 300
    assert np.mean(runLog.epochLosses[-10:]) < np.mean(runLog.epochLosses[:10])
    assert runLog.finalAccPre >= 0.9

@pytest.mark.slow
def test_only_consistent_groups_teach_stimuli(desk_runs):
    corpus, run = desk_runs
    chance = expected_chance(len(corpus.clips('train')), 4)

    _, complete = run(0)
    _, shuffled = run(0, 'non-consistent', 30)

    assert complete.finalAccPre > 3 * chance
    assert np.isfinite(complete.stimulusAccPre)
    #Every candidate of a shuffled batch is exchangeable with the positive
    assert np.nanmean(shuffled.accPre) == pytest.approx(chance, abs=0.05)

@pytest.mark.slow
def test_pretraining_beats_training_from_scratch(desk_runs):
    corpus, run = desk_runs

    gaps = []
    for seed in range(5):
        encoder, _ = run(seed)
        config = FinetuneConfig(epochs=40, batchSize=32, labelsPerClass=5, nRuns=5, hidden=(32, 16), seed=seed)
        pretrained = finetune(encoder, corpus, config)
        scratch = finetune(encoder, corpus, dataclasses.replace(config, fromScratch=True))
        gaps.append(pretrained.meanAccuracy - scratch.meanAccuracy)

    assert np.mean(gaps) >= 0.05

@pytest.mark.slow
def test_ablation_covers_every_variant(corpus, tmp_path):
    pretrainConfig = PretrainConfig(epochs=1, P=4, Q=2)
    finetuneConfig = FinetuneConfig(epochs=1, batchSize=8, nRuns=2, hidden=(8,))

    rows = run_ablation(corpus, pretrainConfig, finetuneConfig, tiny_bundle(corpus), outDir=tmp_path)

    assert [row.name for row in rows] == list(VARIANTS)
    assert [row.Q for row in rows] == [2, 1, 2, 2, 2, 1]
    assert all(np.isfinite(row.meanAccuracy) for row in rows)
    assert all(np.isfinite(row.stimulusAccPre) for row in rows)
    assert (tmp_path / 'non-group' / 'pretrained.ckpt').exists()
    assert (tmp_path / 'complete' / 'finetune' / 'metrics.txt').exists()
    assert len(format_table(rows).splitlines()) == len(VARIANTS) + 1
