# SPDX-FileCopyrightText: 2024-present ChaosInventor <chaosinventor@yandex.com>
#
# SPDX-License-Identifier: MIT

"""The ``group-contrast`` command.

Exit codes: 0 on success, 1 when a gradient check fails, 2 for configuration,
contract, format and file errors, 3 when training diverges.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from group_contrast import ContractError, GroupContrastError
from group_contrast.__about__ import __version__
from group_contrast.config import RunConfig, load_config
from group_contrast.corpus import write_corpus
from group_contrast.network import ClassifierConfig, build_model, load_model, save_model
from group_contrast.numerics import gradient_suite
from group_contrast.objective import (
    VARIANTS,
    DivergenceError,
    check_end_to_end,
    evaluate,
    finetune,
    format_table,
    pretrain,
    run_ablation,
    select_checkpoint,
    sweep_pq,
    variant_config,
    write_confusion,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2
EXIT_DIVERGED = 3

#--checkpoint value asking for checkpoint selection
BEST = 'best'


def _config(args) -> RunConfig:
    config = load_config(args.config, seed=args.seed, out=args.out)
    changes = {}
    finetuneChanges = {}
    if getattr(args, 'variant', None) is not None:
        changes['variant'] = args.variant
    if getattr(args, 'labels_per_class', None) is not None:
        finetuneChanges['labelsPerClass'] = args.labels_per_class
        finetuneChanges['labelFraction'] = None
    if getattr(args, 'from_scratch', False):
        finetuneChanges['fromScratch'] = True
    if getattr(args, 'checkpoint', None) not in (None, BEST):
        changes['checkpoint'] = Path(args.checkpoint)
    if finetuneChanges:
        changes['finetune'] = dataclasses.replace(config.finetune, **finetuneChanges)
    return config.replace(**changes) if changes else config

def cmd_gen_data(args) -> int:
    config = _config(args)
    corpus = config.synthetic_corpus()
    path = config.corpusPath or config.out / 'corpus.sgmc'
    path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, path)
    print(f'Wrote {path}: {corpus.nClips} clips, {corpus.nSubjects} subjects, '
          f'{corpus.channels}x{corpus.samples} windows, {corpus.nClasses} classes')
    return EXIT_OK

def cmd_pretrain(args) -> int:
    config = _config(args)
    corpus = config.load_corpus()
    pretrainConfig = variant_config(config.pretrain, config.variant)
    outDir = config.out / 'pretrain'
    _, runLog = pretrain(corpus, pretrainConfig, config.new_bundle(corpus), outDir, args.resume)
    print(f'Pre-trained {runLog.epochs} epochs ({config.variant}): acc_pre {runLog.finalAccPre:.4f}, '
          f'val acc_pre {runLog.valAccPre[-1]:.4f}, stimulus acc_pre {runLog.stimulusAccPre:.4f}')
    return EXIT_OK

def _best_checkpoint(config: RunConfig, corpus, bundle) -> Path:
    directory = config.out / 'pretrain'
    paths = sorted(directory.glob('checkpoint-*.ckpt'))
    if (directory / 'pretrained.ckpt').exists():
        paths.append(directory / 'pretrained.ckpt')
    if not paths:
        raise ContractError(f'No pre-training checkpoints in {directory}')
    best, scores = select_checkpoint(paths, bundle, corpus, config.finetune)
    for path, score in scores.items():
        print(f'{path.name}: validation accuracy {score:.4f}')
    print(f'Selected {best.name}')
    return best

def cmd_finetune(args) -> int:
    config = _config(args)
    corpus = config.load_corpus()
    if corpus.clipLabels is None:
        raise ContractError('Fine-tuning needs a labelled corpus')

    bundle = config.new_bundle(corpus)
    if not config.finetune.fromScratch:
        checkpoint = config.checkpoint or config.out / 'pretrain' / 'pretrained.ckpt'
        if args.checkpoint == BEST:
            checkpoint = _best_checkpoint(config, corpus, bundle)
        bundle, _ = load_model(checkpoint, bundle)
        log.info('Fine-tuning from %s', checkpoint)
    result = finetune(bundle, corpus, config.finetune)

    outDir = config.out / ('scratch' if config.finetune.fromScratch else 'finetune')
    result.write(outDir)
    save_model(outDir / 'finetuned.ckpt', result.model)
    print(f'Test accuracy over {len(result.accuracies)} runs: {result.meanAccuracy:.4f} '
          f'+- {result.sdAccuracy:.4f}')
    return EXIT_OK

def cmd_eval(args) -> int:
    config = _config(args)
    corpus = config.load_corpus()
    if corpus.clipLabels is None:
        raise ContractError('Evaluation needs a labelled corpus')
    classifier = ClassifierConfig(config.classifierHidden, max(2, corpus.nClasses),
                                  config.classifierDropout)
    bundle = build_model(config.encoder, None, classifier, (corpus.channels, corpus.samples),
                         config.seed)
    if args.checkpoint == BEST:
        raise ContractError(f'`--checkpoint {BEST}` applies to finetune only')
    trained = 'scratch' if config.finetune.fromScratch else 'finetune'
    checkpoint = config.checkpoint or config.out / trained / 'finetuned.ckpt'
    bundle, _ = load_model(checkpoint, bundle)

    evaluation = evaluate(bundle, corpus, args.split)
    outDir = config.out / 'eval'
    outDir.mkdir(parents=True, exist_ok=True)
    write_confusion(outDir / 'confusion.txt', evaluation.confusion)
    print(f'Accuracy on {args.split}: {evaluation.accuracy:.4f} '
          f'({int(evaluation.confusion.trace())}/{evaluation.total})')
    for row in evaluation.confusion:
        print(' '.join(f'{int(v):>6}' for v in row))
    return EXIT_OK

def cmd_ablate(args) -> int:
    config = _config(args)
    corpus = config.load_corpus()
    variants = [args.variant] if args.variant is not None else list(VARIANTS)
    outDir = config.out / 'ablation'
    rows = run_ablation(corpus, config.pretrain, config.finetune, config.new_bundle(corpus),
                        variants, outDir)
    table = format_table(rows)
    outDir.mkdir(parents=True, exist_ok=True)
    (outDir / 'table.txt').write_text(table + '\n')
    print(table)
    return EXIT_OK

def cmd_sweep(args) -> int:
    config = _config(args)
    corpus = config.load_corpus()
    outDir = config.out / 'sweep'
    rows = sweep_pq(corpus, config.sweepQ, config.sweepP, config.pretrain, config.finetune,
                    config.new_bundle(corpus), outDir)
    table = format_table(rows)
    outDir.mkdir(parents=True, exist_ok=True)
    (outDir / 'table.txt').write_text(table + '\n')
    print(table)
    return EXIT_OK

def cmd_gradcheck(args) -> int:
    reports = gradient_suite(args.seeds)
    reports.append(check_end_to_end(args.seed or 0))

    byKind = {}
    for report in reports:
        byKind.setdefault(report.case.split(' ')[0], []).append(report)
    #Worst report per primitive: failures first, then the largest relative error
    worst = {kind: max(group, key=lambda r: (not r.passed, r.maxRelError)) for kind, group in byKind.items()}
    for report in worst.values():
        print(report)

    failed = sorted({report.case for report in reports if not report.passed})
    if failed:
        print(f'Gradient check failed for: {", ".join(failed)}')
        return EXIT_CHECK_FAILED
    print(f'All {len(reports)} gradient checks passed')
    return EXIT_OK

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='group-contrast',
                                     description='Group-level contrastive pre-training.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='log INFO records, twice for DEBUG')
    commands = parser.add_subparsers(dest='command', required=True)

    def command(name, handler, help):
        sub = commands.add_parser(name, help=help)
        sub.add_argument('--config', type=Path, default=None, help='YAML run configuration')
        sub.add_argument('--seed', type=int, default=None, help='overrides the configured seed')
        sub.add_argument('--out', type=Path, default=None, help='output directory')
        sub.set_defaults(handler=handler)
        return sub

    command('gen-data', cmd_gen_data, 'write the configured corpus')
    sub = command('pretrain', cmd_pretrain, 'contrastive pre-training')
    sub.add_argument('--variant', choices=list(VARIANTS), default=None)
    sub.add_argument('--resume', type=Path, default=None, help='checkpoint to continue from')
    for name, handler, help in (('finetune', cmd_finetune, 'fine-tune encoder and classifier'),
                                ('eval', cmd_eval, 'evaluate a fine-tuned model')):
        sub = command(name, handler, help)
        sub.add_argument('--checkpoint', default=None,
                         help=f'checkpoint file; for finetune, `{BEST}` picks the pre-training '
                              'checkpoint with the best validation accuracy')
        sub.add_argument('--labels-per-class', type=int, default=None)
        sub.add_argument('--from-scratch', action='store_true')
        if name == 'eval':
            sub.add_argument('--split', choices=('train', 'val', 'test'), default='test')
    sub = command('ablate', cmd_ablate, 'run the ablation variants')
    sub.add_argument('--variant', choices=list(VARIANTS), default=None,
                     help='run a single variant instead of all')
    command('sweep', cmd_sweep, 'sweep the group count P and group size Q')
    sub = command('gradcheck', cmd_gradcheck, 'check every backward rule')
    sub.add_argument('--seeds', type=int, default=100)
    return parser

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    try:
        return args.handler(args)
    except DivergenceError as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_DIVERGED
    except (GroupContrastError, OSError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_ERROR
