"""
condiff command line: train, sample, eval, profile, ablate and gen-data.

    condiff <command> [--config run.cfg] [section.key=value ...]

Exit codes: 0 success, 2 invalid configuration / input files, 3 runtime failure.
Validation problems are printed to stderr as JSON: {"errors": [...]}.
Every command writes its reports, the config snapshot and the run log under run.output_dir.
"""

import argparse
import json
import logging
import logging.config
import os
import sys
from timeit import default_timer as timer

import numpy as np
import torch
from PIL import Image

from condiff.checkpoint import CheckpointError, load_checkpoint, load_into_model, save_checkpoint
from condiff.common_config import library_logging_config
from condiff.config import ConfigError, RunConfig
from condiff.constants import *
from condiff.data import DatasetFormatError, load_dataset, load_splits, save_dataset
from condiff.diffusion import make_schedule
from condiff.evaluation import evaluate, format_table, validation_scores
from condiff.model import build_model
from condiff.profiling import profile
from condiff.sampling import sample
from condiff.training import fit
from condiff.utils import RunLog, file_digest, log, make_generator, resolve_device, seed_everything, set_num_threads

logger = logging.getLogger('condiff')

VALIDATION_ERRORS = (ConfigError, CheckpointError, DatasetFormatError)


def _say(msg):
    '''Result lines on stdout; the ReFrame checks parse these'''
    print(msg, flush=True)


def _fmt_score(value) -> str:
    '''A headline score: one float, or one per class under per-class averaging'''
    if isinstance(value, list):
        return ', '.join(f'{item:.6f}' for item in value)
    return f'{value:.6f}'


def _schedule(config):
    return make_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)


def _prepare_output(config) -> str:
    output_dir = config.run.output_dir
    os.makedirs(output_dir, exist_ok=True)
    config.write(os.path.join(output_dir, 'config.cfg'))
    return output_dir


def _write_json(path: str, payload: dict):
    with open(path, 'w') as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write('\n')


def _load_model(config, checkpoint: str, device):
    model = build_model(config)
    _, tensors = load_checkpoint(checkpoint)
    return load_into_model(model, tensors).to(device).eval()


def _eval_set(config, args):
    if getattr(args, 'data', None) and args.data != DATA_SOURCES[SYNTHETIC]:
        return load_dataset(args.data)
    return load_splits(config)[1]


def export_masks(masks: torch.Tensor, ids, class_names, directory: str):
    """
    One 8-bit grayscale PNG per case, pixel value = class index, plus classes.txt mapping indices to names.
    """
    os.makedirs(directory, exist_ok=True)
    labels = masks.argmax(dim=1).cpu().numpy().astype(np.uint8)
    for ident, label in zip(ids, labels):
        Image.fromarray(label).save(os.path.join(directory, f'{ident}.png'))
    with open(os.path.join(directory, 'classes.txt'), 'w') as handle:
        for index, name in enumerate(class_names):
            handle.write(f'{index} {name}\n')
    log(f'{len(labels)} masks exported to {directory}')


def run_train(config, args=None) -> dict:
    output_dir = _prepare_output(config)
    device = resolve_device(config.run.device)
    train_set, val_set = load_splits(config)
    schedule = _schedule(config)
    run_log = RunLog(os.path.join(output_dir, 'run_log.jsonl'))

    def validate_fn(model, dataset):
        return validation_scores(model, dataset, schedule, config)

    start = timer()
    state, run_log = fit(config, train_set, val_set, output_dir, run_log, validate_fn)
    elapsed = timer() - start

    checkpoint = save_checkpoint(state.model, config, os.path.join(output_dir, 'checkpoint.cdck'))
    summary = {
        'steps': state.step,
        'epochs': config.optim.epochs,
        'final_loss': state.running_loss if state.losses else None,
        'train_seconds': elapsed,
        'checkpoint': checkpoint,
        'checkpoint_sha256': file_digest(checkpoint),
        'device': str(device),
    }
    epoch_records = [record for record in run_log.records if 'val_dice' in record]
    if epoch_records:
        summary['val_dice'] = epoch_records[-1]['val_dice']
        summary['val_miou'] = epoch_records[-1]['val_miou']
    _write_json(os.path.join(output_dir, 'train_report.json'), summary)

    _say(f'Training completed: {state.step} steps in {elapsed:.1f} s')
    if state.losses:
        _say(f'Initial loss: {float(np.mean(state.losses[:10])):.6f}')
        _say(f'Final loss: {state.running_loss:.6f}')
    if 'val_dice' in summary:
        _say(f"Validation Dice: {summary['val_dice']:.6f}")
        _say(f"Validation mIoU: {summary['val_miou']:.6f}")
    _say(f"Checkpoint sha256: {summary['checkpoint_sha256']}")
    return summary


def run_eval(config, args) -> dict:
    output_dir = _prepare_output(config)
    device = resolve_device(config.run.device)
    dataset = _eval_set(config, args)
    model = None if args.oracle else _load_model(config, args.checkpoint, device)
    seed_everything(config.run.seed)

    report, masks = evaluate(model, dataset, _schedule(config), config, oracle=args.oracle)
    _write_json(os.path.join(output_dir, 'eval_report.json'), report)
    RunLog(os.path.join(output_dir, 'run_log.jsonl')).append(command='eval', **{
        key: value['dice'] for key, value in report.items() if isinstance(value, dict)})
    if args.export_masks:
        export_masks(masks, [case.id for case in dataset.samples], config.data.class_names,
                     os.path.join(output_dir, 'masks'))

    _say(format_table(report))
    for key, scores in report.items():
        if isinstance(scores, dict):
            _say(f"{key} Dice: {_fmt_score(scores['dice'])} mIoU: {_fmt_score(scores['miou'])} "
                 f"median Dice: {_fmt_score(scores['dice_median'])}")
    return report


def run_sample(config, args) -> dict:
    output_dir = _prepare_output(config)
    device = resolve_device(config.run.device)
    dataset = _eval_set(config, args)
    model = _load_model(config, args.checkpoint, device)
    schedule = _schedule(config)
    count = min(args.num_cases, len(dataset)) if args.num_cases else len(dataset)

    images, _ = dataset.batch(range(count))
    generator = make_generator(config.run.seed)
    masks, trace = sample(images.to(device), model, schedule, generator, config.consensus, config.sampler.stride)
    export_masks(masks, [case.id for case in dataset.samples[:count]], config.data.class_names,
                 os.path.join(output_dir, 'masks'))
    if args.trace:
        np.savez_compressed(os.path.join(output_dir, 'trace.npz'), **trace.to_numpy())
    _say(f'Sampled {count} masks with {len(trace)} reverse steps')
    return {'cases': count, 'steps': len(trace)}


def run_profile(config, args) -> dict:
    output_dir = _prepare_output(config)
    device = resolve_device(config.run.device)
    resolution, batch_size = config.profile.resolution, config.profile.batch_size
    if args.scale:
        resolution = PROFILE_SCALES[args.scale]['resolution']
        batch_size = PROFILE_SCALES[args.scale]['batch_size']
        errors = config._check_resolution(resolution, f'profile scale {args.scale}')
        if errors:
            raise ConfigError(errors)
    seed_everything(config.run.seed)
    model = build_model(config).to(device)

    report = profile(model, _schedule(config), resolution, batch_size, config.profile.warmup, config.profile.iters,
                     device, config.optim.lr, config.run.seed, config.profile.monitor_hz, config.data.channels,
                     config.optim.grad_clip)
    with open(os.path.join(output_dir, 'profile_report.json'), 'w') as handle:
        handle.write(report.to_json() + '\n')
    RunLog(os.path.join(output_dir, 'run_log.jsonl')).append(command='profile', **report.to_dict())

    _say(report.format_table())
    values = report.to_dict()
    for key, _ in PROFILE_COLUMNS:
        _say(f'{key}: {values[key]}')
    return values


def run_ablate(config, args=None) -> dict:
    """
    Train and evaluate the unconditioned baseline and both fusion modes under identical seeds and data.
    """
    output_dir = _prepare_output(config)
    device = resolve_device(config.run.device)
    train_set, val_set = load_splits(config)
    schedule = _schedule(config)
    run_log = RunLog(os.path.join(output_dir, 'run_log.jsonl'))

    results = {mode: {'dice': [], 'miou': []} for mode in ABLATION_ROWS}
    for seed in config.ablation.seeds:
        for mode in ABLATION_ROWS:
            variant = config.copy()
            variant.adapter.fusion_mode = mode
            variant.run.seed = seed
            variant.run.output_dir = os.path.join(output_dir, f'{mode}_seed{seed}')
            variant.check()
            state, _ = fit(variant, train_set)
            state.model.to(device).eval()
            report, _ = evaluate(state.model, val_set, schedule, variant, averaging=AVERAGING[MEAN_FOREGROUND])
            scores = report[f'best_of_{variant.evaluation.n_samples}']
            results[mode]['dice'].append(scores['dice'])
            results[mode]['miou'].append(scores['miou'])
            run_log.append(command='ablate', mode=mode, seed=seed, dice=scores['dice'], miou=scores['miou'])
            log(f'{mode} seed {seed}: Dice {scores["dice"]:.4f}, mIoU {scores["miou"]:.4f}', logger=logger.info)

    table = {mode: {'dice': float(np.mean(r['dice'])), 'miou': float(np.mean(r['miou'])),
                    'dice_per_seed': r['dice'], 'miou_per_seed': r['miou']} for mode, r in results.items()}
    _write_json(os.path.join(output_dir, 'ablation_report.json'), {'seeds': config.ablation.seeds, 'rows': table})

    _say(f"{'Conditioning':<14}{'F-1':>8}{'mIoU':>8}")
    for mode in ABLATION_ROWS:
        _say(f"{mode:<14}{100 * table[mode]['dice']:>8.1f}{100 * table[mode]['miou']:>8.1f}")
    gap = table[FUSION_MODES[ADDITIVE]]['dice'] - table[FUSION_MODES[NONE]]['dice']
    _say(f'Additive minus unconditioned Dice: {gap:.6f}')
    return table


def run_gen_data(config, args) -> dict:
    output_dir = _prepare_output(config)
    train_set, val_set = load_splits(config)
    paths = {}
    for name, dataset in (('train', train_set), ('val', val_set)):
        paths[name] = os.path.join(output_dir, f'{name}.cdds')
        save_dataset(dataset, paths[name])
        _say(f'{name}: {len(dataset)} samples, sha256 {file_digest(paths[name])}')
    return paths


COMMANDS = {
    'train': run_train,
    'sample': run_sample,
    'eval': run_eval,
    'profile': run_profile,
    'ablate': run_ablate,
    'gen-data': run_gen_data,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='condiff',
        description='PVT-conditioned diffusion segmentation: training, sampling, evaluation, profiling and ablation')
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='Run configuration file (section.key = value)')
    common.add_argument('--data', type=str, default=None,
                        help="'synthetic', or a dataset file (training data for train, evaluation data otherwise)")
    common.add_argument('--epochs', type=int, default=None, help='Shortcut for optim.epochs=<n>')
    common.add_argument('--seed', type=int, default=None, help='Shortcut for run.seed=<n>')
    common.add_argument('--device', type=str, default=None, choices=list(DEVICE_TYPES.values()),
                        help='Shortcut for run.device=<device>')
    common.add_argument('-v', '--verbose', action='store_true', help='Print debug messages')
    common.add_argument('overrides', nargs='*', metavar='section.key=value', help='Configuration overrides')

    subparsers.add_parser('train', parents=[common], help='Train a model')
    for name in ('sample', 'eval'):
        sub = subparsers.add_parser(name, parents=[common], help=f'{name.capitalize()} with a trained model')
        sub.add_argument('--checkpoint', type=str, default=None, help='Checkpoint written by train')
        if name == 'sample':
            sub.add_argument('--num-cases', type=int, default=0, help='Number of cases to sample (0: all)')
            sub.add_argument('--trace', action='store_true', help='Also write the prediction trace (trace.npz)')
        else:
            sub.add_argument('--oracle', action='store_true', help='Score the ground truth against itself')
            sub.add_argument('--export-masks', action='store_true', help='Write predicted masks as 8-bit PNGs')
    sub = subparsers.add_parser('profile', parents=[common], help='Profile parameters, memory and timings')
    sub.add_argument('--scale', type=str, default=None, choices=list(PROFILE_SCALES),
                     help='Use the resolution and batch size of a known profiling scale')
    subparsers.add_parser('ablate', parents=[common], help='Compare conditioning strategies')
    subparsers.add_parser('gen-data', parents=[common], help='Write the synthetic train and val sets')
    return parser


def build_config(args) -> RunConfig:
    """
    Configuration from the file (if any), the shortcut flags, then the key=value overrides; validated once.
    """
    config = RunConfig.from_file(args.config, validate=False) if args.config else RunConfig()
    overrides = []
    if args.data:
        if args.data == DATA_SOURCES[SYNTHETIC]:
            overrides.append(f'data.source={DATA_SOURCES[SYNTHETIC]}')
        elif args.command in ('train', 'ablate', 'gen-data'):
            overrides += [f'data.source={DATA_SOURCES[FILE]}', f'data.path={args.data}']
    if args.epochs is not None:
        overrides.append(f'optim.epochs={args.epochs}')
    if args.seed is not None:
        overrides.append(f'run.seed={args.seed}')
    if args.device is not None:
        overrides.append(f'run.device={args.device}')
    config.apply_overrides(overrides + list(args.overrides))

    errors = []
    if args.command in ('sample', 'eval') and args.data and args.data != DATA_SOURCES[SYNTHETIC]:
        if not os.path.isfile(args.data):
            errors.append(f"dataset file '{args.data}' does not exist")
    if args.command in ('sample', 'eval') and not getattr(args, 'oracle', False):
        if not args.checkpoint:
            errors.append(f'{args.command} needs --checkpoint')
        elif not os.path.isfile(args.checkpoint):
            errors.append(f"checkpoint '{args.checkpoint}' does not exist")
    if errors:
        raise ConfigError(errors)
    return config


def main(argv=None) -> int:
    parser = make_parser()
    # overrides may be interleaved with options
    args, extra = parser.parse_known_args(argv)
    unknown = [item for item in extra if item.startswith('-') or '=' not in item]
    if unknown:
        parser.error(f'unrecognized arguments: {" ".join(unknown)}')
    args.overrides = list(args.overrides) + extra

    try:
        config = build_config(args)
    except VALIDATION_ERRORS as err:
        errors = getattr(err, 'errors', [str(err)])
        print(json.dumps({'errors': errors}), file=sys.stderr)
        return EXIT_CODES['validation']

    logging.config.dictConfig(library_logging_config(config.run.output_dir, verbose=args.verbose))
    set_num_threads(config.run.num_threads)
    log(f'running {args.command} with output directory {config.run.output_dir}', logger=logger.info)

    try:
        COMMANDS[args.command](config, args)
    except VALIDATION_ERRORS as err:
        errors = getattr(err, 'errors', [str(err)])
        print(json.dumps({'errors': errors}), file=sys.stderr)
        return EXIT_CODES['validation']
    except Exception as err:
        logger.exception(f'{args.command} failed')
        print(json.dumps({'errors': [f'{type(err).__name__}: {err}']}), file=sys.stderr)
        return EXIT_CODES['runtime']
    return EXIT_CODES['success']


def cli():
    sys.exit(main())


if __name__ == '__main__':
    cli()
