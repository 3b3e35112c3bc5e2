"""
Command line: train-tokenizer, train-transformer, generate, edit, eval,
selftest and mask. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from checkpoint import load_checkpoint, save_model, restore_model
from config import load_settings, materialize, PRESETS
from constants import DataSource, Direction, EditMode, SamplingMethod, CSV_FLOAT
from corruption import build_hybrid_mask, corrupt_batch
from errors import BadError, ConfigError
from metrics import (bigram_kl, condition_accuracy, condition_precision, condition_distance, sequence_features,
                     frame_features, frechet_gaussian_distance, diversity, multimodality, mean_confidence_interval)
from numerics import set_precision, no_grad
from oracles import run_selftest
from primitives import Permutation
from render import write_mask, write_frames
from sampling import generate, edit_generate
from sources import (MarkovSource, SineMotionSource, TokenizedSource, TokenDataset, generate_markov_dataset,
                     dataset_batch_sampler, batch_sampler, prompt_words, default_prompts)
from tokenizer import VQVAE, train_tokenizer, codebook_usage
from training import train_transformer, masked_accuracy
from transformer import BadTransformer
from utils import get_logger, set_log_level, make_rng

logger = get_logger('bad-cli')

# rng streams under --seed
INIT_STREAM = 0
DATASET_STREAM = 3
GENERATE_STREAM = 4
EVAL_STREAM = 5


def _common(parser):
    parser.add_argument('--config', help='section.key = value file')
    parser.add_argument('--preset', default='desk', choices=sorted(PRESETS))
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--out', default='.', help='output directory')
    noise = parser.add_mutually_exclusive_group()
    noise.add_argument('--verbose', action='store_true')
    noise.add_argument('--quiet', action='store_true')


def _generation(parser):
    parser.add_argument('--checkpoint', required=True, help='transformer checkpoint')
    parser.add_argument('--tokenizer', help='tokenizer checkpoint, for decoded frames or tokenized data')
    parser.add_argument('--method', choices=[m.value for m in SamplingMethod])
    parser.add_argument('--label', type=int, action='append', help='condition label (repeatable)')
    parser.add_argument('--count', type=int, default=16, help='sequences per label')
    parser.add_argument('--render', metavar='DIR', help='write frame heat maps (needs --tokenizer)')


def build_parser():
    parser = argparse.ArgumentParser(prog='bad', description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest='command', required=True)

    _common(commands.add_parser('train-tokenizer', help='fit the VQ-VAE on sinusoid frames'))

    train = commands.add_parser('train-transformer', help='fit the transformer under the BAD objective')
    _common(train)
    train.add_argument('--tokenizer', help='tokenizer checkpoint (data.source = tokens)')

    gen = commands.add_parser('generate', help='sample token sequences')
    _common(gen)
    _generation(gen)

    edit = commands.add_parser('edit', help='temporal editing of source sequences')
    _common(edit)
    _generation(edit)
    edit.add_argument('--mode', required=True, choices=[m.value for m in EditMode])

    ev = commands.add_parser('eval', help='distribution metrics for both samplers')
    _common(ev)
    ev.add_argument('--checkpoint', required=True)
    ev.add_argument('--tokenizer')

    _common(commands.add_parser('selftest', help='run the oracle suites'))

    mask = commands.add_parser('mask', help='print a hybrid attention mask as a 0/1 grid')
    _common(mask)
    mask.add_argument('--length', type=int, required=True)
    mask.add_argument('--masked', default='', help='comma-separated masked positions')
    mask.add_argument('--order', help='comma-separated decoding order (default identity)')
    mask.add_argument('--direction', default='suffix', choices=[d.value for d in Direction])
    mask.add_argument('--png', help='also write the mask as an image')
    return parser


def _positions(text):
    try:
        return [int(p) for p in text.split(',') if p.strip()]
    except ValueError:
        raise ConfigError('expected comma-separated integers, got %r' % text)


def _write_tokens(path, tokens, labels):
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['sequence', 'label'] + ['t%d' % t for t in range(tokens.shape[1])])
        for n, (row, label) in enumerate(zip(tokens, labels)):
            writer.writerow([n, int(label)] + [int(t) for t in row])


def _write_frames(path, frames):
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['sequence', 'frame'] + ['f%d' % f for f in range(frames.shape[2])])
        for n, sequence in enumerate(frames):
            for t, frame in enumerate(sequence):
                writer.writerow([n, t] + [CSV_FLOAT % v for v in frame])


def _frame_source(settings):
    # fixed parameters, so tokenizer and transformer runs see the same source
    data = settings.data
    return SineMotionSource.desk(data.features, data.labels, data.frames)


def _load_tokenizer(path, settings):
    checkpoint = load_checkpoint(path)
    values = {k: v for k, v in checkpoint.config.items() if k.startswith('tokenizer.')}
    config = materialize('tokenizer', values)
    config.features = int(checkpoint.config.get('data.features', settings.data.features))
    model = VQVAE(config, make_rng(0))
    return restore_model(model, checkpoint, 'tokenizer')


def _load_transformer(path):
    checkpoint = load_checkpoint(path)
    values = {k: v for k, v in checkpoint.config.items() if k.startswith('transformer.')}
    return restore_model(BadTransformer(materialize('transformer', values), make_rng(0)), checkpoint, 'transformer')


def _token_source(settings, args):
    if settings.data.source == DataSource.MARKOV:
        return MarkovSource.desk(settings.data.states, settings.data.labels)
    if not args.tokenizer:
        raise ConfigError('data.source = tokens needs --tokenizer')
    return TokenizedSource(_frame_source(settings), _load_tokenizer(args.tokenizer, settings))


def train_tokenizer_command(args, settings):
    source = _frame_source(settings)
    model = VQVAE(settings.tokenizer, make_rng(args.seed, INIT_STREAM))
    train_tokenizer(model, source, make_rng(args.seed, DATASET_STREAM),
                    metrics_path=os.path.join(args.out, 'tokenizer_metrics.csv'))
    frames, _ = source.sample_frames(256, make_rng(args.seed, EVAL_STREAM))
    with no_grad():
        tokens = model.tokenize(frames)
        l1 = float(np.abs(model.detokenize(tokens) - frames).mean())
    logger.info('held-out L1 %.4f, codebook usage %.2f', l1, codebook_usage(tokens, model.codebook.size))
    save_model(os.path.join(args.out, 'tokenizer.ckpt'), 'tokenizer', model, settings.flatten())
    return 0


def train_transformer_command(args, settings):
    model = BadTransformer(settings.transformer, make_rng(args.seed, INIT_STREAM))
    source = _token_source(settings, args)
    data = settings.data
    if data.source == DataSource.MARKOV:
        dataset = generate_markov_dataset(source, data.count, data.length, make_rng(args.seed, DATASET_STREAM))
        sample = dataset_batch_sampler(dataset, source.prompts, settings.training.batch_size)
    else:
        sample = batch_sampler(source, settings.training.batch_size, data.length)
    train_transformer(model, sample, settings.training, settings.corruption, args.seed,
                      metrics_path=os.path.join(args.out, 'transformer_metrics.csv'))
    save_model(os.path.join(args.out, 'transformer.ckpt'), 'transformer', model, settings.flatten())
    return 0


def _sampling_config(args, settings):
    if args.method:
        return replace(settings.sampling, method=SamplingMethod(args.method))
    return settings.sampling


def _labels(args, settings):
    labels = args.label if args.label else list(range(settings.data.labels))
    if any(not 0 <= label < settings.data.labels for label in labels):
        raise ConfigError('labels must lie in [0, %d)' % settings.data.labels)
    return np.repeat(np.asarray(labels, dtype=np.int64), args.count)


def _decode_outputs(args, settings, tokens, prefix):
    if not args.tokenizer:
        if args.render:
            raise ConfigError('--render needs --tokenizer')
        return
    tokenizer = _load_tokenizer(args.tokenizer, settings)
    frames = tokenizer.detokenize(tokens)
    _write_frames(os.path.join(args.out, '%s_frames.csv' % prefix), frames)
    if args.render:
        write_frames(args.render, frames, prefix)


def generate_command(args, settings):
    model = _load_transformer(args.checkpoint)
    labels = _labels(args, settings)
    words = prompt_words(labels, default_prompts(settings.data.labels))
    state = generate(model, words, settings.data.length, _sampling_config(args, settings),
                     make_rng(args.seed, GENERATE_STREAM))
    _write_tokens(os.path.join(args.out, 'generated_tokens.csv'), state.tokens, labels)
    _decode_outputs(args, settings, state.tokens, 'generated')
    return 0


def edit_command(args, settings):
    model = _load_transformer(args.checkpoint)
    labels = _labels(args, settings)
    source = _token_source(settings, args)
    rng = make_rng(args.seed, GENERATE_STREAM)
    reference, _ = source.sample(len(labels), settings.data.length, rng, labels)
    state = edit_generate(model, prompt_words(labels, source.prompts), reference, EditMode(args.mode),
                          _sampling_config(args, settings), rng)
    _write_tokens(os.path.join(args.out, 'reference_tokens.csv'), reference, labels)
    _write_tokens(os.path.join(args.out, 'edited_tokens.csv'), state.tokens, labels)
    _decode_outputs(args, settings, state.tokens, 'edited')
    return 0


def _evaluate_once(model, source, settings, method, rng, real):
    """One repeat of every metric for one sampler: {(metric, label): value}."""
    length = settings.data.length
    config = replace(settings.sampling, method=method)
    per_label = settings.eval.samples_per_label
    labels = np.repeat(np.arange(settings.data.labels), per_label)
    words = prompt_words(labels, source.prompts)
    tokens = generate(model, words, length, config, rng).tokens
    half = length // 2
    edited = edit_generate(model, words, real.tokens[:len(labels)], EditMode.PREFIX, config, rng).tokens
    states = model.config.vocab_size
    features = sequence_features(tokens, states)
    results = {
        ('frechet', 'all'): frechet_gaussian_distance(features, sequence_features(real.tokens, states)),
        ('diversity', 'all'): diversity(features, rng, settings.eval.diversity_pairs),
        ('multimodality', 'all'): multimodality(features, labels, rng, settings.eval.multimodality_pairs),
    }
    if isinstance(source, MarkovSource):
        results[('condition_accuracy', 'all')] = condition_accuracy(tokens, labels, source)
        for top in (2, 3):
            results[('condition_precision_top%d' % top, 'all')] = condition_precision(tokens, labels, source, top)
        results[('condition_distance', 'all')] = condition_distance(tokens, labels, source)
        for label in range(settings.data.labels):
            rows = labels == label
            results[('bigram_kl', str(label))] = bigram_kl(tokens[rows], source, label)
            results[('edit_prefix_kl', str(label))] = bigram_kl(edited[rows], source, label, start=half)
    else:
        with no_grad():
            frames = source.tokenizer.detokenize(tokens)
            real_frames = source.tokenizer.detokenize(real.tokens)
        results[('frame_frechet', 'all')] = frechet_gaussian_distance(frame_features(frames),
                                                                      frame_features(real_frames))
    return results


def eval_command(args, settings):
    model = _load_transformer(args.checkpoint)
    source = _token_source(settings, args)
    data = settings.data
    count = data.labels * settings.eval.samples_per_label
    real_labels = np.repeat(np.arange(data.labels), settings.eval.samples_per_label)
    tokens, labels = source.sample(count, data.length, make_rng(args.seed, DATASET_STREAM), real_labels)
    real = TokenDataset(tokens, labels)

    rng = make_rng(args.seed, EVAL_STREAM)
    held_out = rng.choice(count, size=min(256, count), replace=False)
    corrupted, plans, targets = corrupt_batch(tokens[held_out], model.config.max_length, rng, settings.corruption)
    with no_grad():
        logits = model.logits_for(corrupted, plans, prompt_words(labels[held_out], source.prompts)).data
    rows = [('masked_accuracy', 'corrupted', 'all',
             masked_accuracy(logits, targets, np.stack([p.masked for p in plans])), 0.0)]

    for method in SamplingMethod:
        runs = [_evaluate_once(model, source, settings, method, make_rng(args.seed, EVAL_STREAM, repeat), real)
                for repeat in range(settings.eval.repeats)]
        for key in runs[0]:
            mean, ci = mean_confidence_interval([run[key] for run in runs])
            rows.append((key[0], method.value, key[1], mean, ci))
            logger.info('%-18s %-4s %-4s %.5f +- %.5f', key[0], method.value, key[1], mean, ci)

    with open(os.path.join(args.out, 'metrics.csv'), 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['metric', 'method', 'label', 'mean', 'ci95'])
        for metric, method, label, mean, ci in rows:
            writer.writerow([metric, method, label, CSV_FLOAT % mean, CSV_FLOAT % ci])
    return 0


def selftest_command(args, settings):
    results = run_selftest(make_rng(args.seed))
    return 0 if all(result.passed for result in results) else 1


def mask_command(args, settings):
    masked = np.zeros(args.length, dtype=bool)
    positions = _positions(args.masked)
    if any(not 0 <= p < args.length for p in positions):
        raise ConfigError('masked positions must lie in [0, %d)' % args.length)
    masked[positions] = True
    order = _positions(args.order) if args.order else list(range(args.length))
    if len(order) != args.length:
        raise ConfigError('--order needs %d positions' % args.length)
    mask = build_hybrid_mask(masked, Permutation.from_order(order), Direction(args.direction))
    sys.stdout.write(mask.to_text())
    if args.png:
        write_mask(args.png, mask.allow)
    return 0


COMMANDS = {
    'train-tokenizer': train_tokenizer_command,
    'train-transformer': train_transformer_command,
    'generate': generate_command,
    'edit': edit_command,
    'eval': eval_command,
    'selftest': selftest_command,
    'mask': mask_command,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exit:
        return exit.code
    if args.verbose:
        set_log_level(logging.DEBUG)
    elif args.quiet:
        set_log_level(logging.WARNING)
    try:
        settings = load_settings(args.config, args.preset)
        set_precision(settings.numerics.precision)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, settings)
    except ConfigError as error:
        logger.error('configuration error: %s', error)
        return 2
    except (BadError, OSError) as error:
        logger.error('%s failed: %s', args.command, error)
        return 1


if __name__ == '__main__':
    sys.exit(main())
