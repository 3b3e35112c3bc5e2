import csv
import os

import pytest

from main import main

TINY_MARKOV = """
data.states = 5
data.count = 64
data.length = 6
transformer.vocab_size = 5
transformer.layers = 2
transformer.d_model = 8
transformer.heads = 2
transformer.cross_layers = 1
transformer.max_length = 8
training.steps = 3
training.batch_size = 4
training.log_every = 1
sampling.iterations = 3
eval.samples_per_label = 8
eval.diversity_pairs = 10
eval.multimodality_pairs = 4
"""

TINY_FRAMES = """
data.source = tokens
data.features = 3
data.frames = 16
data.length = 4
tokenizer.codebook_size = 8
tokenizer.code_dim = 4
tokenizer.width = 8
tokenizer.steps = 3
tokenizer.batch_size = 4
tokenizer.log_every = 1
transformer.vocab_size = 8
transformer.layers = 2
transformer.d_model = 8
transformer.heads = 2
transformer.cross_layers = 1
transformer.max_length = 8
training.steps = 2
training.batch_size = 4
sampling.iterations = 2
"""


def read_rows(path):
    with open(path, newline='') as handle:
        return list(csv.reader(handle))


@pytest.fixture
def markov_run(tmp_path):
    config = tmp_path / 'tiny.cfg'
    config.write_text(TINY_MARKOV)
    out = tmp_path / 'run'
    common = ['--config', str(config), '--seed', '3']
    assert main(['train-transformer', '--out', str(out)] + common) == 0
    return common, out


@pytest.mark.unittest
def test_mask_command_prints_the_grid(tmp_path, capsys):
    png = str(tmp_path / 'mask.png')
    code = main(['mask', '--length', '4', '--masked', '0,2', '--order', '2,0,3,1', '--out', str(tmp_path),
                 '--png', png])
    assert code == 0
    assert capsys.readouterr().out == '110000\n110000\n111101\n110101\n111111\n110101\n'
    assert os.path.getsize(png) > 0


@pytest.mark.unittest
@pytest.mark.parametrize('argv,code', [
    ([], 2),
    (['launch'], 2),
    (['mask', '--length', '4', '--bogus'], 2),
    (['mask', '--length', '4', '--masked', '7'], 2),
    (['mask', '--length', '4', '--masked', 'a,b'], 2),
    (['mask', '--length', '4', '--order', '0,1'], 2),
    (['mask', '--length', '3', '--order', '0,0,1'], 1),
    (['mask', '--length', '4', '--preset', 'huge'], 2),
    (['mask', '--length', '2', '--preset', 'paper-scale'], 0),
])
def test_exit_codes(tmp_path, argv, code):
    if argv and argv[0] == 'mask':
        argv = argv + ['--out', str(tmp_path)]
    assert main(argv) == code


@pytest.mark.unittest
def test_unknown_config_key_is_a_usage_error(tmp_path):
    config = tmp_path / 'bad.cfg'
    config.write_text('transformer.depth = 3\n')
    assert main(['mask', '--length', '2', '--config', str(config), '--out', str(tmp_path)]) == 2


@pytest.mark.unittest
def test_missing_checkpoint_is_a_runtime_failure(tmp_path):
    assert main(['generate', '--checkpoint', str(tmp_path / 'absent.ckpt'), '--out', str(tmp_path)]) == 1


@pytest.mark.unittest
def test_training_writes_checkpoint_and_metrics(markov_run):
    _, out = markov_run
    assert (out / 'transformer.ckpt').exists()
    rows = read_rows(out / 'transformer_metrics.csv')
    assert rows[0] == ['step', 'loss', 'masked_accuracy', 'lr']
    assert [row[0] for row in rows[1:]] == ['0', '1', '2']


@pytest.mark.unittest
def test_generation_is_deterministic(markov_run, tmp_path):
    common, out = markov_run
    outputs = []
    for name in ('first', 'second'):
        target = tmp_path / name
        argv = ['generate', '--checkpoint', str(out / 'transformer.ckpt'), '--count', '3', '--seed', '7',
                '--out', str(target), '--config', common[1]]
        assert main(argv) == 0
        outputs.append((target / 'generated_tokens.csv').read_bytes())
    assert outputs[0] == outputs[1]
    rows = read_rows(tmp_path / 'first' / 'generated_tokens.csv')
    assert rows[0] == ['sequence', 'label', 't0', 't1', 't2', 't3', 't4', 't5']
    assert [row[1] for row in rows[1:]] == ['0', '0', '0', '1', '1', '1']
    assert all(0 <= int(t) < 5 for row in rows[1:] for t in row[2:])


@pytest.mark.unittest
def test_generate_one_label_with_cbs(markov_run, tmp_path):
    common, out = markov_run
    argv = ['generate', '--checkpoint', str(out / 'transformer.ckpt'), '--method', 'cbs', '--label', '1',
            '--count', '2', '--out', str(tmp_path / 'cbs')] + common
    assert main(argv) == 0
    rows = read_rows(tmp_path / 'cbs' / 'generated_tokens.csv')
    assert [row[1] for row in rows[1:]] == ['1', '1']
    argv[argv.index('--label') + 1] = '4'
    assert main(argv) == 2


@pytest.mark.unittest
def test_edit_keeps_the_known_prefix(markov_run, tmp_path):
    common, out = markov_run
    target = tmp_path / 'edit'
    argv = ['edit', '--checkpoint', str(out / 'transformer.ckpt'), '--mode', 'prefix', '--count', '2',
            '--out', str(target)] + common
    assert main(argv) == 0
    reference = read_rows(target / 'reference_tokens.csv')
    edited = read_rows(target / 'edited_tokens.csv')
    assert len(reference) == len(edited) == 5
    for ref, new in zip(reference[1:], edited[1:]):
        assert ref[:5] == new[:5]


@pytest.mark.unittest
def test_eval_writes_metrics(markov_run, tmp_path):
    common, out = markov_run
    target = tmp_path / 'eval'
    assert main(['eval', '--checkpoint', str(out / 'transformer.ckpt'), '--out', str(target)] + common) == 0
    rows = read_rows(target / 'metrics.csv')
    assert rows[0] == ['metric', 'method', 'label', 'mean', 'ci95']
    keys = {tuple(row[:3]) for row in rows[1:]}
    assert ('masked_accuracy', 'corrupted', 'all') in keys
    for method in ('oaas', 'cbs'):
        for key in [('bigram_kl', method, '0'), ('bigram_kl', method, '1'), ('edit_prefix_kl', method, '1'),
                    ('frechet', method, 'all'), ('condition_accuracy', method, 'all'),
                    ('condition_precision_top3', method, 'all'), ('condition_distance', method, 'all'),
                    ('diversity', method, 'all'), ('multimodality', method, 'all')]:
            assert key in keys
    assert all(float(row[3]) >= 0 for row in rows[1:])


@pytest.mark.unittest
def test_tokenizer_pipeline(tmp_path):
    config = tmp_path / 'frames.cfg'
    config.write_text(TINY_FRAMES)
    out = tmp_path / 'run'
    common = ['--config', str(config), '--out', str(out), '--quiet']
    assert main(['train-tokenizer'] + common) == 0
    assert read_rows(out / 'tokenizer_metrics.csv')[0][:2] == ['step', 'loss']
    tokenizer = str(out / 'tokenizer.ckpt')
    assert main(['train-transformer'] + common) == 2
    assert main(['train-transformer', '--tokenizer', tokenizer] + common) == 0

    render = tmp_path / 'png'
    assert main(['generate', '--checkpoint', str(out / 'transformer.ckpt'), '--tokenizer', tokenizer,
                 '--count', '2', '--render', str(render)] + common) == 0
    frames = read_rows(out / 'generated_frames.csv')
    assert frames[0] == ['sequence', 'frame', 'f0', 'f1', 'f2']
    assert len(frames) == 1 + 4 * 16
    assert len(os.listdir(render)) == 4


@pytest.mark.slow
def test_selftest_passes(tmp_path):
    assert main(['selftest', '--out', str(tmp_path)]) == 0


def tree_bytes(root):
    files = {}
    for directory, _, names in os.walk(root):
        for name in names:
            path = os.path.join(directory, name)
            with open(path, 'rb') as handle:
                files[os.path.relpath(path, root)] = handle.read()
    return files


@pytest.mark.unittest
def test_every_subcommand_is_deterministic(tmp_path):
    markov = tmp_path / 'tiny.cfg'
    markov.write_text(TINY_MARKOV)
    frames = tmp_path / 'frames.cfg'
    frames.write_text(TINY_FRAMES)
    trees = []
    for name in ('first', 'second'):
        root = tmp_path / name
        common = ['--config', str(markov), '--seed', '3', '--quiet']
        assert main(['train-transformer', '--out', str(root / 'train')] + common) == 0
        checkpoint = str(root / 'train' / 'transformer.ckpt')
        assert main(['edit', '--checkpoint', checkpoint, '--mode', 'inpaint', '--count', '2',
                     '--out', str(root / 'edit')] + common) == 0
        assert main(['eval', '--checkpoint', checkpoint, '--out', str(root / 'eval')] + common) == 0
        assert main(['train-tokenizer', '--config', str(frames), '--seed', '3', '--quiet',
                     '--out', str(root / 'tokenizer')]) == 0
        trees.append(tree_bytes(root))
    assert 'train/transformer.ckpt' in trees[0] and 'tokenizer/tokenizer.ckpt' in trees[0]
    assert 'edit/edited_tokens.csv' in trees[0] and 'eval/metrics.csv' in trees[0]
    assert trees[0] == trees[1]
