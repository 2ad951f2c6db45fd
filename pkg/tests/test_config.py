import os

import pytest

import config
from config import build_config, dump_config, parse_assignments, parse_value, resolve_config, write_snapshot
from errors import ConfigError


def _write(tmp_path, text, name='exp.cfg'):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestDefaults:

    def test_synth2d_preset(self):
        cfg = resolve_config()
        assert cfg.dataset == 'synth2d'
        assert cfg.model.encoder_sizes == (128, 128)
        assert cfg.loss.lambda1 == 0.4
        assert cfg.train.lr == 5e-5
        assert cfg.model.head_bias_init == 3.0
        assert cfg.eval.ood_sources == ('far_field',)

    def test_mnist_alias_and_preset(self):
        cfg = resolve_config(flags={'dataset': 'mnist'})
        assert cfg.dataset == 'mnist-bags'
        assert cfg.model.encoder_sizes == (500, 256)
        assert cfg.eval.ood_sources == ('fmnist', 'kmnist')
        assert cfg.loss.lambda1 == 0.01
        assert cfg.model.head_bias_init == 0.0

    def test_run_shares_one_loss_config_and_seed(self):
        cfg = resolve_config(overrides=['seed=7', 'loss.strategy=naive'])
        assert cfg.train.loss is cfg.loss
        assert cfg.train.seed == 7
        assert cfg.loss.strategy == 's1'

    def test_run_name(self):
        assert resolve_config().run_name() == 'synth2d-mirel-attention-s3-l1_0.4-seed0'

    def test_cache_dir(self, tmp_path):
        cfg = resolve_config(flags={'seed': 3})
        assert cfg.cache_dir(str(tmp_path)) == os.path.join(str(tmp_path), 'cache', 'synth2d', 'seed-3')


class TestPrecedence:

    def test_file_then_set_then_flags(self, tmp_path):
        path = _write(tmp_path, "# experiment\nloss.lambda1=0.2\ntrain.max_epochs=3\n")
        assert resolve_config(path).loss.lambda1 == 0.2
        assert resolve_config(path, ['loss.lambda1=0.3']).loss.lambda1 == 0.3
        cfg = resolve_config(path, ['loss.lambda1=0.3'], {'loss.lambda1': 0.5})
        assert cfg.loss.lambda1 == 0.5
        assert cfg.train.max_epochs == 3

    def test_none_flags_are_ignored(self):
        assert resolve_config(flags={'loss.lambda1': None}).loss.lambda1 == 0.4

    def test_file_overrides_preset(self, tmp_path):
        path = _write(tmp_path, "model.encoder_sizes=16,8\n")
        assert resolve_config(path).model.encoder_sizes == (16, 8)


class TestErrors:

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            resolve_config(overrides=['model.depth=3'])

    def test_derived_key_is_not_settable(self):
        with pytest.raises(ConfigError):
            resolve_config(overrides=['train.seed=3'])

    @pytest.mark.parametrize('assignment', ['train.lr=fast', 'loss.use_red=maybe', 'seed=1.5'])
    def test_bad_value(self, assignment):
        with pytest.raises(ConfigError):
            resolve_config(overrides=[assignment])

    @pytest.mark.parametrize('assignment', ['model.pooling=sum', 'dataset=cifar', 'eval.ood_sources=svhn'])
    def test_invalid_choice(self, assignment):
        with pytest.raises(ConfigError):
            resolve_config(overrides=[assignment])

    def test_line_without_equals(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_config(_write(tmp_path, "loss.lambda1 0.2\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_config(str(tmp_path / 'missing.cfg'))


class TestParsing:

    def test_assignments_skip_comments(self):
        assert parse_assignments(['', '# note', ' a = 1 ']) == {'a': '1'}

    @pytest.mark.parametrize('raw,kind,expected', [
        ('yes', bool, True),
        ('Off', bool, False),
        ('12', int, 12),
        ('1e-4', float, 1e-4),
        ('0,0.25,1', tuple, (0, 0.25, 1)),
        ('fmnist, kmnist', tuple, ('fmnist', 'kmnist')),
        ('', tuple, ()),
        ((1, 2), tuple, (1, 2)),
    ])
    def test_values(self, raw, kind, expected):
        assert parse_value('key', raw, kind) == expected

    def test_build_from_typed_values(self):
        cfg = build_config({'dataset': 'synth2d', 'model.encoder_sizes': [4, 4]})
        assert cfg.model.encoder_sizes == (4, 4)


class TestSnapshot:

    def test_round_trip(self, tmp_path):
        original = resolve_config(overrides=['seed=4', 'loss.strategy=s2', 'eval.ood_ratios=0,0.5,1',
                                             'model.pooling=max', 'loss.use_red=false'])
        path = write_snapshot(original, str(tmp_path / 'run'))
        assert os.path.basename(path) == config.CONFIG_SNAPSHOT
        restored = resolve_config(path)
        assert restored == original
        assert dump_config(restored) == dump_config(original)

    def test_snapshot_lists_every_settable_key(self):
        text = dump_config(resolve_config())
        keys = {line.split('=', 1)[0] for line in text.splitlines() if '=' in line}
        assert keys == set(config.settable_keys())
