import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings

from sparrow.cli import normalize_argv
from sparrow.conf import coerce, load_config, parse_overrides, read_config_file
from sparrow.exceptions import ConfigError
from sparrow.specdec import TreeConfig


class CoerceTests(SimpleTestCase):
    def test_types_follow_defaults(self):
        self.assertIs(coerce('noise', 'off', True), False)
        self.assertIs(coerce('noise', 'Yes', True), True)
        self.assertEqual(coerce('num_layers', ' 6 ', 8), 6)
        self.assertEqual(coerce('alpha', '0.5', 1.0), 0.5)
        self.assertEqual(coerce('l_vis_sweep', '64,512', [64]), [64, 512])
        self.assertEqual(coerce('pruning_fractions', '0,0.5', [0.0]), [0.0, 0.5])
        self.assertEqual(coerce('tree', '25-5-8', '30-4-8'), '25-5-8')
        self.assertEqual(coerce('num_layers', 4, 8), 4)

    def test_bad_values(self):
        with self.assertRaises(ConfigError):
            coerce('num_layers', 'ocho', 8)
        with self.assertRaises(ConfigError):
            coerce('noise', 'quizas', True)

    def test_overrides(self):
        self.assertEqual(parse_overrides(['tree=1-1-1', 'method=a=b']), {'tree': '1-1-1', 'method': 'a=b'})
        with self.assertRaises(ConfigError):
            parse_overrides(['tree'])


class LoadConfigTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def write(self, text):
        path = self.dir / 'run.conf'
        path.write_text(text)
        return path

    def test_defaults(self):
        cfg = load_config('decode', out_dir=self.dir)
        self.assertEqual(cfg['tree'], '30-4-8')
        self.assertEqual(cfg.tree_config(), TreeConfig(30, 4, 8))
        self.assertEqual(cfg.out_dir, self.dir)

    def test_precedence(self):
        path = self.write("# comentario\ntree=1-1-1\nmax_tokens=4\ntemperature=0.5\n")
        cfg = load_config('decode', path, ['max_tokens=6', 'temperature=0.7'], flags={'temperature': 0.9,
                                                                                     'tree': None})
        self.assertEqual(cfg['tree'], '1-1-1')
        self.assertEqual(cfg['max_tokens'], 6)
        self.assertEqual(cfg['temperature'], 0.9)
        self.assertEqual(cfg.config_path, path)

    @override_settings(SPARROW_SEED=5)
    def test_seed_precedence(self):
        self.assertEqual(load_config('decode').seed, 5)
        self.assertEqual(load_config('decode', overrides=['seed=3']).seed, 3)
        self.assertEqual(load_config('decode', overrides=['seed=3'], seed=9).seed, 9)
        self.assertEqual(load_config('decode', self.write("seed=4\n")).seed, 4)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            load_config('decode', self.write("colour=blue\n"))
        with self.assertRaises(ConfigError):
            load_config('decode', overrides=['colour=blue'])

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config('decode', self.dir / 'absent.conf')
        with self.assertRaises(ConfigError):
            read_config_file(self.dir)

    def test_model_and_task_configs(self):
        cfg = load_config('train_target', overrides=['num_layers=4', 'hidden_dim=16', 'num_heads=2',
                                                     'vocab_size=64', 'visual_alphabet=4', 'num_slots=4',
                                                     'tagged=2', 'query_slots=1', 'chant_len=4'])
        model_cfg = cfg.model_config()
        self.assertEqual((model_cfg.num_layers, model_cfg.hidden_dim), (4, 16))
        task = cfg.task_config(model_cfg)
        self.assertEqual(task.vocab_size, 64)
        self.assertEqual(task.chant_len, 4)

    def test_desk_config_is_valid(self):
        path = Path(__file__).resolve().parents[2] / 'configs' / 'desk.conf'
        cfg = load_config('bench', path)
        self.assertEqual(cfg['l_vis_sweep'], [64, 512, 1536, 4096])
        self.assertEqual(cfg.model_config().num_layers, 8)


class CliTests(SimpleTestCase):
    def test_aliases(self):
        self.assertEqual(normalize_argv(['manage.py', 'train-target', '--seed', '1']),
                         ['manage.py', 'train_target', '--seed', '1'])
        self.assertEqual(normalize_argv(['manage.py', 'train-draft']), ['manage.py', 'train_draft'])
        self.assertEqual(normalize_argv(['manage.py', 'bench']), ['manage.py', 'bench'])
        self.assertEqual(normalize_argv(['manage.py']), ['manage.py'])
