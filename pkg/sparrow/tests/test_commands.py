import json
import tempfile
from io import StringIO
from pathlib import Path

import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from sparrow.bench.reports import read_jsonl

# objetivo y tarea diminutos para que el pipeline completo corra en segundos
TINY = ['num_layers=4', 'hidden_dim=16', 'num_heads=2', 'vocab_size=64', 'max_positions=256',
        'visual_alphabet=4', 'ffn_mult=2', 'num_slots=4', 'tagged=2', 'query_slots=1', 'chant_len=4',
        'train_l_vis=4,8', 'target_steps=3', 'target_batch=2', 'train_examples=4', 'batch_size=2',
        'stage1_epochs=1', 'stage2_epochs=1', 'num_prompts=2', 'max_tokens=6', 'progress=false',
        'dtype=float64']


def run(name, out_dir, *args, extra=()):
    argv = [name, '--out-dir', str(out_dir), '--seed', '7']
    for pair in list(TINY) + list(extra):
        argv += ['--set', pair]
    call_command(*argv, *args, stdout=StringIO())


class ExitCodeTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def assertExit(self, code, *argv):
        with self.assertRaises(CommandError) as ctx:
            call_command(*argv, '--out-dir', str(self.dir), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, code)

    def test_bad_tree(self):
        self.assertExit(2, 'decode', '--tree', '0-4-8')
        self.assertExit(2, 'decode', '--tree', 'grande')

    def test_unknown_method(self):
        self.assertExit(2, 'decode', '--method', 'magic')

    def test_missing_config_file(self):
        self.assertExit(2, 'bench', '--config', str(self.dir / 'absent.conf'))

    def test_unknown_key(self):
        self.assertExit(2, 'analyze', '--set', 'colour=blue')

    def test_missing_checkpoint(self):
        self.assertExit(1, 'decode')
        self.assertExit(1, 'train_draft')


class PipelineTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        run('train_target', cls.dir)
        run('train_draft', cls.dir)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_checkpoints_and_logs(self):
        for name in ('target.sprw', 'draft.sprw', 'target_log.jsonl', 'draft_log.jsonl'):
            self.assertTrue((self.dir / name).is_file(), name)
        self.assertEqual(len(read_jsonl(self.dir / 'target_log.jsonl')), 3)

    def test_training_is_deterministic(self):
        with tempfile.TemporaryDirectory() as other:
            run('train_target', other)
            self.assertEqual((self.dir / 'target.sprw').read_bytes(), (Path(other) / 'target.sprw').read_bytes())

    def test_decode_matches_vanilla(self):
        run('decode', self.dir, '--l-vis', '4', '--output', 'fast.jsonl', '--tree', '6-3-4')
        run('decode', self.dir, '--l-vis', '4', '--output', 'slow.jsonl', '--method', 'vanilla')
        run('decode', self.dir, '--l-vis', '4', '--output', 'baseline.jsonl', '--method', 'baseline')
        fast = read_jsonl(self.dir / 'fast.jsonl')
        slow = read_jsonl(self.dir / 'slow.jsonl')
        baseline = read_jsonl(self.dir / 'baseline.jsonl')
        self.assertEqual(len(fast), 2)
        self.assertEqual([r['tokens'] for r in fast], [r['tokens'] for r in slow])
        self.assertEqual([r['tokens'] for r in baseline], [r['tokens'] for r in slow])
        self.assertTrue(all(r['tau'] == 1.0 for r in slow))

    def test_bench(self):
        run('bench', self.dir, '--extra-draft', f"copia={self.dir / 'draft.sprw'}",
            extra=['l_vis_sweep=4,8', 'repetitions=1', 'warmup=0'])
        table = pd.read_csv(self.dir / 'table5.csv')
        self.assertEqual(len(table), 8)
        self.assertEqual(sorted(set(table['label'])), ['copia', 'full_visual_draft', 'sparrow', 'vanilla'])
        vanilla = table[table['label'] == 'vanilla']
        self.assertEqual(vanilla['dsr'].tolist(), [1.0, 1.0])
        cost = pd.read_csv(self.dir / 'draft_cost.csv')
        sparrow = cost[cost['method'] == 'sparrow']
        self.assertEqual(sparrow['multiplies'].nunique(), 1)
        self.assertEqual(len(read_jsonl(self.dir / 'bench.jsonl')), 16)

    def test_bench_missing_extra_draft(self):
        with self.assertRaises(CommandError) as ctx:
            run('bench', self.dir, '--extra-draft', f"x={self.dir / 'absent.sprw'}", extra=['l_vis_sweep=4'])
        self.assertEqual(ctx.exception.returncode, 1)

    def test_analyze(self):
        run('analyze', self.dir, '--l-vis', '4', extra=['pruning_fractions=0,1'])
        self.assertEqual(len(pd.read_csv(self.dir / 'fig3a.csv')), 5)
        self.assertEqual(len(pd.read_csv(self.dir / 'fig3b.csv')), 8)
        retention = pd.read_csv(self.dir / 'retention.csv')
        self.assertEqual(retention.loc[0, 'visual'], 1.0)
        self.assertEqual(pd.read_csv(self.dir / 'pruning.csv')['fraction'].tolist(), [0.0, 1.0])
        record = json.loads((self.dir / 'analysis.json').read_text())
        self.assertEqual(len(record['truncation']), 5)
        self.assertEqual(len(record['visual_attention']), 4)
