import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase

from sparrow.checkpoint import MAGIC, load_draft, load_target, save_draft, save_target
from sparrow.exceptions import CheckpointError

from .helpers import random_sequence, tiny_draft, tiny_target


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        self.target = tiny_target(seed=1, dtype='float32')
        self.draft = tiny_draft(self.target, seed=2, visual_source='raw')

    def test_target_round_trip(self):
        path = self.dir / 'target.sprw'
        save_target(self.target, path)
        loaded = load_target(path)
        self.assertEqual(loaded.cfg, self.target.cfg)
        seq = random_sequence(self.target.cfg, 2, 3)
        self.assertTrue(torch.equal(loaded.prefill(seq).logits, self.target.prefill(seq).logits))

    def test_load_as_float64(self):
        path = self.dir / 'target.sprw'
        save_target(self.target, path)
        loaded = load_target(path, dtype='float64')
        self.assertEqual(loaded.head.weight.dtype, torch.float64)
        self.assertTrue(torch.equal(loaded.head.weight.float(), self.target.head.weight))

    def test_draft_round_trip(self):
        path = self.dir / 'draft.sprw'
        save_draft(self.draft, path)
        loaded = load_draft(path, self.target)
        self.assertEqual(loaded.cfg.visual_source, 'raw')
        for name, value in self.draft.state_dict().items():
            self.assertTrue(torch.equal(loaded.state_dict()[name], value), name)
        self.assertIs(loaded.shared.head, self.target.head)

    def test_same_model_same_bytes(self):
        save_target(self.target, self.dir / 'a.sprw')
        save_target(tiny_target(seed=1, dtype='float32'), self.dir / 'b.sprw')
        self.assertEqual((self.dir / 'a.sprw').read_bytes(), (self.dir / 'b.sprw').read_bytes())
        self.assertEqual((self.dir / 'a.sprw').read_bytes()[:4], MAGIC)

    def test_wrong_tag(self):
        path = self.dir / 'target.sprw'
        save_target(self.target, path)
        with self.assertRaises(CheckpointError):
            load_draft(path, self.target)

    def test_bad_magic(self):
        path = self.dir / 'junk.sprw'
        path.write_bytes(b'NOPE' + bytes(32))
        with self.assertRaises(CheckpointError):
            load_target(path)

    def test_truncated_file(self):
        path = self.dir / 'target.sprw'
        save_target(self.target, path)
        path.write_bytes(path.read_bytes()[:-7])
        with self.assertRaises(CheckpointError):
            load_target(path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_target(self.dir / 'absent.sprw')
