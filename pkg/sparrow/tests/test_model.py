import torch
from django.test import SimpleTestCase

from sparrow.exceptions import ConfigError, MaskError, SequenceError, ShapeError
from sparrow.model import (TextItem, TokenSequence, VisualItem, extract_states, modality_rows, previous_states,
                           truncate_visual_from_layer)

from .helpers import random_sequence, tiny_config, tiny_target


class ModelConfigTests(SimpleTestCase):
    def test_needs_four_layers(self):
        with self.assertRaises(ConfigError):
            tiny_config(num_layers=3)

    def test_heads_divide_width(self):
        with self.assertRaises(ConfigError):
            tiny_config(num_heads=3)

    def test_mid_and_penultimate_levels(self):
        cfg = tiny_config(num_layers=8)
        self.assertEqual((cfg.mid_layer, cfg.penultimate), (4, 7))


class TokenSequenceTests(SimpleTestCase):
    def test_visual_must_precede_text(self):
        items = [VisualItem(torch.zeros(16), 0), TextItem(3), VisualItem(torch.zeros(16), 1)]
        with self.assertRaises(SequenceError):
            TokenSequence.from_items(items, 16)

    def test_from_items_splits_blocks(self):
        seq = TokenSequence.from_items([VisualItem(torch.ones(16), 2), TextItem(5), TextItem(6)], 16)
        self.assertEqual((seq.l_vis, seq.l_txt, seq.text), (1, 2, (5, 6)))

    def test_validate_rejects_overlength(self):
        cfg = tiny_config(max_positions=8)
        with self.assertRaises(SequenceError):
            random_sequence(cfg, 4, 5).validate(cfg)

    def test_validate_rejects_empty(self):
        with self.assertRaises(SequenceError):
            TokenSequence.text_only([], 16).validate(tiny_config())

    def test_validate_rejects_bad_symbol(self):
        seq = TokenSequence(torch.zeros(1, 16), (9,), (1,))
        with self.assertRaises(SequenceError):
            seq.validate(tiny_config())

    def test_validate_rejects_bad_token(self):
        seq = TokenSequence(torch.zeros(1, 16), (0,), (1, 64))
        with self.assertRaises(SequenceError):
            seq.validate(tiny_config())

    def test_items_rebuild_sequence(self):
        seq = random_sequence(tiny_config(), 3, 4, seed=5)
        items = seq.items
        self.assertEqual([type(i) for i in items], [VisualItem] * 3 + [TextItem] * 4)
        rebuilt = TokenSequence.from_items(items, 16)
        self.assertTrue(torch.equal(rebuilt.visual, seq.visual))
        self.assertEqual((rebuilt.symbols, rebuilt.text), (seq.symbols, seq.text))

    def test_modality_rows(self):
        seq = random_sequence(tiny_config(), 2, 3)
        self.assertEqual(modality_rows(seq), ([0, 1], [2, 3, 4]))
        self.assertEqual(modality_rows(TokenSequence.text_only([1, 2], 16)), ([], [0, 1]))


class TargetModelTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.target = tiny_target(seed=3)
        cls.cfg = cls.target.cfg

    def test_prefill_shapes(self):
        seq = random_sequence(self.cfg, 5, 4)
        result = self.target.prefill(seq)
        self.assertEqual(tuple(result.logits.shape), (9, self.cfg.vocab_size))
        self.assertEqual(tuple(result.trace.states.shape), (self.cfg.num_layers + 1, 9, self.cfg.hidden_dim))
        self.assertEqual(result.cache.length, 9)

    def test_incremental_decode_matches_prefill(self):
        for seed in range(5):
            seq = random_sequence(self.cfg, 3, 7, seed=seed)
            full = self.target.prefill(seq).logits
            cache = self.target.prefill(TokenSequence(seq.visual, seq.symbols, seq.text[:2])).cache
            for i in range(2, seq.l_txt):
                step = self.target.decode_step(cache, seq.text[i])
                self.assertLess(float((step.logits[-1] - full[seq.l_vis + i]).abs().max()), 1e-10)

    def test_verify_chain_matches_decode(self):
        seq = random_sequence(self.cfg, 2, 3, seed=1)
        chain = [7, 8, 9]
        cache = self.target.prefill(seq).cache
        mask = torch.ones(3, 3, dtype=torch.bool).tril()
        verified = self.target.verify_batch(cache, chain, mask, [5, 6, 7])
        full = self.target.prefill(seq.extend(chain)).logits
        self.assertLess(float((verified.logits - full[5:]).abs().max()), 1e-10)

    def test_last_layer_recomputes_logits_from_penultimate_states(self):
        for l_vis in (0, 4):
            seq = random_sequence(self.cfg, l_vis, 5, seed=l_vis)
            result = self.target.prefill(seq)
            logits = self.target.finish_from_penultimate(result.trace.level(self.cfg.penultimate))
            self.assertLess(float((logits - result.logits).abs().max()), 1e-10)

    def test_prefill_rows_ignore_later_positions(self):
        seq = random_sequence(self.cfg, 4, 5, seed=6)
        base = self.target.prefill(seq)
        text = list(seq.text)
        text[2] = (text[2] + 1) % self.cfg.vocab_size
        visual = seq.visual.clone()
        visual[2] += 1.0
        # (secuencia alterada, primera fila alterada)
        cases = [(TokenSequence(seq.visual, seq.symbols, tuple(text)), 6),
                 (TokenSequence(visual, seq.symbols, seq.text), 2)]
        for other, row in cases:
            changed = self.target.prefill(other)
            self.assertTrue(torch.equal(changed.logits[:row], base.logits[:row]))
            self.assertTrue(torch.equal(changed.trace.states[:, :row], base.trace.states[:, :row]))
            self.assertFalse(torch.equal(changed.logits[row], base.logits[row]))

    def test_verify_rows_ignore_other_nodes(self):
        seq = random_sequence(self.cfg, 2, 3, seed=7)
        tree = torch.tensor([[1, 0, 0], [1, 1, 0], [1, 0, 1]], dtype=torch.bool)
        chain = torch.ones(3, 3, dtype=torch.bool).tril()
        # en el arbol el nodo 2 es hermano del 1; en la cadena es su hijo
        for mask, positions in ((tree, [5, 6, 6]), (chain, [5, 6, 7])):
            a = self.target.verify_batch(self.target.prefill(seq).cache, [10, 11, 12], mask, positions)
            b = self.target.verify_batch(self.target.prefill(seq).cache, [10, 11, 40], mask, positions)
            self.assertTrue(torch.equal(a.logits[:2], b.logits[:2]))
            self.assertFalse(torch.equal(a.logits[2], b.logits[2]))

    def test_commit_prefix_keeps_branch(self):
        seq = random_sequence(self.cfg, 2, 3, seed=2)
        cache = self.target.prefill(seq).cache
        mask = torch.tensor([[1, 0, 0], [1, 1, 0], [1, 0, 1]], dtype=torch.bool)
        self.target.verify_batch(cache, [10, 11, 12], mask, [5, 6, 6])
        cache.commit_prefix([0, 2])
        self.assertEqual(cache.length, 7)
        step = self.target.decode_step(cache, 13)
        full = self.target.prefill(seq.extend([10, 12, 13])).logits
        self.assertLess(float((step.logits[-1] - full[-1]).abs().max()), 1e-10)

    def test_commit_prefix_rejects_non_path(self):
        seq = random_sequence(self.cfg, 2, 3, seed=2)
        mask = torch.tensor([[1, 0, 0], [1, 1, 0], [1, 0, 1]], dtype=torch.bool)
        for keep in ([1], [0, 1, 2], [0, 5]):
            cache = self.target.prefill(seq).cache
            self.target.verify_batch(cache, [10, 11, 12], mask, [5, 6, 6])
            with self.assertRaises(MaskError):
                cache.commit_prefix(keep)

    def test_empty_commit_restores_length(self):
        seq = random_sequence(self.cfg, 2, 3)
        cache = self.target.prefill(seq).cache
        self.target.verify_batch(cache, [1, 2], torch.ones(2, 2, dtype=torch.bool).tril(), [5, 6])
        cache.commit_prefix([])
        self.assertEqual((cache.length, cache.keys[0].shape[-2]), (5, 5))

    def test_verify_rejects_malformed_mask(self):
        cache = self.target.prefill(random_sequence(self.cfg, 1, 2)).cache
        not_reflexive = torch.tensor([[1, 0], [1, 0]], dtype=torch.bool)
        with self.assertRaises(MaskError):
            self.target.verify_batch(cache, [1, 2], not_reflexive, [3, 4])
        with self.assertRaises(MaskError):
            self.target.verify_batch(cache, [1, 2], torch.ones(3, 3, dtype=torch.bool), [3, 4])

    def test_decode_past_max_positions(self):
        target = tiny_target(max_positions=6)
        cache = target.prefill(random_sequence(target.cfg, 2, 4)).cache
        with self.assertRaises(SequenceError):
            target.decode_step(cache, 1)


class TruncationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.target = tiny_target(seed=4)

    def test_full_depth_equals_prefill(self):
        seq = random_sequence(self.target.cfg, 4, 3)
        truncated = truncate_visual_from_layer(self.target, seq, self.target.cfg.num_layers)
        self.assertTrue(torch.equal(truncated, self.target.prefill(seq).logits))

    def test_layer_zero_ignores_visual_content(self):
        seq = random_sequence(self.target.cfg, 4, 3, seed=1)
        other = TokenSequence(seq.visual * -3.0 + 1.0, seq.symbols, seq.text)
        a = truncate_visual_from_layer(self.target, seq, 0)[4:]
        b = truncate_visual_from_layer(self.target, other, 0)[4:]
        self.assertLess(float((a - b).abs().max()), 1e-12)

    def test_x_out_of_range(self):
        with self.assertRaises(ConfigError):
            truncate_visual_from_layer(self.target, random_sequence(self.target.cfg, 1, 1), 9)


class StateExtractionTests(SimpleTestCase):
    def test_extract_states_levels(self):
        target = tiny_target()
        seq = random_sequence(target.cfg, 3, 4)
        trace = target.prefill(seq).trace
        mid, penult = extract_states(trace, seq, target.cfg)
        self.assertTrue(torch.equal(mid, trace.states[2][:3]))
        self.assertTrue(torch.equal(penult, trace.states[3][3:]))

    def test_extract_states_length_mismatch(self):
        target = tiny_target()
        trace = target.prefill(random_sequence(target.cfg, 3, 4)).trace
        with self.assertRaises(ShapeError):
            extract_states(trace, random_sequence(target.cfg, 3, 5), target.cfg)

    def test_previous_states_shift(self):
        level = torch.arange(12, dtype=torch.float64).reshape(6, 2)
        seq = TokenSequence(torch.zeros(2, 2), (0, 0), (1, 2, 3, 4))
        self.assertTrue(torch.equal(previous_states(level, seq), level[1:5]))
        text = TokenSequence.text_only([1, 2, 3], 2)
        shifted = previous_states(level[:3], text)
        self.assertTrue(torch.equal(shifted[0], torch.zeros(2, dtype=torch.float64)))
        self.assertTrue(torch.equal(shifted[1:], level[:2]))
