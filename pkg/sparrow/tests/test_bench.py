import tempfile
from pathlib import Path

import pandas as pd
import torch
from django.test import SimpleTestCase

from sparrow.bench.acceptance import Criterion, attention_exactness, table5_arithmetic
from sparrow.bench.analysis import (AnalysisReport, attention_flow, attention_from_trace, draft_step_cost,
                                    layer_truncation_experiment, pruning_sweep, retention_experiment)
from sparrow.bench.metrics import Engine, MethodSummary, ratio, run_benchmark
from sparrow.bench.reports import (TABLE5_COLUMNS, read_jsonl, write_fig3b, write_jsonl, write_pruning,
                                   write_table5)
from sparrow.bench.workloads import (GROUNDED, RANDOM_MODEL, Workload, chant, gen_workload, grounded_accuracy,
                                     prompts_from_records, prompts_to_records, training_sequence)
from sparrow.exceptions import CheckpointError, ConfigError, SequenceError
from sparrow.model import truncate_visual_from_layer
from sparrow.specdec import FULL_VISUAL_DRAFT, SPARROW, VANILLA, TreeConfig

from .helpers import tiny_draft, tiny_target, tiny_task


class WorkloadTests(SimpleTestCase):
    def setUp(self):
        self.target = tiny_target(seed=3)
        self.task = tiny_task(self.target.cfg)

    def test_workload_is_pure_function_of_seed(self):
        a = gen_workload(Workload(GROUNDED, 6, num_prompts=3, seed=11), self.task)
        b = gen_workload(Workload(GROUNDED, 6, num_prompts=3, seed=11), self.task)
        for x, y in zip(a, b):
            self.assertTrue(torch.equal(x.seq.visual, y.seq.visual))
            self.assertEqual(x.seq.text, y.seq.text)
            self.assertEqual(x.reference, y.reference)
        c = gen_workload(Workload(GROUNDED, 6, num_prompts=3, seed=12), self.task)
        self.assertFalse(all(torch.equal(x.seq.visual, z.seq.visual) for x, z in zip(a, c)))

    def test_grounded_prompt_shape(self):
        prompt = gen_workload(Workload(GROUNDED, 5, num_prompts=1, seed=0), self.task)[0]
        self.assertEqual(prompt.seq.l_vis, 5)
        self.assertEqual(prompt.seq.text[0], self.task.bos)
        self.assertEqual(prompt.seq.text[-1], self.task.answer)
        self.assertEqual(len(prompt.reference), self.task.query_slots)
        self.assertTrue(all(0 <= s < self.task.visual_alphabet for s in prompt.reference))

    def test_zero_queries_gives_empty_reference(self):
        prompt = gen_workload(Workload(GROUNDED, 4, num_prompts=1, seed=0, queries=0), self.task)[0]
        self.assertEqual(prompt.reference, ())
        self.assertEqual(grounded_accuracy(self.target, [prompt]), 0.0)

    def test_random_model_has_no_reference(self):
        prompts = gen_workload(Workload(RANDOM_MODEL, 3, text_len=5, num_prompts=2, seed=1), self.task)
        self.assertEqual([p.reference for p in prompts], [(), ()])
        self.assertEqual(prompts[0].seq.l_txt, 5)

    def test_too_few_visual_items(self):
        with self.assertRaises(SequenceError):
            gen_workload(Workload(GROUNDED, 1, num_prompts=1), self.task)

    def test_overlength(self):
        with self.assertRaises(SequenceError):
            gen_workload(Workload(RANDOM_MODEL, 250, text_len=10, num_prompts=1), self.task)

    def test_unknown_kind(self):
        with self.assertRaises(ConfigError):
            Workload('images', 4)

    def test_chant_depends_on_answers(self):
        first = chant([0], self.task)
        self.assertEqual(len(first), self.task.chant_len)
        self.assertEqual(first, chant([0], self.task))
        self.assertNotEqual(first, chant([1], self.task))
        self.assertEqual(chant([0], tiny_task(self.target.cfg, chant_len=0)), [])

    def test_training_sequence_ends_with_eos(self):
        prompt = gen_workload(Workload(GROUNDED, 4, num_prompts=1, seed=2), self.task)[0]
        seq = training_sequence(prompt, self.task)
        self.assertEqual(seq.text[-1], self.task.eos)
        self.assertEqual(len(seq), len(prompt.seq) + len(prompt.reference) + self.task.chant_len + 1)

    def test_prompt_records(self):
        prompts = gen_workload(Workload(GROUNDED, 4, num_prompts=2, seed=5), self.task)
        loaded = prompts_from_records(prompts_to_records(prompts), self.target.cfg.hidden_dim)
        self.assertEqual(loaded[1].seq.text, prompts[1].seq.text)
        self.assertEqual(loaded[1].reference, prompts[1].reference)
        self.assertTrue(torch.equal(loaded[1].seq.visual, prompts[1].seq.visual))

    def test_text_only_record(self):
        loaded = prompts_from_records([{'text': [1, 2, 3]}], self.target.cfg.hidden_dim)
        self.assertEqual(loaded[0].seq.l_vis, 0)
        with self.assertRaises(SequenceError):
            prompts_from_records([{'visual': []}], self.target.cfg.hidden_dim)


class MetricsTests(SimpleTestCase):
    def setUp(self):
        self.target = tiny_target(seed=4)
        self.draft = tiny_draft(self.target, seed=5)
        self.task = tiny_task(self.target.cfg)
        self.prompts = gen_workload(Workload(GROUNDED, 6, num_prompts=2, seed=9), self.task)

    def test_ratio(self):
        self.assertEqual(ratio(3, 0), 0.0)
        self.assertAlmostEqual(ratio(455.10, 168.69), 2.6978, places=4)

    def test_derive(self):
        vanilla = MethodSummary(VANILLA, VANILLA, 64, 100, 101, 1.0, 4.0, 5.0).derive(
            MethodSummary(VANILLA, VANILLA, 64, 100, 101, 1.0, 4.0, 5.0))
        s = MethodSummary(SPARROW, SPARROW, 64, 100, 26, 11.46, 2.0, 29.59).derive(vanilla)
        self.assertAlmostEqual(s.tau, 100 / 26)
        self.assertEqual(round(100 * s.prefill_ratio, 1), 38.7)
        self.assertAlmostEqual(s.latency_per_step, 2.0 / 25)
        self.assertAlmostEqual(s.dsr, 2.0)
        self.assertAlmostEqual(s.esr, 5.0 / 29.59)
        self.assertEqual((vanilla.dsr, vanilla.esr), (1.0, 1.0))

    def test_benchmark_adds_vanilla_reference(self):
        report = run_benchmark(self.target, self.prompts, {SPARROW: Engine(SPARROW, self.draft)}, max_tokens=6,
                               stop_token=self.task.eos, repetitions=1, warmup=0)
        self.assertEqual({s.label for s in report.summaries}, {SPARROW, VANILLA})
        self.assertEqual(len(report.runs), 4)
        vanilla = report.summary(VANILLA)
        self.assertEqual((vanilla.dsr, vanilla.esr), (1.0, 1.0))
        self.assertEqual(vanilla.generated_tokens, vanilla.target_calls)
        by_prompt = {(r.label, r.prompt_id): r.tokens for r in report.runs}
        for i in range(len(self.prompts)):
            self.assertEqual(by_prompt[(SPARROW, i)], by_prompt[(VANILLA, i)])
        self.assertTrue(table5_arithmetic(report).passed)

    def test_missing_draft(self):
        with self.assertRaises(CheckpointError):
            run_benchmark(self.target, self.prompts, {SPARROW: Engine(SPARROW)}, repetitions=1, warmup=0)

    def test_bad_counts(self):
        with self.assertRaises(ConfigError):
            run_benchmark(self.target, self.prompts, {}, repetitions=0)
        with self.assertRaises(ConfigError):
            run_benchmark(self.target, self.prompts, {}, workers=0)

    def test_workers_do_not_change_tokens(self):
        engines = {SPARROW: Engine(SPARROW, self.draft, TreeConfig(6, 3, 4))}
        serial = run_benchmark(self.target, self.prompts, engines, max_tokens=6, repetitions=1, warmup=0)
        threaded = run_benchmark(self.target, self.prompts, engines, max_tokens=6, repetitions=1, warmup=0,
                                 workers=2)
        self.assertEqual([r.tokens for r in serial.runs], [r.tokens for r in threaded.runs])


class ReportTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_table5_columns(self):
        target = tiny_target(seed=6)
        prompts = gen_workload(Workload(RANDOM_MODEL, 2, text_len=3, num_prompts=1), tiny_task(target.cfg))
        report = run_benchmark(target, prompts, {}, max_tokens=3, repetitions=1, warmup=0)
        frame = pd.read_csv(write_table5(report, self.dir / 'table5.csv'))
        self.assertEqual(list(frame.columns), TABLE5_COLUMNS)
        self.assertEqual(frame.loc[0, 'label'], VANILLA)

    def test_fig3b_has_one_row_per_layer_and_head(self):
        visual = torch.full((4, 2), 0.25, dtype=torch.float64)
        frame = pd.read_csv(write_fig3b(visual, 1.0 - visual, self.dir / 'fig3b.csv'))
        self.assertEqual(len(frame), 8)
        self.assertEqual(list(frame.columns), ['layer', 'head', 'visual_attention', 'text_attention'])
        self.assertEqual(frame['text_attention'].tolist(), [0.75] * 8)

    def test_pruning_csv(self):
        frame = pd.read_csv(write_pruning([(0.0, 1.5), (1.0, 2.0)], 'random', self.dir / 'pruning.csv'))
        self.assertEqual(frame['ranking'].tolist(), ['random', 'random'])

    def test_jsonl(self):
        path = write_jsonl([{'prompt_id': 0, 'tokens': [1, 2]}], self.dir / 'out.jsonl')
        self.assertEqual(read_jsonl(path), [{'prompt_id': 0, 'tokens': [1, 2]}])
        self.assertEqual(read_jsonl(write_jsonl([], self.dir / 'empty.jsonl')), [])


class AnalysisTests(SimpleTestCase):
    def setUp(self):
        self.target = tiny_target(seed=8)
        self.task = tiny_task(self.target.cfg)
        self.prompts = gen_workload(Workload(GROUNDED, 6, num_prompts=3, seed=13), self.task)

    def test_truncation_at_depth_equals_native(self):
        series = layer_truncation_experiment(self.target, self.prompts)
        self.assertEqual([x for x, _ in series], list(range(self.target.cfg.num_layers + 1)))
        self.assertEqual(series[-1][1], grounded_accuracy(self.target, self.prompts))
        seq = self.prompts[0].seq
        self.assertTrue(torch.equal(truncate_visual_from_layer(self.target, seq, self.target.cfg.num_layers),
                                    self.target.prefill(seq).logits))

    def test_attention_sums_to_one(self):
        visual, text = attention_flow(self.target, self.prompts[0])
        self.assertEqual(tuple(visual.shape), (self.target.cfg.num_layers, self.target.cfg.num_heads))
        self.assertTrue(torch.allclose(visual + text, torch.ones_like(visual), atol=1e-12))

    def test_attention_matches_recompute(self):
        for prompt in self.prompts:
            visual, text = attention_flow(self.target, prompt)
            visual_ref, text_ref = attention_from_trace(self.target, prompt)
            self.assertLessEqual(float((visual - visual_ref).abs().max()), 1e-6)
            self.assertLessEqual(float((text - text_ref).abs().max()), 1e-6)
        self.assertTrue(attention_exactness(self.target, self.prompts[:2]).passed)

    def test_attention_needs_text(self):
        prompt = gen_workload(Workload(RANDOM_MODEL, 3, text_len=0, num_prompts=1), self.task)[0]
        with self.assertRaises(SequenceError):
            attention_flow(self.target, prompt)

    def test_retention_level_zero_is_exact(self):
        visual, text, crossing = retention_experiment(self.target, self.prompts)
        self.assertEqual(len(visual), self.target.cfg.num_layers + 1)
        self.assertEqual((visual[0], text[0]), (1.0, 1.0))
        self.assertIsNone(retention_experiment(self.target, self.prompts, threshold=-2.0)[2])
        self.assertEqual(retention_experiment(self.target, self.prompts, threshold=2.0)[2], 0)

    def test_report_record(self):
        report = AnalysisReport(truncation=[(0, 0.25)], visual_retention=[1.0], text_retention=[1.0])
        record = report.as_record()
        self.assertEqual(record['truncation'], [[0, 0.25]])
        self.assertEqual(record['visual_attention'], [])
        self.assertIsNone(record['visual_threshold_level'])

    def test_pruning_fraction_range(self):
        draft = tiny_draft(self.target, seed=1)
        with self.assertRaises(ConfigError):
            pruning_sweep(self.target, draft, self.prompts, [1.5])
        series = pruning_sweep(self.target, draft, self.prompts[:1], [0.0, 1.0], max_tokens=4)
        self.assertEqual([f for f, _ in series], [0.0, 1.0])
        self.assertTrue(all(tau >= 1.0 for _, tau in series))

    def test_draft_cost(self):
        draft = tiny_draft(self.target, seed=1)
        costs = {}
        for l_vis in (4, 16):
            prompt = gen_workload(Workload(GROUNDED, l_vis, num_prompts=1, seed=l_vis), self.task)[0]
            costs[l_vis] = (draft_step_cost(self.target, draft, prompt, SPARROW),
                            draft_step_cost(self.target, draft, prompt, FULL_VISUAL_DRAFT))
        self.assertEqual(costs[4][0], costs[16][0])
        self.assertGreater(costs[16][1][0], costs[4][1][0])
        self.assertEqual(costs[16][1][1] - costs[4][1][1], 12)


class CriterionTests(SimpleTestCase):
    def test_line(self):
        self.assertEqual(Criterion('x', True, {'tau': 2.0, 'n': 3}).line(), 'PASS x tau=2 n=3')
        self.assertEqual(Criterion('y', False).line(), 'FAIL y')
