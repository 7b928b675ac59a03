from pathlib import Path

from sparrow.bench.analysis import draft_step_cost
from sparrow.bench.metrics import BenchmarkReport, Engine, run_benchmark
from sparrow.bench.reports import write_draft_cost, write_fig1a, write_jsonl, write_table5
from sparrow.bench.workloads import GROUNDED, RANDOM_MODEL, Workload, gen_workload
from sparrow.checkpoint import load_draft
from sparrow.exceptions import CheckpointError, ConfigError
from sparrow.specdec import FULL_VISUAL_DRAFT, SPARROW

from ._base import SparrowCommand


class Command(SparrowCommand):
    help = "Barrido de L_vis: tau, DSR, ESR y desglose de prefill por metodo (table5.csv, fig1a.csv)"

    flag_keys = {'tree': 'tree', 'temperature': 'temperature', 'max_tokens': 'max_tokens',
                 'repetitions': 'repetitions', 'workers': 'workers'}

    def add_command_arguments(self, parser):
        parser.add_argument('--tree', help='presupuesto del arbol T-D-W')
        parser.add_argument('--temperature', type=float)
        parser.add_argument('--max-tokens', type=int)
        parser.add_argument('--repetitions', type=int, help='repeticiones medidas por prompt (mediana)')
        parser.add_argument('--workers', type=int, help='prompts en paralelo')
        parser.add_argument('--kind', default=GROUNDED, choices=[GROUNDED, RANDOM_MODEL])
        parser.add_argument('--target', help='checkpoint del objetivo')
        parser.add_argument('--draft', help='checkpoint del borrador sparrow')
        parser.add_argument('--baseline-draft', help='checkpoint para full_visual_draft (por defecto el de sparrow)')
        parser.add_argument('--extra-draft', action='append', default=[], metavar='LABEL=PATH',
                            help='borrador adicional medido con atencion VATA (brazos de ablacion)')

    def engines(self, cfg, options, target, draft):
        tree_cfg = cfg.tree_config()
        baseline = draft
        if options.get('baseline_draft'):
            baseline = self._load(options['baseline_draft'], target)
        engines = {
            SPARROW: Engine(SPARROW, draft, tree_cfg),
            FULL_VISUAL_DRAFT: Engine(FULL_VISUAL_DRAFT, baseline, tree_cfg),
        }
        for pair in options.get('extra_draft') or ():
            if '=' not in pair:
                raise ConfigError(f"--extra-draft mal formado {pair!r}; se espera LABEL=PATH")
            label, path = pair.split('=', 1)
            engines[label] = Engine(SPARROW, self._load(path, target), tree_cfg)
        return engines

    def _load(self, path, target):
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"no existe el checkpoint del borrador {path}")
        draft = load_draft(path, target)
        draft.eval()
        return draft

    def run(self, cfg, options):
        target, draft = self.load_models(cfg, options)
        task = cfg.task_config(target.cfg)
        engines = self.engines(cfg, options, target, draft)
        report = BenchmarkReport()
        costs = []
        for l_vis in cfg['l_vis_sweep']:
            prompts = gen_workload(Workload(options['kind'], l_vis, num_prompts=cfg['num_prompts'],
                                            seed=cfg.seed + l_vis), task)
            part = run_benchmark(target, prompts, engines, cfg['temperature'], cfg['max_tokens'], task.eos,
                                 cfg['repetitions'], cfg['warmup'], cfg['workers'], cfg.seed)
            report.extend(part)
            for method in (SPARROW, FULL_VISUAL_DRAFT) if prompts else ():
                multiplies, rows = draft_step_cost(target, engines[method].draft, prompts[0], method)
                costs.append((method, l_vis, multiplies, rows))
            for label in engines:
                summary = part.summary(label)
                self.stdout.write(f"l_vis={l_vis} {label}: tau={summary.tau:.3f} dsr={summary.dsr:.2f} "
                                  f"esr={summary.esr:.2f}")
        out = cfg.out_dir
        write_table5(report, out / 'table5.csv')
        write_fig1a(report, out / 'fig1a.csv')
        write_jsonl(report.run_rows(), out / 'bench.jsonl')
        write_draft_cost(costs, out / 'draft_cost.csv')
        self.success(f"benchmark de {len(cfg['l_vis_sweep'])} longitudes escrito en {out}")
