import json

from sparrow.bench.analysis import (AnalysisReport, attention_flow_experiment, layer_truncation_experiment,
                                    pruning_sweep, retention_experiment)
from sparrow.bench.reports import write_fig3a, write_fig3b, write_pruning, write_retention
from sparrow.bench.workloads import GROUNDED, Workload, gen_workload
from sparrow.specdec import RANKINGS

from ._base import SparrowCommand


class Command(SparrowCommand):
    help = "Experimentos de diagnostico: truncado por capa, flujo de atencion, retencion y poda visual"

    flag_keys = {'ranking': 'ranking', 'threshold': 'retention_threshold'}

    def add_command_arguments(self, parser):
        parser.add_argument('--l-vis', type=int, default=64, help='L_vis de la carga analizada')
        parser.add_argument('--ranking', choices=RANKINGS, help='criterio de la poda visual')
        parser.add_argument('--threshold', type=float, help='umbral de retencion visual')
        parser.add_argument('--skip-pruning', action='store_true', help='omite el barrido (no requiere borrador)')
        parser.add_argument('--target', help='checkpoint del objetivo')
        parser.add_argument('--draft', help='checkpoint del borrador para el barrido de poda')

    def run(self, cfg, options):
        target, draft = self.load_models(cfg, options, need_draft=not options['skip_pruning'])
        task = cfg.task_config(target.cfg)
        prompts = gen_workload(Workload(GROUNDED, options['l_vis'], num_prompts=cfg['num_prompts'],
                                        seed=cfg.seed + options['l_vis']), task)
        out = cfg.out_dir

        report = AnalysisReport()
        report.truncation = layer_truncation_experiment(target, prompts)
        write_fig3a(report.truncation, out / 'fig3a.csv')
        report.attention, report.text_attention = attention_flow_experiment(target, prompts)
        write_fig3b(report.attention, report.text_attention, out / 'fig3b.csv')
        report.visual_retention, report.text_retention, report.visual_threshold_level = retention_experiment(
            target, prompts, cfg['retention_threshold'])
        write_retention(report.visual_retention, report.text_retention, out / 'retention.csv')
        if draft is not None:
            series = pruning_sweep(target, draft, prompts, cfg['pruning_fractions'], cfg['ranking'],
                                   cfg.tree_config(), cfg['max_tokens'], task.eos)
            write_pruning(series, cfg['ranking'], out / 'pruning.csv')

        (out / 'analysis.json').write_text(json.dumps(report.as_record(), indent=2))
        native = report.truncation[-1][1]
        self.success(f"analisis escrito en {out} (exactitud nativa {native:.3f}, "
                     f"nivel de umbral visual {report.visual_threshold_level})")
