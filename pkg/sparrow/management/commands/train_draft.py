from sparrow.bench.reports import write_jsonl
from sparrow.checkpoint import save_draft
from sparrow.draft import DraftConfig
from sparrow.train import build_examples, stage_configs, train_draft_two_stage

from ._base import SparrowCommand


class Command(SparrowCommand):
    help = "Entrena el borrador Sparrow en dos etapas (solo texto y luego multimodal)"

    flag_keys = {
        'stage1_epochs': 'stage1_epochs',
        'stage2_epochs': 'stage2_epochs',
        'alpha': 'alpha',
        'beta': 'beta',
        'mtp_depth': 'mtp_depth',
        'visual_source': 'visual_source',
    }

    def add_command_arguments(self, parser):
        parser.add_argument('--stage1-epochs', type=int, help='epocas de la etapa de solo texto')
        parser.add_argument('--stage2-epochs', type=int, help='epocas de la etapa multimodal (0 = borrador solo texto)')
        parser.add_argument('--alpha', type=float, help='peso de la perdida de tokens')
        parser.add_argument('--beta', type=float, help='peso de la regresion de estados')
        parser.add_argument('--mtp-depth', type=int, help='pasadas MTP por ejemplo (1 = sin MTP)')
        parser.add_argument('--visual-source', choices=['mid', 'raw', 'zero', 'none'],
                            help='filas visuales de entrenamiento')
        parser.add_argument('--target', help='checkpoint del objetivo (por defecto OUT_DIR/target.sprw)')
        parser.add_argument('--name', default='draft', help='nombre del checkpoint de salida')

    def run(self, cfg, options):
        target, _ = self.load_models(cfg, options, need_draft=False)
        task = cfg.task_config(target.cfg)
        text_examples, mm_examples = build_examples(target, task, cfg['train_examples'], cfg['train_l_vis'], cfg.seed)
        stage1, stage2 = stage_configs(cfg.values, cfg.seed)
        draft_cfg = DraftConfig.for_target(target.cfg, visual_source=cfg['visual_source'])
        draft, log = train_draft_two_stage(target, draft_cfg, stage1, stage2, text_examples, mm_examples)
        path = cfg.out_dir / f"{options['name']}.sprw"
        save_draft(draft, path)
        write_jsonl(log, cfg.out_dir / f"{options['name']}_log.jsonl")
        final = log[-1]['total'] if log else float('nan')
        self.success(f"borrador guardado en {path} ({len(log)} pasos, perdida final {final:.4f})")
