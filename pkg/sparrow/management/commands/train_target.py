from sparrow.bench.reports import write_jsonl
from sparrow.bench.workloads import GROUNDED, Workload, gen_workload, grounded_accuracy
from sparrow.checkpoint import save_target
from sparrow.train import TargetTrainConfig, pretrain_target

from ._base import TARGET_FILE, SparrowCommand


class Command(SparrowCommand):
    help = "Preentrena el objetivo de juguete sobre la tarea sintetica y escribe target.sprw"

    flag_keys = {'steps': 'target_steps', 'lr': 'target_lr'}

    def add_command_arguments(self, parser):
        parser.add_argument('--steps', type=int, help='pasos de optimizacion')
        parser.add_argument('--lr', type=float, help='tasa de aprendizaje')

    def run(self, cfg, options):
        model_cfg = cfg.model_config()
        task = cfg.task_config(model_cfg)
        train_cfg = TargetTrainConfig(lr=cfg['target_lr'], steps=cfg['target_steps'],
                                      batch_size=cfg['target_batch'], seed=cfg.seed, progress=cfg['progress'])
        model, log = pretrain_target(task, train_cfg, model_cfg, cfg['train_l_vis'])
        path = cfg.out_dir / TARGET_FILE
        save_target(model, path)
        write_jsonl(log, cfg.out_dir / 'target_log.jsonl')

        # exactitud sobre prompts retenidos (semillas distintas a las de entrenamiento)
        held_out = []
        for l_vis in cfg['train_l_vis']:
            held_out += gen_workload(Workload(GROUNDED, l_vis, num_prompts=cfg['num_prompts'],
                                              seed=cfg.seed + 100_003 + l_vis), task)
        accuracy = grounded_accuracy(model, held_out)
        self.success(f"objetivo guardado en {path} (loss final {log[-1]['loss'] if log else float('nan'):.4f}, "
                     f"exactitud {accuracy:.3f})")
