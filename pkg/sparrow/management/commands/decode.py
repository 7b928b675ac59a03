from sparrow.bench.reports import read_jsonl, write_jsonl
from sparrow.bench.workloads import GROUNDED, Workload, gen_workload, prompts_from_records
from sparrow.exceptions import ConfigError
from sparrow.numkernel import Rng
from sparrow.specdec import decode, resolve_method

from ._base import SparrowCommand


class Command(SparrowCommand):
    help = "Decodifica prompts con sparrow, el borrador con visual completo o vanilla y emite JSON lines"

    flag_keys = {'tree': 'tree', 'temperature': 'temperature', 'method': 'method', 'max_tokens': 'max_tokens'}

    def add_command_arguments(self, parser):
        parser.add_argument('--prompt-file', help='JSON lines con text/visual/symbols; sin archivo se genera una carga')
        parser.add_argument('--tree', help='presupuesto del arbol T-D-W, p. ej. 30-4-8')
        parser.add_argument('--temperature', type=float, help='0 = greedy')
        parser.add_argument('--method', help='sparrow, baseline (full_visual_draft) o vanilla')
        parser.add_argument('--max-tokens', type=int, help='tokens maximos por prompt')
        parser.add_argument('--l-vis', type=int, default=64, help='L_vis de la carga generada')
        parser.add_argument('--target', help='checkpoint del objetivo')
        parser.add_argument('--draft', help='checkpoint del borrador')
        parser.add_argument('--output', default='decode.jsonl', help='archivo de salida dentro de OUT_DIR')

    def run(self, cfg, options):
        tree_cfg = cfg.tree_config()
        method = resolve_method(cfg['method'])
        if cfg['temperature'] < 0:
            raise ConfigError("la temperatura debe ser >= 0")
        target, draft = self.load_models(cfg, options, need_draft=method != 'vanilla')
        task = cfg.task_config(target.cfg)
        if options.get('prompt_file'):
            prompts = prompts_from_records(read_jsonl(options['prompt_file']), target.cfg.hidden_dim)
        else:
            workload = Workload(GROUNDED, options['l_vis'], num_prompts=cfg['num_prompts'], seed=cfg.seed)
            prompts = gen_workload(workload, task)
        records = []
        for i, prompt in enumerate(prompts):
            out = decode(target, draft, prompt.seq, tree_cfg, cfg['temperature'], cfg['max_tokens'], task.eos,
                         Rng(cfg.seed, stream=i + 1), method)
            records.append(out.stats.record(i, out.tokens))
        path = write_jsonl(records, cfg.out_dir / options['output'])
        calls = sum(r['target_calls'] for r in records)
        generated = sum(len(r['tokens']) for r in records)
        self.success(f"{len(records)} prompts decodificados con {method} ({tree_cfg}); "
                     f"tau={generated / calls if calls else 0.0:.3f}; salida en {path}")
