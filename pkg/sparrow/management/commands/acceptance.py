import json

from django.core.management import call_command
from django.core.management.base import CommandError

from sparrow.bench.acceptance import as_records, run_acceptance
from sparrow.checkpoint import load_target

from ._base import DRAFT_FILE, RUNTIME_ERROR, TARGET_FILE, SparrowCommand


class Command(SparrowCommand):
    help = "Entrena (o reutiliza) objetivo y borrador y evalua cada criterio de aceptacion (PASS/FAIL)"

    def add_command_arguments(self, parser):
        parser.add_argument('--retrain', action='store_true', help='ignora checkpoints existentes en OUT_DIR')

    def run(self, cfg, options):
        out = cfg.out_dir
        common = {'seed': cfg.seed, 'out_dir': str(out), 'set': list(cfg.overrides),
                  'config': str(cfg.config_path) if cfg.config_path else None, 'stdout': self.stdout}
        if options['retrain'] or not (out / TARGET_FILE).exists():
            call_command('train_target', **common)
        if options['retrain'] or not (out / DRAFT_FILE).exists():
            call_command('train_draft', **common)

        target, draft = self.load_models(cfg, options)
        target64 = load_target(out / TARGET_FILE, dtype='float64')
        target64.eval()
        results = run_acceptance(target, target64, draft, cfg.task_config(target.cfg), cfg.values, cfg.seed)
        for result in results:
            style = self.style.SUCCESS if result.passed else self.style.ERROR
            self.stdout.write(style(result.line()))
        (out / 'acceptance.json').write_text(json.dumps(as_records(results), indent=2, default=float))
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise CommandError(f"criterios fallidos: {', '.join(failed)}", returncode=RUNTIME_ERROR)
        self.success(f"{len(results)} criterios aprobados; detalle en {out / 'acceptance.json'}")
