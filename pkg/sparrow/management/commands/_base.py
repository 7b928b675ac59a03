"""Base comun de los comandos de gestion: configuracion, semilla, directorio de salida y codigos de salida."""
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from sparrow.checkpoint import load_draft, load_target
from sparrow.conf import load_config
from sparrow.exceptions import CheckpointError, ConfigError, SparrowError

logger = logging.getLogger('sparrow.commands')

USAGE_ERROR = 2
RUNTIME_ERROR = 1

TARGET_FILE = 'target.sprw'
DRAFT_FILE = 'draft.sprw'


class SparrowCommand(BaseCommand):
    """
    Cada subcomando declara ``flag_keys`` (destino del flag -> clave de configuracion) e
    implementa ``run(cfg, options)``. Los errores de configuracion salen con codigo 2 y
    los de ejecucion con codigo 1.
    """
    flag_keys = {}

    def add_arguments(self, parser):
        parser.add_argument('--config', help='archivo key=value de configuracion')
        parser.add_argument('--seed', type=int, help='semilla (gana sobre el archivo y SPARROW_SEED)')
        parser.add_argument('--out-dir', help='directorio de salida')
        parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                            help='override de una clave de configuracion')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            flags = {key: options.get(dest) for dest, key in self.flag_keys.items()}
            cfg = load_config(self.subcommand, options.get('config'), options.get('set'), options.get('seed'),
                              options.get('out_dir'), flags)
            cfg.out_dir.mkdir(parents=True, exist_ok=True)
            self.run(cfg, options)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=USAGE_ERROR)
        except (SparrowError, OSError) as exc:
            logger.error("%s fallo: %s", self.subcommand, exc)
            raise CommandError(str(exc), returncode=RUNTIME_ERROR)

    @property
    def subcommand(self) -> str:
        return self.__class__.__module__.rsplit('.', 1)[-1]

    def run(self, cfg, options):
        raise NotImplementedError

    # -- utilidades -------------------------------------------------------

    def target_path(self, cfg, options) -> Path:
        return Path(options.get('target') or cfg.out_dir / TARGET_FILE)

    def draft_path(self, cfg, options, key: str = 'draft') -> Path:
        return Path(options.get(key) or cfg.out_dir / DRAFT_FILE)

    def load_models(self, cfg, options, need_draft: bool = True):
        target_path = self.target_path(cfg, options)
        if not target_path.exists():
            raise CheckpointError(f"no existe el checkpoint del objetivo {target_path}")
        target = load_target(target_path, dtype=cfg['dtype'])
        target.eval()
        draft = None
        if need_draft:
            draft_path = self.draft_path(cfg, options)
            if not draft_path.exists():
                raise CheckpointError(f"no existe el checkpoint del borrador {draft_path}")
            draft = load_draft(draft_path, target)
            draft.eval()
        return target, draft

    def success(self, message: str):
        self.stdout.write(self.style.SUCCESS(message))
