"""
Configuracion de corridas: archivos planos ``key=value`` mas overrides de la linea de comandos.

Precedencia: ``SPARROW_DEFAULTS`` < archivo < ``--set key=value`` < flags explicitos.
La semilla sigue: ``--seed`` > clave ``seed`` en archivo/overrides > ``SPARROW_SEED`` > 0.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

from django.conf import settings
from dotenv import dotenv_values

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def coerce(key: str, raw, default):
    """Convierte ``raw`` (texto) al tipo del valor por defecto de ``key``."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            kind = type(default[0]) if default else float
            return [kind(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise ConfigError(f"valor invalido para {key}: {raw!r}")
    return text


def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    out = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ConfigError(f"override mal formado {pair!r}; se espera key=value")
        key, value = pair.split('=', 1)
        out[key.strip()] = value
    return out


def read_config_file(path) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no existe el archivo de configuracion {path}")
    values = dotenv_values(path, interpolate=False)
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigError(f"{path}: claves sin valor {missing}")
    return dict(values)


@dataclass(frozen=True)
class CliConfig:
    subcommand: str
    config_path: Optional[Path]
    seed: int
    out_dir: Path
    overrides: tuple = ()
    values: Dict[str, object] = field(default_factory=dict, compare=False)

    def __getitem__(self, key: str):
        return self.values[key]

    def model_config(self):
        from .model import ModelConfig

        keys = ('num_layers', 'hidden_dim', 'num_heads', 'vocab_size', 'max_positions', 'visual_alphabet',
                'ffn_mult', 'dtype')
        return ModelConfig(**{k: self.values[k] for k in keys})

    def task_config(self, model_cfg=None):
        from .bench.workloads import TaskConfig

        model_cfg = model_cfg or self.model_config()
        keys = ('num_slots', 'tagged', 'query_slots', 'chant_len', 'noise', 'jitter', 'codebook_seed')
        return TaskConfig.for_model(model_cfg, **{k: self.values[k] for k in keys})

    def tree_config(self):
        from .specdec import TreeConfig

        return TreeConfig.parse(self.values['tree'])


def load_config(subcommand: str, config_path=None, overrides: Sequence[str] = (), seed: Optional[int] = None,
                out_dir=None, flags: Optional[Dict[str, object]] = None) -> CliConfig:
    """
    Construye la configuracion efectiva y rechaza cualquier clave desconocida.

    Parámetros:
    -----------
    config_path : str o Path, opcional
        Archivo ``key=value``; si se indica y no existe es un error de configuracion.
    overrides : lista de str
        Pares ``key=value`` de ``--set``.
    seed : int, opcional
        Valor de ``--seed``.
    flags : dict, opcional
        Flags explicitos del subcomando (ya tipados); ``None`` significa no indicado.
    """
    defaults = settings.SPARROW_DEFAULTS
    values = dict(defaults)
    layers = []
    if config_path is not None:
        layers.append(read_config_file(config_path))
    layers.append(parse_overrides(overrides))
    layers.append({k: v for k, v in (flags or {}).items() if v is not None})
    seed_set = False
    for layer in layers:
        for key, raw in layer.items():
            if key not in defaults:
                raise ConfigError(f"clave de configuracion desconocida: {key}")
            values[key] = coerce(key, raw, defaults[key])
            seed_set = seed_set or key == 'seed'
    if seed is not None:
        values['seed'] = int(seed)
    elif not seed_set:
        values['seed'] = int(settings.SPARROW_SEED)
    out = Path(out_dir) if out_dir is not None else Path(settings.SPARROW_OUT_DIR)
    logger.debug("config %s seed=%d out_dir=%s", subcommand, values['seed'], out)
    return CliConfig(subcommand, Path(config_path) if config_path else None, values['seed'], out,
                     tuple(overrides or ()), values)
