"""
Ajustes de Django para el proyecto Sparrow.

El proyecto no sirve paginas web: Django aporta la configuracion, el logging,
los comandos de gestion (``manage.py train-target``, ``decode``...) y el
ejecutor de pruebas.
"""
import os
from os import getenv  # Lee variables de entorno del sistema.
from pathlib import Path

from dotenv import load_dotenv  # Carga variables de entorno desde un archivo .env.

# Cargar las variables de entorno
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Sin superficie web; la clave solo satisface el arranque de Django.
SECRET_KEY = getenv('SPARROW_SECRET_KEY', 'sparrow-offline-no-web-surface')

DEBUG = False

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'sparrow',
]

# Los resultados se escriben en archivos JSONL/CSV, no hay base de datos.
DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Semilla de respaldo cuando no se pasa --seed ni aparece en el archivo de configuracion
SPARROW_SEED = int(getenv('SPARROW_SEED', '0'))

# Directorio de salida por defecto (--out-dir lo reemplaza)
SPARROW_OUT_DIR = Path(getenv('SPARROW_OUT_DIR', str(BASE_DIR / 'runs')))

# Claves reconocidas en los archivos key=value y sus valores por defecto (escala de escritorio).
# Cualquier clave fuera de esta tabla se rechaza.
SPARROW_DEFAULTS = {
    'seed': 0,
    'progress': True,
    # modelo objetivo
    'num_layers': 8,
    'hidden_dim': 64,
    'num_heads': 4,
    'vocab_size': 256,
    'max_positions': 4608,
    'visual_alphabet': 16,
    'ffn_mult': 4,
    'dtype': 'float32',
    # tarea sintetica
    'num_slots': 8,
    'tagged': 4,
    'query_slots': 2,
    'chant_len': 24,
    'noise': True,
    'jitter': 0.05,
    'codebook_seed': 1234,
    'train_l_vis': [8, 16, 32, 64],
    # preentrenamiento del objetivo
    'target_lr': 2e-3,
    'target_steps': 1500,
    'target_batch': 16,
    # borrador
    'visual_source': 'mid',
    'draft_lr': 1e-3,
    'batch_size': 16,
    'stage1_epochs': 3,
    'stage2_epochs': 3,
    'alpha': 1.0,
    'beta': 1.0,
    'mtp_depth': 2,
    'train_examples': 2000,
    'train_visual_keep': 1.0,
    # decodificacion
    'tree': '30-4-8',
    'temperature': 0.0,
    'max_tokens': 32,
    'method': 'sparrow',
    # benchmark y analisis
    'l_vis_sweep': [64, 512, 1536, 4096],
    'num_prompts': 8,
    'repetitions': 5,
    'warmup': 1,
    'workers': 1,
    'pruning_fractions': [0.0, 0.25, 0.5, 0.75, 1.0],
    'ranking': 'last_instruction',
    'retention_threshold': 0.25,
}

# Configuracion de logging: un solo manejador de consola para la jerarquia "sparrow".
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'sparrow': {
            'handlers': ['console'],
            'level': os.getenv('SPARROW_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
