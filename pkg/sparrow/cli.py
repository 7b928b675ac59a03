"""Punto de entrada de la linea de comandos: alias con guion para los comandos de gestion."""

# Subcomandos documentados con guion -> nombre del comando de gestion de Django
ALIASES = {
    'train-target': 'train_target',
    'train-draft': 'train_draft',
}


def normalize_argv(argv):
    """Reescribe ``manage.py train-target ...`` como ``manage.py train_target ...``."""
    argv = list(argv)
    if len(argv) > 1:
        argv[1] = ALIASES.get(argv[1], argv[1])
    return argv
