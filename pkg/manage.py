#!/usr/bin/env python
"""Utilidad de linea de comandos de Sparrow (entrenamiento, decodificacion y benchmarks)."""
import os
import sys


def main():
    """Ejecuta el subcomando pedido (acepta alias con guion como ``train-target``)."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'sparrowproject.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    from sparrow.cli import normalize_argv
    execute_from_command_line(normalize_argv(sys.argv))


if __name__ == '__main__':
    main()
