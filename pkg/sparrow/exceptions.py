"""Jerarquia de errores de Sparrow. Los comandos de gestion la traducen a codigos de salida."""


class SparrowError(Exception):
    """Raiz de todos los errores del paquete."""


class ShapeError(SparrowError):
    """Dimensiones o longitudes incompatibles."""


class NumericError(SparrowError):
    """Entrada con valores no finitos o parametros fuera de rango."""


class DistributionError(SparrowError):
    """Vector de probabilidad invalido."""


class SequenceError(SparrowError):
    """Secuencia vacia, demasiado larga o mal formada."""


class MaskError(SparrowError):
    """Mascara de ancestros mal formada, prefijo que no es camino o arbol ciclico."""


class CheckpointError(SparrowError):
    """Archivo de checkpoint ausente, truncado o con cabecera incorrecta."""


class DivergenceError(SparrowError):
    """La perdida de entrenamiento dejo de ser finita."""


class ConfigError(SparrowError):
    """Configuracion invalida o con claves desconocidas."""
