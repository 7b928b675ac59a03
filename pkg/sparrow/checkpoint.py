"""
Contenedor binario de checkpoints.

Formato (little-endian):

    magic  b"SPRW" | tag (4 bytes, b"TRGT" o b"DRFT") | version u32 | n_fields u32
    n_fields × i64 (campos enteros de la configuracion)
    n_tensors u32, y por tensor: len(nombre) u32 | nombre utf-8 | ndim u32 | dims u32... | datos float32 row-major

Los tensores se escriben ordenados por nombre, asi dos entrenamientos con la misma
semilla producen archivos identicos byte a byte.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'SPRW'
TARGET_TAG = b'TRGT'
DRAFT_TAG = b'DRFT'
FORMAT_VERSION = 1


def write_container(path, tag: bytes, fields: List[int], tensors: Dict[str, torch.Tensor]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, tag, struct.pack('<II', FORMAT_VERSION, len(fields))]
    chunks.append(struct.pack(f'<{len(fields)}q', *[int(v) for v in fields]))
    chunks.append(struct.pack('<I', len(tensors)))
    for name in sorted(tensors):
        data = tensors[name].detach().to(torch.float32).contiguous().cpu().numpy()
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)) + encoded)
        chunks.append(struct.pack(f'<I{data.ndim}I', data.ndim, *data.shape))
        chunks.append(data.astype('<f4').tobytes(order='C'))
    path.write_bytes(b''.join(chunks))
    logger.info("checkpoint %s escrito (%d tensores)", path, len(tensors))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(f"{self.path}: archivo truncado")
        out = self.blob[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, tag: bytes) -> Tuple[List[int], Dict[str, torch.Tensor]]:
    """
    Lee un contenedor y valida magic, tag y version.

    Retorna:
    --------
    tuple
        ``(campos de configuracion, tensores por nombre en float32)``
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no existe el checkpoint {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: no es un checkpoint SPRW")
    found = reader.take(4)
    if found != tag:
        raise CheckpointError(f"{path}: se esperaba tag {tag!r} y se encontro {found!r}")
    version, n_fields = reader.unpack('<II')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: version {version} no soportada")
    fields = list(reader.unpack(f'<{n_fields}q'))
    (n_tensors,) = reader.unpack('<I')
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = reader.unpack('<I')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<I')
        dims = reader.unpack(f'<{ndim}I')
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(dims)
        tensors[name] = torch.from_numpy(data.astype(np.float32))
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"{path}: bytes sobrantes al final")
    return fields, tensors


def save_target(model, path):
    write_container(path, TARGET_TAG, model.cfg.header(), model.state_dict())


def load_target(path, dtype: str = 'float32'):
    """Reconstruye un ``TargetModel`` desde su checkpoint."""
    from .model import ModelConfig, TargetModel

    fields, tensors = read_container(path, TARGET_TAG)
    if len(fields) != len(ModelConfig.HEADER_FIELDS):
        raise CheckpointError(f"{path}: cabecera con {len(fields)} campos")
    cfg = ModelConfig.from_header(fields, dtype=dtype)
    model = TargetModel(cfg)
    _load_state(model, tensors, path)
    return model


def save_draft(draft, path):
    write_container(path, DRAFT_TAG, draft.cfg.header(), draft.state_dict())


def load_draft(path, target):
    """Reconstruye un ``DraftModel`` y lo ata a la tabla de embeddings y la cabeza del objetivo."""
    from .draft import DraftConfig, DraftModel

    fields, tensors = read_container(path, DRAFT_TAG)
    cfg = DraftConfig.from_header(fields)
    draft = DraftModel(cfg, target)
    _load_state(draft, tensors, path)
    return draft


def _load_state(module, tensors, path):
    expected = module.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensores faltantes {missing} sobrantes {extra}")
    for name, value in tensors.items():
        if tuple(expected[name].shape) != tuple(value.shape):
            raise CheckpointError(f"{path}: forma de {name} {tuple(value.shape)} != {tuple(expected[name].shape)}")
    dtype = next(module.parameters()).dtype
    module.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})
