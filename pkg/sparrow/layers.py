"""Bloques comunes del objetivo y del borrador: RMSNorm, rotary, atencion y capa decodificadora."""
import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numkernel import masked_softmax, rmsnorm

# Filas de consulta por bloque al calcular la atencion (limita la memoria con L_vis grande)
QUERY_CHUNK = 1024


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rmsnorm(x, self.weight, self.eps)


def rotary(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """
    Aplica la codificacion rotatoria por indice absoluto.

    ``x`` tiene forma ``(..., H, n, hd)`` y ``positions`` forma ``(n,)``. Los angulos se
    calculan en float64 para que una posicion produzca el mismo seno/coseno sin importar
    con que otras filas viaje.
    """
    hd = x.shape[-1]
    half = hd // 2
    inv_freq = base ** (-torch.arange(0, half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


def causal_mask(n: int, past: int = 0) -> torch.Tensor:
    """Mascara ``n × (past+n)``: todo el pasado visible y causal dentro del bloque nuevo."""
    block = torch.ones(n, n, dtype=torch.bool).tril()
    return torch.cat((torch.ones(n, past, dtype=torch.bool), block), dim=1)


def attend(q, k, v, mask: Optional[torch.Tensor] = None, capture: Optional[torch.Tensor] = None):
    """
    Atencion multi-cabeza con mascara booleana (True = visible).

    Parámetros:
    -----------
    q : torch.Tensor
        Consultas ``(..., H, n, hd)``.
    k, v : torch.Tensor
        Claves y valores ``(..., H, T, hd)``.
    mask : torch.Tensor, opcional
        ``(n, T)`` o ``(..., n, T)``; ``None`` deja todo visible.
    capture : torch.Tensor, opcional
        Indices de filas de consulta cuyas probabilidades se devuelven.

    Retorna:
    --------
    tuple
        ``(contexto (..., H, n, hd), probabilidades (..., H, len(capture), T) o None)``
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    n = q.shape[-2]
    outs = []
    for start in range(0, n, QUERY_CHUNK):
        stop = min(n, start + QUERY_CHUNK)
        scores = torch.matmul(q[..., start:stop, :], k.transpose(-1, -2)) * scale
        if mask is None:
            probs = masked_softmax(scores, torch.ones_like(scores, dtype=torch.bool))
        else:
            probs = masked_softmax(scores, mask[..., start:stop, :].expand_as(scores) if mask.dim() > 2 else mask[start:stop])
        outs.append(torch.matmul(probs, v))
    context = outs[0] if len(outs) == 1 else torch.cat(outs, dim=-2)
    captured = None
    if capture is not None:
        scores = torch.matmul(q[..., capture, :], k.transpose(-1, -2)) * scale
        if mask is None:
            captured = masked_softmax(scores, torch.ones_like(scores, dtype=torch.bool))
        else:
            sub = mask[..., capture, :] if mask.dim() > 2 else mask[capture]
            captured = masked_softmax(scores, sub.expand_as(scores))
    return context, captured


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rope_base: float = 10000.0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.rope_base = rope_base
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def split(self, x):
        # (..., n, d) -> (..., H, n, hd)
        return x.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def merge(self, x):
        return x.transpose(-3, -2).flatten(-2)

    def project(self, x, positions):
        """Consultas, claves y valores con rotary aplicado a q y k."""
        q = rotary(self.split(self.wq(x)), positions, self.rope_base)
        k = rotary(self.split(self.wk(x)), positions, self.rope_base)
        v = self.split(self.wv(x))
        return q, k, v

    def forward(self, x, positions, mask=None, past=None, capture=None):
        q, k_new, v_new = self.project(x, positions)
        if past is not None:
            k = torch.cat((past[0], k_new), dim=-2)
            v = torch.cat((past[1], v_new), dim=-2)
        else:
            k, v = k_new, v_new
        context, probs = attend(q, k, v, mask, capture)
        return self.wo(self.merge(context)), k_new, v_new, probs


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.l1 = nn.Linear(dim, dim * mult, bias=False)
        self.l2 = nn.Linear(dim * mult, dim, bias=False)

    def forward(self, x):
        return self.l2(F.gelu(self.l1(x)))


class DecoderLayer(nn.Module):
    """Capa pre-norm: atencion + feed-forward con conexiones residuales."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, eps: float = 1e-6, rope_base: float = 10000.0):
        super().__init__()
        self.attn_norm = RMSNorm(dim, eps)
        self.attention = SelfAttention(dim, heads, rope_base)
        self.ffn_norm = RMSNorm(dim, eps)
        self.ffn = FeedForward(dim, ffn_mult)

    def forward(self, x, positions, mask=None, past=None, capture=None):
        a, k, v, probs = self.attention(self.attn_norm(x), positions, mask, past, capture)
        x = x + a
        x = x + self.ffn(self.ffn_norm(x))
        return x, k, v, probs
