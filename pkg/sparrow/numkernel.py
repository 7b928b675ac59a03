"""
Nucleos numericos deterministas sobre los que se construye el resto del paquete.

Las matrices son tensores ``torch`` de dos dimensiones (row-major, float32 en el
modelo). Las acumulaciones de los oraculos se hacen en float64.
"""
import math

import numpy as np
import torch

from .exceptions import DistributionError, NumericError, ShapeError

_MASK64 = (1 << 64) - 1


class Rng:
    """
    Generador basado en contador (Philox-4x64) con semilla de 64 bits.

    La clave de Philox es exactamente ``(seed, stream)``, sin mezcla previa, asi
    que la secuencia de extracciones es la misma en cualquier plataforma.
    Un ``Rng`` tiene un solo duenio: no se comparte entre hilos.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> "Rng":
        """Flujo independiente con la misma semilla (por ejemplo, uno por prompt)."""
        return Rng(self.seed, stream)

    def uniform(self) -> float:
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def gumbel(self, n: int) -> np.ndarray:
        return self._gen.gumbel(size=n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def torch_generator(self) -> torch.Generator:
        """Generador de torch derivado (inicializacion de pesos, barajado)."""
        gen = torch.Generator()
        gen.manual_seed(int(self._gen.integers(0, 2**62)))
        return gen


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contiene valores no finitos")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Producto de matrices con acumulacion en float64.

    Parámetros:
    -----------
    a : torch.Tensor
        Matriz ``rows × k``.
    b : torch.Tensor
        Matriz ``k × cols``.

    Retorna:
    --------
    torch.Tensor
        ``a @ b`` en el tipo promovido de las entradas.
    """
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul espera matrices, recibio {tuple(a.shape)} y {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: a.cols={a.shape[1]} != b.rows={b.shape[0]}")
    _check_finite(a, "a")
    _check_finite(b, "b")
    out_dtype = torch.promote_types(a.dtype, b.dtype)
    if not out_dtype.is_floating_point:
        out_dtype = torch.float64
    return (a.to(torch.float64) @ b.to(torch.float64)).to(out_dtype)


def softmax(v: torch.Tensor, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Softmax estable (resta del maximo) con temperatura; la suma se acumula en float64."""
    if temperature is None or not temperature > 0:
        raise NumericError(f"temperatura debe ser > 0, recibio {temperature}")
    _check_finite(v, "softmax")
    if not v.dtype.is_floating_point:
        v = v.to(torch.float64)
    x = v / temperature if temperature != 1.0 else v
    x = x - x.amax(dim=dim, keepdim=True)
    e = torch.exp(x)
    total = e.sum(dim=dim, keepdim=True, dtype=torch.float64)
    return e / total.to(e.dtype)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax por filas ignorando posiciones con ``mask == False``. Cada fila debe tener al menos un True."""
    filled = scores.masked_fill(~mask, float('-inf'))
    top = filled.amax(dim=-1, keepdim=True)
    e = torch.exp(filled - top)
    total = e.sum(dim=-1, keepdim=True, dtype=torch.float64)
    return e / total.to(e.dtype)


def rmsnorm(v: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """out = gain * v / sqrt(mean(v^2) + eps) sobre la ultima dimension."""
    if v.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rmsnorm: longitud {v.shape[-1]} != ganancia {gain.shape[-1]}")
    ms = v.to(torch.float64).pow(2).mean(dim=-1, keepdim=True)
    scale = torch.rsqrt(ms + eps).to(v.dtype)
    return gain * (v * scale)


def sample_categorical(p, rng: Rng) -> int:
    """
    Extrae un indice ``i`` con probabilidad ``p[i]`` por inversion de la CDF.

    Consume exactamente un uniforme del ``Rng``.
    """
    probs = p.detach().to(torch.float64).cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise DistributionError("se esperaba un vector de probabilidad no vacio")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise DistributionError("probabilidades negativas o no finitas")
    total = probs.sum()
    if abs(total - 1.0) > 1e-6:
        raise DistributionError(f"las probabilidades suman {total:.9f}")
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side='right'))
    if idx >= probs.size:
        idx = int(np.flatnonzero(probs > 0)[-1])
    return idx


def cosine_similarity(u: torch.Tensor, v: torch.Tensor):
    """
    Similitud coseno sobre la ultima dimension, calculada en float64.

    Con vectores 1-D devuelve un ``float``; con lotes devuelve un tensor por fila.
    ``u == v`` da exactamente 1.0.
    """
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: {tuple(u.shape)} != {tuple(v.shape)}")
    a = u.to(torch.float64)
    b = v.to(torch.float64)
    nu = (a * a).sum(dim=-1)
    nv = (b * b).sum(dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise NumericError("cosine_similarity no esta definida para el vector cero")
    sim = ((a * b).sum(dim=-1) / torch.sqrt(nu * nv)).clamp(-1.0, 1.0)
    if sim.dim() == 0:
        return float(sim)
    return sim


def gumbel_top_k(logp: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """Muestreo sin reemplazo de ``k`` indices (truco Gumbel-top-k), en orden de extraccion."""
    keys = np.where(np.isfinite(logp), logp + rng.gumbel(logp.size), -math.inf)
    order = np.argsort(-keys, kind='stable')
    return order[:k]
