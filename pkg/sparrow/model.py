"""
Modelo objetivo: transformador decodificador multimodal de juguete.

Acepta secuencias con un bloque visual contiguo seguido de texto, expone los estados
ocultos de todas las capas (de ahi salen ``h^{m*}`` y ``h^h``), soporta prefill y
decodificacion con cache KV, verificacion de arboles y truncado visual por capa.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn

from .exceptions import ConfigError, MaskError, SequenceError, ShapeError
from .layers import DecoderLayer, RMSNorm, causal_mask

logger = logging.getLogger(__name__)

VISUAL = 'visual'
TEXT = 'text'

_DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    hidden_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 256
    max_positions: int = 4608
    visual_alphabet: int = 16
    ffn_mult: int = 4
    dtype: str = 'float32'
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    # Campos que viajan en la cabecera del checkpoint (enteros little-endian)
    HEADER_FIELDS = ('num_layers', 'hidden_dim', 'num_heads', 'vocab_size',
                     'max_positions', 'visual_alphabet', 'ffn_mult')

    def __post_init__(self):
        if self.num_layers < 4:
            raise ConfigError(f"num_layers debe ser >= 4 (m* y la penultima capa distintas), recibio {self.num_layers}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim={self.hidden_dim} no es divisible por num_heads={self.num_heads}")
        if (self.hidden_dim // self.num_heads) % 2:
            raise ConfigError("la dimension por cabeza debe ser par para rotary")
        if min(self.vocab_size, self.max_positions, self.visual_alphabet, self.ffn_mult) < 1:
            raise ConfigError("vocab_size, max_positions, visual_alphabet y ffn_mult deben ser positivos")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype desconocido: {self.dtype}")

    @property
    def mid_layer(self) -> int:
        """Nivel m* = mitad de las capas del objetivo."""
        return self.num_layers // 2

    @property
    def penultimate(self) -> int:
        """Nivel de la penultima capa (salida de la capa M-1, entrada de la ultima)."""
        return self.num_layers - 1

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def header(self) -> List[int]:
        return [getattr(self, name) for name in self.HEADER_FIELDS]

    @classmethod
    def from_header(cls, values: Sequence[int], **extra) -> 'ModelConfig':
        return cls(**dict(zip(cls.HEADER_FIELDS, (int(v) for v in values))), **extra)


@dataclass(frozen=True, eq=False)
class VisualItem:
    embedding: torch.Tensor
    symbol_id: int


@dataclass(frozen=True)
class TextItem:
    token_id: int


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """
    Secuencia con un bloque visual contiguo (embeddings continuos + simbolo de verdad)
    seguido por tokens de texto. La contiguidad se garantiza por construccion.
    """
    visual: torch.Tensor
    symbols: tuple = ()
    text: tuple = ()

    def __post_init__(self):
        if self.visual.dim() != 2:
            raise ShapeError("el bloque visual debe ser una matriz L_vis × d")
        if self.visual.shape[0] != len(self.symbols):
            raise ShapeError(f"{self.visual.shape[0]} embeddings visuales y {len(self.symbols)} simbolos")

    @classmethod
    def from_items(cls, items: Sequence[Union[VisualItem, TextItem]], dim: int) -> 'TokenSequence':
        embeddings, symbols, text = [], [], []
        for item in items:
            if isinstance(item, VisualItem):
                if text:
                    raise SequenceError("el bloque visual debe preceder a todo el texto")
                embeddings.append(item.embedding)
                symbols.append(int(item.symbol_id))
            else:
                text.append(int(item.token_id))
        visual = torch.stack(embeddings) if embeddings else torch.zeros(0, dim)
        return cls(visual, tuple(symbols), tuple(text))

    @classmethod
    def text_only(cls, tokens: Sequence[int], dim: int) -> 'TokenSequence':
        return cls(torch.zeros(0, dim), (), tuple(int(t) for t in tokens))

    @property
    def l_vis(self) -> int:
        return len(self.symbols)

    @property
    def l_txt(self) -> int:
        return len(self.text)

    def __len__(self):
        return self.l_vis + self.l_txt

    @property
    def items(self) -> list:
        visual = [VisualItem(self.visual[i], s) for i, s in enumerate(self.symbols)]
        return visual + [TextItem(t) for t in self.text]

    def tags(self) -> List[str]:
        return [VISUAL] * self.l_vis + [TEXT] * self.l_txt

    def extend(self, tokens: Sequence[int]) -> 'TokenSequence':
        """Agrega texto generado al final; el bloque visual queda intacto."""
        return TokenSequence(self.visual, self.symbols, self.text + tuple(int(t) for t in tokens))

    def validate(self, cfg: ModelConfig):
        if len(self) == 0:
            raise SequenceError("secuencia vacia")
        if len(self) > cfg.max_positions:
            raise SequenceError(f"longitud {len(self)} excede max_positions={cfg.max_positions}")
        if self.l_vis and self.visual.shape[1] != cfg.hidden_dim:
            raise ShapeError(f"embedding visual de dimension {self.visual.shape[1]} != d={cfg.hidden_dim}")
        for item in self.items:
            if isinstance(item, VisualItem):
                if not 0 <= item.symbol_id < cfg.visual_alphabet:
                    raise SequenceError("symbol_id fuera del alfabeto visual")
            elif not 0 <= item.token_id < cfg.vocab_size:
                raise SequenceError("token_id fuera del vocabulario")


@dataclass
class LayerTrace:
    """Estados ``(M+1) × L × d``: nivel 0 tras el embedding, nivel l salida de la capa l."""
    states: torch.Tensor

    def level(self, index: int) -> torch.Tensor:
        return self.states[index]

    @property
    def length(self) -> int:
        return self.states.shape[1]


@dataclass
class TargetStep:
    """Logits y estados de la penultima capa de un paso de decodificacion o verificacion."""
    logits: torch.Tensor
    penultimate: torch.Tensor


@dataclass
class PrefillResult:
    logits: torch.Tensor
    trace: LayerTrace
    cache: 'TargetKVCache'
    attention: Optional[List[torch.Tensor]] = None


class TargetKVCache:
    """
    Cache KV por capa del objetivo, con entradas confirmadas y provisionales.

    Las entradas provisionales vienen de ``verify_batch``; ``commit_prefix`` conserva el
    camino aceptado y descarta el resto. Una cache pertenece a una sola sesion.
    """

    def __init__(self, cfg: ModelConfig, keys: List[torch.Tensor], values: List[torch.Tensor], tags: List[str]):
        self.cfg = cfg
        self.keys = keys
        self.values = values
        self.tags = list(tags)
        self.length = len(tags)
        self.provisional = 0
        self._provisional_mask: Optional[torch.Tensor] = None

    def __len__(self):
        return self.length

    def clone(self) -> 'TargetKVCache':
        other = TargetKVCache(self.cfg, [k.clone() for k in self.keys], [v.clone() for v in self.values], self.tags)
        other.length = self.length
        other.provisional = self.provisional
        other._provisional_mask = None if self._provisional_mask is None else self._provisional_mask.clone()
        return other

    def past(self, layer: int):
        return self.keys[layer], self.values[layer]

    def _drop_provisional(self):
        if self.provisional:
            self.keys = [k[:, :self.length] for k in self.keys]
            self.values = [v[:, :self.length] for v in self.values]
        self.provisional = 0
        self._provisional_mask = None

    def append(self, new_keys, new_values, provisional_mask: Optional[torch.Tensor] = None):
        """Agrega filas nuevas; con ``provisional_mask`` quedan pendientes de confirmacion."""
        self.keys = [torch.cat((k, nk), dim=-2) for k, nk in zip(self.keys, new_keys)]
        self.values = [torch.cat((v, nv), dim=-2) for v, nv in zip(self.values, new_values)]
        n = new_keys[0].shape[-2]
        if provisional_mask is None:
            self.length += n
            self.tags.extend([TEXT] * n)
        else:
            self.provisional = n
            self._provisional_mask = provisional_mask

    def commit_prefix(self, keep: Sequence[int]):
        """
        Conserva las entradas provisionales ``keep`` (camino raiz→nodo) y descarta el resto.

        ``keep`` vacio devuelve la cache a su longitud previa a la verificacion.
        """
        keep = [int(i) for i in keep]
        if not keep:
            self._drop_provisional()
            return
        mask = self._provisional_mask
        if mask is None:
            raise MaskError("no hay entradas provisionales que confirmar")
        for depth, index in enumerate(keep):
            if not 0 <= index < self.provisional:
                raise MaskError(f"indice provisional {index} fuera de rango")
            expected = torch.zeros(self.provisional, dtype=torch.bool)
            expected[keep[:depth + 1]] = True
            if not torch.equal(mask[index], expected):
                raise MaskError(f"keep={keep} no es un camino desde la raiz del arbol verificado")
        rows = torch.tensor([self.length + i for i in keep], dtype=torch.long)
        prefix = slice(0, self.length)
        self.keys = [torch.cat((k[:, prefix], k.index_select(-2, rows)), dim=-2) for k in self.keys]
        self.values = [torch.cat((v[:, prefix], v.index_select(-2, rows)), dim=-2) for v in self.values]
        self.length += len(keep)
        self.tags.extend([TEXT] * len(keep))
        self.provisional = 0
        self._provisional_mask = None


def _validate_ancestor_mask(mask: torch.Tensor):
    n = mask.shape[0]
    if mask.dim() != 2 or mask.shape[1] != n:
        raise MaskError("la mascara de ancestros debe ser cuadrada")
    if not bool(mask.diagonal().all()):
        raise MaskError("la mascara de ancestros debe ser reflexiva")
    if bool(mask.triu(1).any()):
        raise MaskError("un nodo no puede tener ancestros posteriores en el orden lineal")
    for i in range(n):
        ancestors = mask[i].nonzero().flatten().tolist()
        # cerrado por ancestros: cada ancestro j ve exactamente un subconjunto de los de i
        for j in ancestors:
            if bool((mask[j] & ~mask[i]).any()):
                raise MaskError(f"fila {i} no es cerrada por ancestros (fila {j})")
        depths = [int(mask[j].sum()) for j in ancestors]
        if sorted(depths) != list(range(1, len(ancestors) + 1)):
            raise MaskError(f"los ancestros de la fila {i} no forman una cadena")


class TargetModel(nn.Module):
    """
    Transformador objetivo de juguete. Los pesos son inmutables tras la construccion y
    se pueden compartir entre hilos; cada sesion posee su propia ``TargetKVCache``.
    """

    def __init__(self, cfg: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.visual_proj = nn.Linear(d, d)
        self.layers = nn.ModuleList(
            [DecoderLayer(d, cfg.num_heads, cfg.ffn_mult, cfg.norm_eps, cfg.rope_base) for _ in range(cfg.num_layers)]
        )
        self.norm = RMSNorm(d, cfg.norm_eps)
        self.head = nn.Linear(d, cfg.vocab_size, bias=False)
        self.reset_parameters(generator)
        self.to(cfg.torch_dtype)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        for name, p in sorted(self.named_parameters()):
            if name.endswith('norm.weight'):
                p.fill_(1.0)
            elif name.endswith('bias'):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=generator) * 0.02)

    # -- embeddings -------------------------------------------------------

    def embed_tokens(self, tokens) -> torch.Tensor:
        ids = torch.as_tensor(tokens, dtype=torch.long)
        return self.embed(ids)

    def embed_sequence(self, seq: TokenSequence) -> torch.Tensor:
        rows = []
        if seq.l_vis:
            rows.append(self.visual_proj(seq.visual.to(self.cfg.torch_dtype)))
        if seq.l_txt:
            rows.append(self.embed_tokens(seq.text))
        return torch.cat(rows, dim=0)

    # -- nucleo -----------------------------------------------------------

    def run_layers(self, x, positions, mask, *, start: int = 0, cache: Optional[TargetKVCache] = None,
                   layer_masks=None, capture=None):
        """
        Aplica las capas ``start..M-1``. Devuelve (estados por nivel, k/v nuevos por capa,
        probabilidades capturadas por capa).
        """
        states = [x]
        new_k, new_v, captured = [], [], []
        for i in range(start, self.cfg.num_layers):
            layer_mask = layer_masks[i] if layer_masks is not None else mask
            past = cache.past(i) if cache is not None else None
            x, k, v, probs = self.layers[i](x, positions, layer_mask, past, capture)
            states.append(x)
            new_k.append(k)
            new_v.append(v)
            captured.append(probs)
        return states, new_k, new_v, captured

    def logits_from_hidden(self, h: torch.Tensor) -> torch.Tensor:
        return self.head(self.norm(h))

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """Pasada causal en lote ``(B, L, d)`` usada en el entrenamiento; devuelve logits ``(B, L, V)``."""
        n = embeds.shape[-2]
        positions = torch.arange(n)
        states, _, _, _ = self.run_layers(embeds, positions, causal_mask(n))
        return self.logits_from_hidden(states[-1])

    @torch.no_grad()
    def prefill(self, seq: TokenSequence, capture: Optional[Sequence[int]] = None) -> PrefillResult:
        """
        Pasada causal completa sobre ``seq``.

        Parámetros:
        -----------
        seq : TokenSequence
            Prompt con bloque visual y texto; ``0 < L <= max_positions``.
        capture : lista de int, opcional
            Filas de consulta cuya atencion se devuelve por capa (analisis).

        Retorna:
        --------
        PrefillResult
            Logits ``L × V``, traza completa de estados y cache KV confirmada.
        """
        seq.validate(self.cfg)
        x = self.embed_sequence(seq)
        n = x.shape[0]
        positions = torch.arange(n)
        capture_t = None if capture is None else torch.as_tensor(list(capture), dtype=torch.long)
        states, ks, vs, captured = self.run_layers(x, positions, causal_mask(n), capture=capture_t)
        logits = self.logits_from_hidden(states[-1])
        cache = TargetKVCache(self.cfg, ks, vs, seq.tags())
        logger.debug("prefill L=%d (visual=%d)", n, seq.l_vis)
        return PrefillResult(logits, LayerTrace(torch.stack(states)), cache, captured if capture is not None else None)

    def _check_room(self, cache: TargetKVCache, n: int):
        if cache.length + n > self.cfg.max_positions:
            raise SequenceError(f"la cache llegaria a {cache.length + n} > max_positions={self.cfg.max_positions}")

    @torch.no_grad()
    def decode_step(self, cache: TargetKVCache, token: Union[TextItem, int]) -> TargetStep:
        """Un paso autorregresivo: agrega el token a la cache y devuelve logits ``1 × V``."""
        token_id = token.token_id if isinstance(token, TextItem) else int(token)
        self._check_room(cache, 1)
        cache.commit_prefix([])
        x = self.embed_tokens([token_id])
        positions = torch.tensor([cache.length])
        states, ks, vs, _ = self.run_layers(x, positions, None, cache=cache)
        cache.append(ks, vs)
        return TargetStep(self.logits_from_hidden(states[-1]), states[self.cfg.penultimate])

    @torch.no_grad()
    def verify_batch(self, cache: TargetKVCache, tokens: Sequence[Union[TextItem, int]],
                     ancestor_mask: torch.Tensor, positions: Sequence[int]) -> TargetStep:
        """
        Puntua todos los nodos de un arbol en una sola pasada.

        Cada nodo ve la historia confirmada y sus ancestros (``ancestor_mask``). La cache
        queda extendida de forma provisional hasta que se llame a ``commit_prefix``.
        """
        ids = [t.token_id if isinstance(t, TextItem) else int(t) for t in tokens]
        n = len(ids)
        mask = torch.as_tensor(ancestor_mask, dtype=torch.bool)
        if mask.shape != (n, n):
            raise MaskError(f"mascara {tuple(mask.shape)} para {n} tokens")
        _validate_ancestor_mask(mask)
        if len(positions) != n:
            raise ShapeError("se necesita una posicion por token")
        if max(positions) >= self.cfg.max_positions:
            raise SequenceError("posicion fuera de max_positions")
        cache.commit_prefix([])
        x = self.embed_tokens(ids)
        full = torch.cat((torch.ones(n, cache.length, dtype=torch.bool), mask), dim=1)
        states, ks, vs, _ = self.run_layers(x, torch.as_tensor(list(positions)), full, cache=cache)
        cache.append(ks, vs, provisional_mask=mask)
        return TargetStep(self.logits_from_hidden(states[-1]), states[self.cfg.penultimate])

    @torch.no_grad()
    def finish_from_penultimate(self, penultimate: torch.Tensor) -> torch.Tensor:
        """Pasa los estados del nivel M-1 por la ultima capa y la cabeza (consistencia de la traza)."""
        n = penultimate.shape[0]
        states, _, _, _ = self.run_layers(penultimate, torch.arange(n), causal_mask(n), start=self.cfg.num_layers - 1)
        return self.logits_from_hidden(states[-1])

    @torch.no_grad()
    def truncated_forward(self, seq: TokenSequence, x: int, capture: Optional[Sequence[int]] = None):
        """Pasada completa donde, desde la capa ``x``, las consultas de texto no ven claves visuales."""
        return truncate_visual_from_layer(self, seq, x, capture=capture)


def truncate_visual_from_layer(model: TargetModel, seq: TokenSequence, x: int, capture=None) -> torch.Tensor:
    """
    Logits ``L × V`` de una pasada en la que las capas ``l >= x`` (indexadas desde 0)
    enmascaran la atencion texto→visual. ``x = M`` reproduce la pasada completa.
    """
    cfg = model.cfg
    if not 0 <= x <= cfg.num_layers:
        raise ConfigError(f"x={x} fuera de [0, {cfg.num_layers}]")
    seq.validate(cfg)
    with torch.no_grad():
        h = model.embed_sequence(seq)
        n = h.shape[0]
        base = causal_mask(n)
        cut = base.clone()
        cut[seq.l_vis:, :seq.l_vis] = False
        layer_masks = [base if i < x else cut for i in range(cfg.num_layers)]
        capture_t = None if capture is None else torch.as_tensor(list(capture), dtype=torch.long)
        states, _, _, _ = model.run_layers(h, torch.arange(n), base, layer_masks=layer_masks, capture=capture_t)
        return model.logits_from_hidden(states[-1])


def extract_states(trace: LayerTrace, seq: TokenSequence, cfg: ModelConfig):
    """
    Filas visuales del nivel m* = M//2 y filas de texto del nivel M-1.

    Retorna:
    --------
    tuple
        ``(h_vis_mid (L_vis × d), h_txt_penult (L_txt × d))``
    """
    if trace.length != len(seq):
        raise ShapeError(f"traza de longitud {trace.length} para una secuencia de {len(seq)}")
    h_vis_mid = trace.level(cfg.mid_layer)[:seq.l_vis]
    h_txt_penult = trace.level(cfg.penultimate)[seq.l_vis:]
    return h_vis_mid, h_txt_penult


def previous_states(level: torch.Tensor, seq: TokenSequence) -> torch.Tensor:
    """
    Para cada fila de texto en la posicion ``p`` devuelve el estado en ``p-1``
    (alineacion desplazada del HSR). Si el texto empieza en la posicion 0 la primera fila es cero.
    """
    start = seq.l_vis
    rows = level[max(start - 1, 0):start + seq.l_txt - 1]
    if start == 0 and seq.l_txt:
        rows = torch.cat((torch.zeros(1, level.shape[1], dtype=level.dtype), rows), dim=0)
    return rows


def modality_rows(seq: TokenSequence):
    """Indices de posiciones visuales y de texto."""
    return list(range(seq.l_vis)), list(range(seq.l_vis, len(seq)))
