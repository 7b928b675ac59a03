"""
Modelo borrador de Sparrow: una sola capa decodificadora.

- HSR: la entrada de texto es ``z_t = FC(e_t ⊕ h_{t-1})`` con ``h`` de la penultima capa del objetivo.
- VATA: en inferencia la atencion solo ve claves/valores del dominio de texto; la cache
  del borrador nunca guarda filas visuales.
- IVSB/MTP: en entrenamiento se antepone el bloque visual del nivel m* y se construye la
  entrada recursiva con los estados que produjo el propio borrador.
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .exceptions import ConfigError, SequenceError, ShapeError
from .layers import DecoderLayer, RMSNorm, attend, causal_mask

logger = logging.getLogger(__name__)

TRAINING = 'training_full_causal'
VATA = 'inference_vata'
FULL_VISUAL = 'inference_full_visual'
MODES = (TRAINING, VATA, FULL_VISUAL)

# Origen de las filas visuales en entrenamiento: estados de m* (IVSB), embeddings crudos,
# filas en cero o ninguna fila.
VISUAL_SOURCES = ('mid', 'raw', 'zero', 'none')

VISUAL_STATE = 'visual-state'
FUSED_TEXT = 'fused-text'


@dataclass(frozen=True)
class DraftConfig:
    hidden_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 256
    ffn_mult: int = 4
    visual_source: str = 'mid'
    mode: str = VATA
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim debe ser divisible por num_heads")
        if self.visual_source not in VISUAL_SOURCES:
            raise ConfigError(f"visual_source debe ser uno de {VISUAL_SOURCES}")
        if self.mode not in MODES:
            raise ConfigError(f"modo desconocido: {self.mode}")

    @classmethod
    def for_target(cls, target_cfg, **kwargs) -> 'DraftConfig':
        return cls(hidden_dim=target_cfg.hidden_dim, num_heads=target_cfg.num_heads,
                   vocab_size=target_cfg.vocab_size, ffn_mult=target_cfg.ffn_mult,
                   rope_base=target_cfg.rope_base, norm_eps=target_cfg.norm_eps, **kwargs)

    def with_mode(self, mode: str) -> 'DraftConfig':
        return replace(self, mode=mode)

    def header(self):
        return [self.hidden_dim, self.num_heads, self.vocab_size, self.ffn_mult,
                VISUAL_SOURCES.index(self.visual_source)]

    @classmethod
    def from_header(cls, values):
        d, heads, vocab, mult, source = (int(v) for v in values)
        return cls(hidden_dim=d, num_heads=heads, vocab_size=vocab, ffn_mult=mult,
                   visual_source=VISUAL_SOURCES[source])


@dataclass(frozen=True)
class SharedWeights:
    """Tabla de embeddings y cabeza LM del objetivo, congeladas y compartidas."""
    embedding: nn.Embedding
    head: nn.Linear


@dataclass
class FusedInput:
    """Filas de entrada del borrador: bloque visual (opcional) y filas de texto fusionadas."""
    rows: torch.Tensor
    tags: tuple
    positions: torch.Tensor

    def __post_init__(self):
        if self.rows.dim() != 2 or self.rows.shape[0] != len(self.tags) or self.positions.shape[0] != len(self.tags):
            raise ShapeError("filas, etiquetas y posiciones deben tener la misma longitud")
        seen_text = False
        for tag in self.tags:
            if tag == FUSED_TEXT:
                seen_text = True
            elif seen_text:
                raise SequenceError("las filas visuales deben preceder a las filas de texto")

    @property
    def l_vis(self) -> int:
        return sum(1 for t in self.tags if t == VISUAL_STATE)

    @property
    def l_txt(self) -> int:
        return len(self.tags) - self.l_vis

    @property
    def visual_rows(self) -> torch.Tensor:
        return self.rows[:self.l_vis]

    @property
    def text_rows(self) -> torch.Tensor:
        return self.rows[self.l_vis:]


@dataclass
class DraftOutput:
    hidden: torch.Tensor
    logits: torch.Tensor


class DraftKVCache:
    """
    Cache KV de la unica capa del borrador.

    En modo VATA solo contiene filas ``fused-text``; las filas provisionales (nodos del
    arbol) se descartan con ``rollback``.
    """

    def __init__(self, heads: int, head_dim: int, dtype: torch.dtype, mode: str = VATA):
        self.mode = mode
        self.k = torch.zeros(heads, 0, head_dim, dtype=dtype)
        self.v = torch.zeros(heads, 0, head_dim, dtype=dtype)
        self.tags = []
        self.length = 0

    @property
    def rows(self) -> int:
        return self.k.shape[1]

    @property
    def provisional(self) -> int:
        return self.rows - self.length

    @property
    def visual_rows(self) -> int:
        return sum(1 for t in self.tags if t == VISUAL_STATE)

    def append(self, k_new, v_new, tags: Sequence[str], commit: bool = True):
        if self.mode == VATA and any(t != FUSED_TEXT for t in tags):
            raise SequenceError("la cache VATA no admite filas visuales")
        if commit and self.provisional:
            raise SequenceError("no se pueden confirmar filas con nodos provisionales pendientes")
        self.k = torch.cat((self.k, k_new), dim=1)
        self.v = torch.cat((self.v, v_new), dim=1)
        self.tags.extend(tags)
        if commit:
            self.length = self.rows

    def rollback(self):
        self.k = self.k[:, :self.length]
        self.v = self.v[:, :self.length]
        del self.tags[self.length:]


def hsr_fuse(e_t: torch.Tensor, h_prev: torch.Tensor, fc: nn.Linear) -> torch.Tensor:
    """
    Fusion HSR: ``FC(e_t ⊕ h_prev)`` con el embedding primero y el estado despues.

    Acepta vectores ``(d,)`` o lotes de filas ``(n, d)``.
    """
    if e_t.shape != h_prev.shape:
        raise ShapeError(f"hsr_fuse: embedding {tuple(e_t.shape)} y estado {tuple(h_prev.shape)}")
    if fc.in_features != 2 * e_t.shape[-1]:
        raise ShapeError(f"hsr_fuse: FC espera {fc.in_features} entradas, recibio 2×{e_t.shape[-1]}")
    return fc(torch.cat((e_t, h_prev), dim=-1))


def vata_attention(q: torch.Tensor, cache: DraftKVCache, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Atencion multi-cabeza de ``q`` restringida a las claves/valores de texto de la cache.

    Parámetros:
    -----------
    q : torch.Tensor
        Consulta ya proyectada (con rotary), ``(d,)`` o ``(n, d)``.
    cache : DraftKVCache
        Cache del borrador; debe ser no vacia y sin filas visuales.
    mask : torch.Tensor, opcional
        ``(n, filas de la cache)``; por defecto todo visible.

    Retorna:
    --------
    torch.Tensor
        Contexto concatenado por cabezas con la misma forma que ``q``.
    """
    if cache.rows == 0:
        raise SequenceError("vata_attention con cache vacia")
    if cache.visual_rows:
        raise SequenceError("VATA solo atiende al dominio de texto")
    single = q.dim() == 1
    rows = q.unsqueeze(0) if single else q
    heads, head_dim = cache.k.shape[0], cache.k.shape[2]
    qh = rows.unflatten(-1, (heads, head_dim)).transpose(0, 1)
    context, _ = attend(qh, cache.k, cache.v, mask)
    out = context.transpose(0, 1).flatten(-2)
    return out[0] if single else out


def build_init_input(h_vis_mid: torch.Tensor, e_txt: torch.Tensor, h_txt_penult: torch.Tensor,
                     fc: nn.Linear) -> FusedInput:
    """``z_init = h_vis^{m*} ⊕ FC(e_txt ⊕ h_txt^h)``; las filas de ``h`` ya vienen desplazadas (t-1)."""
    if e_txt.shape[0] != h_txt_penult.shape[0]:
        raise ShapeError(f"filas de texto desalineadas: {e_txt.shape[0]} embeddings y {h_txt_penult.shape[0]} estados")
    fused = hsr_fuse(e_txt, h_txt_penult, fc)
    return _assemble(h_vis_mid, fused)


def build_recursive_input(h_vis_mid: torch.Tensor, e_txt: torch.Tensor, h_hat: torch.Tensor,
                          fc: nn.Linear) -> FusedInput:
    """``z_rec = h_vis^{m*} ⊕ FC(e_txt ⊕ ĥ_txt)``: el ancla visual se reutiliza sin cambios."""
    if e_txt.shape[0] != h_hat.shape[0]:
        raise ShapeError(f"filas de texto desalineadas: {e_txt.shape[0]} embeddings y {h_hat.shape[0]} estados")
    fused = hsr_fuse(e_txt, h_hat, fc)
    return _assemble(h_vis_mid, fused)


def _assemble(visual: torch.Tensor, fused: torch.Tensor) -> FusedInput:
    if visual.shape[0] and visual.shape[1] != fused.shape[1]:
        raise ShapeError("el bloque visual y las filas de texto difieren en d")
    rows = torch.cat((visual.to(fused.dtype), fused), dim=0)
    tags = (VISUAL_STATE,) * visual.shape[0] + (FUSED_TEXT,) * fused.shape[0]
    return FusedInput(rows, tags, torch.arange(rows.shape[0]))


class DraftModel(nn.Module):
    """
    Una capa decodificadora con la misma forma que las del objetivo, mas la proyeccion FC
    (2d→d, con sesgo y sin no linealidad) y una norma de salida propia. Embeddings y
    cabeza LM se toman del objetivo, congelados, y no forman parte del ``state_dict``.
    """

    def __init__(self, cfg: DraftConfig, target, generator: Optional[torch.Generator] = None):
        super().__init__()
        if cfg.hidden_dim != target.cfg.hidden_dim or cfg.vocab_size != target.cfg.vocab_size:
            raise ConfigError("el borrador debe compartir d y V con el objetivo")
        self.cfg = cfg
        d = cfg.hidden_dim
        self.fc = nn.Linear(2 * d, d, bias=True)
        self.layer = DecoderLayer(d, cfg.num_heads, cfg.ffn_mult, cfg.norm_eps, cfg.rope_base)
        self.out_norm = RMSNorm(d, cfg.norm_eps)
        self.__dict__['shared'] = SharedWeights(target.embed, target.head)
        self.reset_parameters(generator)
        self.to(target.cfg.torch_dtype)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        for name, p in sorted(self.named_parameters()):
            if name.endswith('norm.weight'):
                p.fill_(1.0)
            elif name.endswith('bias'):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=generator) * 0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.fc.weight.dtype

    def embed_tokens(self, tokens) -> torch.Tensor:
        return self.shared.embedding(torch.as_tensor(tokens, dtype=torch.long))

    def head_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.shared.head(self.out_norm(hidden))

    def new_cache(self, mode: Optional[str] = None) -> DraftKVCache:
        mode = mode or self.cfg.mode
        return DraftKVCache(self.cfg.num_heads, self.cfg.hidden_dim // self.cfg.num_heads, self.dtype, mode)

    def forward(self, inp: FusedInput, mode: Optional[str] = None) -> DraftOutput:
        return draft_forward(self, inp, mode)

    def step(self, rows: torch.Tensor, positions: torch.Tensor, cache: DraftKVCache, tags: Sequence[str],
             visible: Optional[torch.Tensor] = None, commit: bool = True) -> DraftOutput:
        """
        Procesa filas nuevas contra la cache y las agrega a ella.

        ``visible`` es ``(n, filas provisionales)`` e indica que nodos provisionales ve cada
        fila nueva (sus ancestros en el arbol); las filas confirmadas siempre son visibles.
        Sin ``visible`` las filas nuevas son causales entre si.
        """
        n = rows.shape[0]
        layer = self.layer
        q, k_new, v_new = layer.attention.project(layer.attn_norm(rows), positions)
        if visible is None:
            mask = causal_mask(n, cache.rows)
        else:
            mask = torch.cat((torch.ones(n, cache.length, dtype=torch.bool), visible.to(torch.bool),
                              torch.eye(n, dtype=torch.bool)), dim=1)
        cache.append(k_new, v_new, tags, commit=commit)
        if cache.mode == VATA:
            context = vata_attention(layer.attention.merge(q), cache, mask)
        else:
            ctx, _ = attend(q, cache.k, cache.v, mask)
            context = layer.attention.merge(ctx)
        x = rows + layer.attention.wo(context)
        hidden = x + layer.ffn(layer.ffn_norm(x))
        return DraftOutput(hidden, self.head_logits(hidden))


def draft_forward(draft: DraftModel, inp: FusedInput, mode: Optional[str] = None) -> DraftOutput:
    """
    Pasada del borrador sobre una entrada fusionada.

    - ``training_full_causal``: causal sobre todas las filas, incluidas las visuales.
    - ``inference_vata``: solo filas de texto, con posiciones compactadas ``0..L_txt-1``.
    - ``inference_full_visual``: como entrenamiento, para la linea base con visual completo.

    Los logits se calculan solo sobre las filas de texto.
    """
    mode = mode or draft.cfg.mode
    if inp.rows.shape[0] == 0:
        raise SequenceError("entrada vacia para el borrador")
    if mode == VATA:
        if inp.l_vis:
            raise SequenceError("la entrada VATA debe ser solo texto")
        cache = draft.new_cache(VATA)
        out = draft.step(inp.rows, torch.arange(inp.l_txt), cache, inp.tags)
        return out
    x = inp.rows
    n = x.shape[0]
    hidden, _, _, _ = draft.layer(x, inp.positions, causal_mask(n))
    return DraftOutput(hidden, draft.head_logits(hidden[inp.l_vis:]))
