"""
Experimentos de diagnostico sobre el objetivo y los borradores:

- truncado visual por capa (exactitud segun la capa desde la que el texto deja de ver lo visual),
- flujo de atencion del ultimo token de instruccion hacia las posiciones visuales,
- retencion (similitud coseno de cada nivel con los embeddings de entrada) por modalidad,
- barrido de poda visual del borrador con visual completo,
- costo por paso del borrador (multiplicaciones y filas de cache).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
from torch.utils.flop_counter import FlopCounterMode

from ..draft import FUSED_TEXT, hsr_fuse
from ..exceptions import ConfigError, SequenceError
from ..layers import rotary
from ..model import modality_rows, truncate_visual_from_layer
from ..numkernel import Rng, cosine_similarity, rmsnorm
from ..specdec import (FULL_VISUAL_DRAFT, LAST_INSTRUCTION, SPARROW, DecodeSession, TreeConfig, decode,
                       resolve_method)
from .workloads import grounded_accuracy

logger = logging.getLogger(__name__)


@dataclass
class AnalysisReport:
    truncation: List[tuple] = field(default_factory=list)
    attention: Optional[torch.Tensor] = None
    text_attention: Optional[torch.Tensor] = None
    visual_retention: List[float] = field(default_factory=list)
    text_retention: List[float] = field(default_factory=list)
    visual_threshold_level: Optional[int] = None

    def as_record(self) -> dict:
        return {
            'truncation': [list(p) for p in self.truncation],
            'visual_attention': [] if self.attention is None else self.attention.tolist(),
            'text_attention': [] if self.text_attention is None else self.text_attention.tolist(),
            'visual_retention': list(self.visual_retention),
            'text_retention': list(self.text_retention),
            'visual_threshold_level': self.visual_threshold_level,
        }


def layer_truncation_experiment(target, prompts: Sequence) -> List[tuple]:
    """``(x, exactitud)`` para ``x = 0..M``; ``x = M`` coincide con la pasada normal."""
    cfg = target.cfg
    native = grounded_accuracy(target, prompts)
    if native < 2.0 / cfg.visual_alphabet:
        logger.warning("exactitud nativa %.3f cerca del azar: el objetivo parece sin entrenar", native)
    series = []
    for x in range(cfg.num_layers + 1):
        acc = grounded_accuracy(target, prompts, lambda seq: truncate_visual_from_layer(target, seq, x))
        series.append((x, acc))
        logger.debug("truncation x=%d accuracy=%.4f", x, acc)
    return series


@torch.no_grad()
def attention_flow(target, prompt) -> tuple:
    """
    Masa de atencion del ultimo token de instruccion sobre posiciones visuales y de
    texto, por capa y cabeza.

    Retorna:
    --------
    tuple
        ``(visual M × H, texto M × H)``; cada par suma 1.
    """
    seq = prompt.seq if hasattr(prompt, 'seq') else prompt
    if seq.l_txt == 0:
        raise SequenceError("el prompt no tiene posiciones de texto")
    last = len(seq) - 1
    result = target.prefill(seq, capture=[last])
    probs = torch.stack([layer[:, 0].to(torch.float64) for layer in result.attention])
    visual = probs[..., :seq.l_vis].sum(dim=-1)
    text = probs[..., seq.l_vis:].sum(dim=-1)
    return visual, text


@torch.no_grad()
def attention_from_trace(target, prompt) -> tuple:
    """
    Recalcula la masa de atencion de :func:`attention_flow` a partir de la traza de
    estados: normaliza la entrada de cada capa, proyecta q/k con rotary y aplica el
    softmax causal en float64, sin pasar por la cache ni por ``attend``.
    """
    seq = prompt.seq if hasattr(prompt, 'seq') else prompt
    if seq.l_txt == 0:
        raise SequenceError("el prompt no tiene posiciones de texto")
    states = target.prefill(seq).trace.states.to(torch.float64)
    last = len(seq) - 1
    positions = torch.arange(len(seq))
    visual, text = [], []
    for level, layer in enumerate(target.layers):
        attn = layer.attention
        x = rmsnorm(states[level], layer.attn_norm.weight.to(torch.float64), layer.attn_norm.eps)
        q = rotary(attn.split(x @ attn.wq.weight.to(torch.float64).T), positions, attn.rope_base)
        k = rotary(attn.split(x @ attn.wk.weight.to(torch.float64).T), positions, attn.rope_base)
        scores = torch.einsum('hd,hld->hl', q[:, last], k[:, :last + 1]) / math.sqrt(attn.head_dim)
        probs = torch.softmax(scores, dim=-1)
        visual.append(probs[:, :seq.l_vis].sum(dim=-1))
        text.append(probs[:, seq.l_vis:].sum(dim=-1))
    return torch.stack(visual), torch.stack(text)


def attention_flow_experiment(target, prompts: Sequence) -> tuple:
    """Promedio de :func:`attention_flow` sobre los prompts de la carga."""
    grids = [attention_flow(target, p) for p in prompts]
    visual = torch.stack([g[0] for g in grids]).mean(dim=0)
    text = torch.stack([g[1] for g in grids]).mean(dim=0)
    return visual, text


@torch.no_grad()
def retention_experiment(target, prompts: Sequence, threshold: float = 0.25):
    """
    Similitud coseno media entre ``states[l]`` y ``states[0]`` por modalidad, para
    ``l = 0..M``. El nivel 0 vale exactamente 1.0.

    Retorna:
    --------
    tuple
        ``(curva visual, curva de texto, primer nivel con retencion visual < threshold o None)``
    """
    levels = target.cfg.num_layers + 1
    visual_sums = [0.0] * levels
    text_sums = [0.0] * levels
    visual_rows = text_rows = 0
    for prompt in prompts:
        seq = prompt.seq if hasattr(prompt, 'seq') else prompt
        states = target.prefill(seq).trace.states
        base = states[0]
        vis, txt = modality_rows(seq)
        for level in range(levels):
            if vis:
                sims = cosine_similarity(states[level][vis], base[vis])
                visual_sums[level] += float(torch.as_tensor(sims).sum())
            if txt:
                sims = cosine_similarity(states[level][txt], base[txt])
                text_sums[level] += float(torch.as_tensor(sims).sum())
        visual_rows += seq.l_vis
        text_rows += seq.l_txt
    visual = [s / visual_rows if visual_rows else 0.0 for s in visual_sums]
    text = [s / text_rows if text_rows else 0.0 for s in text_sums]
    crossing = next((level for level, v in enumerate(visual) if visual_rows and v < threshold), None)
    return visual, text, crossing


def pruning_sweep(target, draft, prompts: Sequence, fractions: Sequence[float], ranking: str = LAST_INSTRUCTION,
                  tree_cfg: TreeConfig = TreeConfig(), max_tokens: int = 32, stop_token=None) -> List[tuple]:
    """
    tau del borrador con visual completo conservando el ``x`` superior de filas visuales
    (ranking por atencion de la ultima capa del objetivo).
    """
    for fraction in fractions:
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"fraccion {fraction} fuera de [0, 1]")
    series = []
    for fraction in fractions:
        generated = calls = 0
        for prompt in prompts:
            out = decode(target, draft, prompt.seq, tree_cfg, 0.0, max_tokens, stop_token,
                         method=FULL_VISUAL_DRAFT, visual_fraction=fraction, ranking=ranking)
            generated += out.stats.generated_tokens
            calls += out.stats.target_calls
        series.append((fraction, generated / calls if calls else 0.0))
        logger.info("pruning fraction=%.2f ranking=%s tau=%.3f", fraction, ranking, series[-1][1])
    return series


@torch.no_grad()
def draft_step_cost(target, draft, prompt, method: str = SPARROW) -> tuple:
    """
    Multiplicaciones de un paso del borrador (una fila nueva contra la cache) y filas en
    la cache del borrador, tras el prefill de ``prompt``.

    Las multiplicaciones son FLOPs / 2 segun ``FlopCounterMode``.
    """
    method = resolve_method(method)
    seq = prompt.seq if hasattr(prompt, 'seq') else prompt
    session = DecodeSession(target, draft, TreeConfig(1, 1, 1), 0.0, Rng(0), method)
    session.start(seq)
    cache = session.draft_cache
    row = hsr_fuse(draft.embed_tokens([session.root_token]), session.root_hidden[None], draft.fc)
    positions = torch.tensor([session.draft_position])
    with FlopCounterMode(display=False) as counter:
        draft.step(row, positions, cache, [FUSED_TEXT], torch.zeros(1, 0, dtype=torch.bool), commit=False)
    cache.rollback()
    return counter.get_total_flops() // 2, cache.rows
