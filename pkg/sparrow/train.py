"""
Entrenamiento: preentrenamiento del objetivo de juguete sobre la tarea sintetica y
entrenamiento del borrador Sparrow (entradas IVSB, perdida conjunta MTP de dos
pasadas y calendario de dos etapas: solo texto y luego multimodal).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from tqdm import tqdm

from .draft import TRAINING, DraftConfig, DraftModel, build_init_input, build_recursive_input, draft_forward
from .exceptions import ConfigError, DivergenceError, ShapeError
from .model import ModelConfig, TargetModel, TokenSequence, extract_states, previous_states
from .numkernel import Rng

logger = logging.getLogger(__name__)

TEXT_ONLY = 'text_only'
MULTIMODAL = 'multimodal'
STAGES = (TEXT_ONLY, MULTIMODAL)

# Flujos del Rng por componente
TARGET_INIT_STREAM = 11
TARGET_DATA_STREAM = 12
DRAFT_INIT_STREAM = 21
DRAFT_SHUFFLE_STREAM = 22
VISUAL_KEEP_STREAM = 23


@dataclass(frozen=True)
class TargetTrainConfig:
    lr: float = 2e-3
    steps: int = 1500
    batch_size: int = 16
    seed: int = 0
    progress: bool = True

    def __post_init__(self):
        if not self.lr > 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("lr > 0, batch_size >= 1 y steps >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 3
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    stage: str = TEXT_ONLY
    mtp_depth: int = 2
    visual_keep: float = 1.0
    progress: bool = True

    def __post_init__(self):
        if not self.lr > 0 or not self.alpha > 0 or not self.beta > 0:
            raise ConfigError("lr, alpha y beta deben ser positivos")
        if self.batch_size < 1 or self.epochs < 0 or self.mtp_depth < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0 y mtp_depth >= 1")
        if self.stage not in STAGES:
            raise ConfigError(f"etapa desconocida {self.stage!r}")
        if not 0.0 <= self.visual_keep <= 1.0:
            raise ConfigError("visual_keep debe estar en [0, 1]")


@dataclass(eq=False)
class TrainExample:
    """
    Ingredientes de las ecuaciones de entrada y la supervision, alineados por filas de texto:
    la fila ``t`` usa ``e_t`` y ``h_{t-1}``; su distribucion objetivo puntua el token
    ``t+1`` y su estado objetivo es ``h_t``.
    """
    h_vis_mid: torch.Tensor
    e_txt: torch.Tensor
    h_txt_penult: torch.Tensor
    teacher_probs: torch.Tensor
    teacher_states: torch.Tensor
    visual_raw: Optional[torch.Tensor] = None

    def __post_init__(self):
        rows = self.e_txt.shape[0]
        for name in ('h_txt_penult', 'teacher_probs', 'teacher_states'):
            if getattr(self, name).shape[0] != rows:
                raise ShapeError(f"TrainExample: {name} con {getattr(self, name).shape[0]} filas, se esperaban {rows}")

    @property
    def l_vis(self) -> int:
        return self.h_vis_mid.shape[0]


@dataclass
class LossReport:
    pass1_token_loss: float
    pass1_state_loss: float
    pass2_token_loss: float
    pass2_state_loss: float
    total: float
    tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_record(self, **extra) -> dict:
        return {**extra, 'pass1_token': self.pass1_token_loss, 'pass1_state': self.pass1_state_loss,
                'pass2_token': self.pass2_token_loss, 'pass2_state': self.pass2_state_loss, 'total': self.total}


def combine(alpha: float, beta: float, p1_token: float, p1_state: float, p2_token: float, p2_state: float) -> float:
    return alpha * (p1_token + p2_token) + beta * (p1_state + p2_state)


# -- objetivo -----------------------------------------------------------------


def target_loss(model: TargetModel, batch: Sequence[TokenSequence]) -> torch.Tensor:
    """Entropia cruzada de prediccion del siguiente token sobre las posiciones de texto."""
    l_vis = batch[0].l_vis
    if any(s.l_vis != l_vis or len(s) != len(batch[0]) for s in batch):
        raise ShapeError("el lote debe tener secuencias de la misma forma")
    embeds = torch.stack([model.embed_sequence(s) for s in batch])
    logits = model(embeds)
    start = max(l_vis - 1, 0)
    targets = torch.tensor([s.text[start + 1 - l_vis:] for s in batch], dtype=torch.long)
    scored = logits[:, start:len(batch[0]) - 1]
    return F.cross_entropy(scored.reshape(-1, scored.shape[-1]).float(), targets.reshape(-1))


def pretrain_target(task, train_cfg: TargetTrainConfig, model_cfg: ModelConfig,
                    l_vis_choices: Sequence[int] = (8, 16, 32, 64)):
    """
    Entrena el objetivo de juguete en la tarea "grounded".

    Cada paso usa un lote nuevo con una sola longitud visual (en ciclo sobre
    ``l_vis_choices``) para que todas las secuencias tengan la misma forma.

    Retorna:
    --------
    tuple
        ``(TargetModel, registros [{'step', 'loss'}])``
    """
    from .bench.workloads import training_sequences

    init = Rng(train_cfg.seed, TARGET_INIT_STREAM)
    data = Rng(train_cfg.seed, TARGET_DATA_STREAM)
    model = TargetModel(model_cfg, generator=init.torch_generator())
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    log = []
    model.train()
    for step in tqdm(range(train_cfg.steps), desc='target', disable=not train_cfg.progress):
        l_vis = l_vis_choices[step % len(l_vis_choices)]
        batch = training_sequences(task, train_cfg.batch_size, [l_vis], int(data.integers(0, 2**62)))
        loss = target_loss(model, batch)
        if not torch.isfinite(loss):
            raise DivergenceError(f"perdida no finita en el paso {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append({'step': step, 'loss': float(loss)})
        if step % 100 == 0:
            logger.info("target step=%d loss=%.4f", step, float(loss))
    model.eval()
    return model, log


# -- trazas del maestro -------------------------------------------------------


@torch.no_grad()
def teacher_trace(sequences: Sequence[TokenSequence], target: TargetModel) -> List[TrainExample]:
    """Prefill por secuencia y extraccion de h^{m*}, h^h, distribuciones y estados siguientes."""
    out = []
    for seq in sequences:
        result = target.prefill(seq)
        h_vis_mid, h_txt = extract_states(result.trace, seq, target.cfg)
        penult = result.trace.level(target.cfg.penultimate)
        out.append(TrainExample(
            h_vis_mid=h_vis_mid.clone(),
            e_txt=target.embed_tokens(seq.text).clone(),
            h_txt_penult=previous_states(penult, seq).clone(),
            teacher_probs=torch.softmax(result.logits[seq.l_vis:].to(torch.float64), dim=-1).to(penult.dtype),
            teacher_states=h_txt.clone(),
            visual_raw=result.trace.level(0)[:seq.l_vis].clone(),
        ))
    return out


def _visual_rows(example: TrainExample, source: str, keep: Optional[Sequence[int]]):
    if source == 'none':
        return example.h_vis_mid[:0]
    if source == 'raw':
        rows = example.visual_raw if example.visual_raw is not None else example.h_vis_mid
    elif source == 'zero':
        rows = torch.zeros_like(example.h_vis_mid)
    else:
        rows = example.h_vis_mid
    if keep is not None:
        rows = rows[torch.as_tensor(list(keep), dtype=torch.long)]
    return rows


def _soft_cross_entropy(logits: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    return -(probs * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def mtp_joint_loss(example: TrainExample, draft: DraftModel, alpha: float = 1.0, beta: float = 1.0,
                   depth: int = 2, visual_keep: Optional[Sequence[int]] = None) -> LossReport:
    """
    Perdida conjunta de las dos pasadas.

    Pasada 1: ``draft_forward(build_init_input(...))`` da ``ĥ`` y logits. Pasada 2: la
    entrada recursiva reemplaza los estados de texto por ``ĥ`` desplazado una fila (la
    primera fila conserva el estado del objetivo) y reutiliza el mismo bloque visual. El
    gradiente de la pasada 2 atraviesa la pasada 1. Con ``depth > 2`` las pasadas
    adicionales se acumulan en los campos de la pasada 2.
    """
    visual = _visual_rows(example, draft.cfg.visual_source, visual_keep)
    l_vis = visual.shape[0]
    states = example.h_txt_penult
    token_terms, state_terms = [], []
    for _ in range(depth):
        inp = (build_init_input if not token_terms else build_recursive_input)(visual, example.e_txt, states, draft.fc)
        out = draft_forward(draft, inp, TRAINING)
        hidden = out.hidden[l_vis:]
        token_terms.append(_soft_cross_entropy(out.logits, example.teacher_probs))
        state_terms.append(F.smooth_l1_loss(hidden, example.teacher_states))
        states = torch.cat((example.h_txt_penult[:1], hidden[:-1]), dim=0)
    p1_token, p1_state = token_terms[0], state_terms[0]
    zero = p1_token.new_zeros(())
    p2_token = sum(token_terms[1:], zero)
    p2_state = sum(state_terms[1:], zero)
    total = alpha * (p1_token + p2_token) + beta * (p1_state + p2_state)
    values = [float(v) for v in (p1_token, p1_state, p2_token, p2_state)]
    return LossReport(*values, combine(alpha, beta, *values), tensor=total)


def gradient_check(example: TrainExample, draft: DraftModel, alpha: float = 1.0, beta: float = 1.0,
                   depth: int = 2, eps: float = 1e-6) -> float:
    """
    Compara el gradiente analitico de la perdida conjunta respecto de los pesos de la
    fusion (``fc``) con diferencias finitas centrales.

    Retorna:
    --------
    float
        Error relativo ``||g_a - g_n|| / max(||g_a||, ||g_n||)``. Usar un borrador en float64.
    """
    weight = draft.fc.weight
    draft.zero_grad()
    mtp_joint_loss(example, draft, alpha, beta, depth).tensor.backward()
    analytic = weight.grad.detach().clone()
    numeric = torch.zeros_like(weight)
    with torch.no_grad():
        flat = weight.view(-1)
        for i in range(flat.numel()):
            saved = float(flat[i])
            flat[i] = saved + eps
            plus = mtp_joint_loss(example, draft, alpha, beta, depth).tensor
            flat[i] = saved - eps
            minus = mtp_joint_loss(example, draft, alpha, beta, depth).tensor
            flat[i] = saved
            numeric.view(-1)[i] = (plus - minus) / (2 * eps)
    draft.zero_grad()
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


# -- borrador -----------------------------------------------------------------


def _keep_indices(example: TrainExample, fraction: float, rng: Rng) -> Optional[List[int]]:
    if fraction >= 1.0 or example.l_vis == 0:
        return None
    count = int(round(fraction * example.l_vis))
    return sorted(int(i) for i in rng.choice(example.l_vis, count))


def train_stage(draft: DraftModel, examples: Sequence[TrainExample], cfg: TrainConfig, optimizer,
                rng: Rng, log: list):
    """Una etapa del calendario: ``cfg.epochs`` pasadas barajadas sobre ``examples``."""
    if not examples or cfg.epochs == 0:
        return
    shuffle = rng.torch_generator()
    keep_rng = Rng(cfg.seed, VISUAL_KEEP_STREAM)
    step = len(log)
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(examples), generator=shuffle).tolist()
        batches = range(0, len(order), cfg.batch_size)
        for start in tqdm(batches, desc=f'{cfg.stage} {epoch}', disable=not cfg.progress):
            reports = []
            for i in order[start:start + cfg.batch_size]:
                keep = _keep_indices(examples[i], cfg.visual_keep, keep_rng) if cfg.stage == MULTIMODAL else None
                reports.append(mtp_joint_loss(examples[i], draft, cfg.alpha, cfg.beta, cfg.mtp_depth, keep))
            loss = torch.stack([r.tensor for r in reports]).mean()
            if not torch.isfinite(loss):
                raise DivergenceError(f"perdida no finita en {cfg.stage} epoca {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            fields = [sum(getattr(r, name) for r in reports) / len(reports)
                      for name in ('pass1_token_loss', 'pass1_state_loss', 'pass2_token_loss', 'pass2_state_loss')]
            mean = LossReport(*fields, combine(cfg.alpha, cfg.beta, *fields))
            log.append(mean.as_record(stage=cfg.stage, epoch=epoch, step=step))
            step += 1
        logger.info("%s epoch=%d total=%.4f", cfg.stage, epoch, log[-1]['total'])


def train_draft_two_stage(target: TargetModel, draft_cfg: DraftConfig, stage1: TrainConfig, stage2: TrainConfig,
                          text_examples: Sequence[TrainExample], multimodal_examples: Sequence[TrainExample]):
    """
    Calendario de dos etapas: primero solo texto (``L_vis = 0``) y despues un cambio
    directo a datos multimodales con bloque IVSB.

    Retorna:
    --------
    tuple
        ``(DraftModel, registros por paso)``
    """
    if any(e.l_vis for e in text_examples):
        raise ConfigError("la etapa de solo texto no admite bloques visuales")
    target.requires_grad_(False)
    draft = DraftModel(draft_cfg, target, generator=Rng(stage1.seed, DRAFT_INIT_STREAM).torch_generator())
    draft.train()
    optimizer = torch.optim.Adam(draft.parameters(), lr=stage1.lr)
    shuffle = Rng(stage1.seed, DRAFT_SHUFFLE_STREAM)
    log: list = []
    train_stage(draft, text_examples, stage1, optimizer, shuffle, log)
    for group in optimizer.param_groups:
        group['lr'] = stage2.lr
    train_stage(draft, multimodal_examples, stage2, optimizer, shuffle, log)
    draft.eval()
    if log and not math.isfinite(log[-1]['total']):
        raise DivergenceError("perdida final no finita")
    return draft, log


def stage_configs(values: dict, seed: int):
    """Par de ``TrainConfig`` (etapa 1, etapa 2) a partir de la configuracion plana."""
    common = dict(lr=values['draft_lr'], batch_size=values['batch_size'], alpha=values['alpha'],
                  beta=values['beta'], seed=seed, mtp_depth=values['mtp_depth'], progress=values['progress'])
    return (TrainConfig(epochs=values['stage1_epochs'], stage=TEXT_ONLY, **common),
            TrainConfig(epochs=values['stage2_epochs'], stage=MULTIMODAL,
                        visual_keep=values['train_visual_keep'], **common))


def build_examples(target: TargetModel, task, count: int, l_vis_choices: Sequence[int], seed: int):
    """
    Datos de las dos etapas a partir de las mismas secuencias: la version de solo texto
    (sin bloque visual) para la etapa 1 y la multimodal para la etapa 2.
    """
    from .bench.workloads import training_sequences

    sequences = training_sequences(task, count, l_vis_choices, seed)
    text_only = [TokenSequence.text_only(s.text, target.cfg.hidden_dim) for s in sequences]
    return teacher_trace(text_only, target), teacher_trace(sequences, target)
