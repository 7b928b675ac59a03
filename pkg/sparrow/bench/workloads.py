"""
Cargas de trabajo sinteticas.

Tarea "grounded": el bloque visual contiene ``tagged`` items con una etiqueta de
ranura y un simbolo del alfabeto; el resto son items de relleno (en blanco sin ruido,
simbolos distractores con ruido). El texto pregunta por ``k`` ranuras y la
continuacion correcta son los simbolos de esas ranuras, de modo que la informacion
visual es necesaria y se puede puntuar.

Vocabulario (A = alfabeto visual): ``0..A-1`` simbolos, luego BOS, QUERY, ANSWER,
EOS, las ranuras y por ultimo los tokens del "canto" que sigue a la respuesta.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from ..exceptions import ConfigError, SequenceError
from ..model import TokenSequence
from ..numkernel import Rng

logger = logging.getLogger(__name__)

GROUNDED = 'grounded_task'
RANDOM_MODEL = 'random_model'
KINDS = (GROUNDED, RANDOM_MODEL)


@dataclass(frozen=True)
class TaskConfig:
    visual_alphabet: int = 16
    num_slots: int = 8
    tagged: int = 4
    query_slots: int = 2
    chant_len: int = 24
    noise: bool = True
    jitter: float = 0.05
    codebook_seed: int = 1234
    vocab_size: int = 256
    hidden_dim: int = 64
    max_positions: int = 4608

    def __post_init__(self):
        if not 0 <= self.query_slots <= self.tagged <= self.num_slots:
            raise ConfigError("se requiere 0 <= query_slots <= tagged <= num_slots")
        if self.chant_base >= self.vocab_size:
            raise ConfigError(f"vocab_size={self.vocab_size} no deja tokens para el canto")
        if self.chant_len < 0 or self.jitter < 0:
            raise ConfigError("chant_len y jitter deben ser >= 0")

    @property
    def bos(self) -> int:
        return self.visual_alphabet

    @property
    def query(self) -> int:
        return self.visual_alphabet + 1

    @property
    def answer(self) -> int:
        return self.visual_alphabet + 2

    @property
    def eos(self) -> int:
        return self.visual_alphabet + 3

    @property
    def slot_base(self) -> int:
        return self.visual_alphabet + 4

    @property
    def chant_base(self) -> int:
        return self.slot_base + self.num_slots

    @property
    def chant_size(self) -> int:
        return self.vocab_size - self.chant_base

    @classmethod
    def for_model(cls, model_cfg, **kwargs) -> 'TaskConfig':
        return cls(visual_alphabet=model_cfg.visual_alphabet, vocab_size=model_cfg.vocab_size,
                   hidden_dim=model_cfg.hidden_dim, max_positions=model_cfg.max_positions, **kwargs)


@dataclass(frozen=True)
class Workload:
    kind: str = GROUNDED
    l_vis: int = 64
    text_len: int = 8
    num_prompts: int = 8
    seed: int = 0
    queries: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"tipo de carga desconocido {self.kind!r}")
        if self.l_vis < 0 or self.text_len < 0 or self.num_prompts < 0:
            raise ConfigError("l_vis, text_len y num_prompts deben ser >= 0")


@dataclass(frozen=True, eq=False)
class Prompt:
    seq: TokenSequence
    reference: tuple = ()


@dataclass(frozen=True, eq=False)
class Codebook:
    symbols: torch.Tensor
    slots: torch.Tensor


_CODEBOOKS = {}


def codebook(task: TaskConfig) -> Codebook:
    """Vectores de simbolo y de ranura, fijados por ``codebook_seed``."""
    key = (task.codebook_seed, task.visual_alphabet, task.num_slots, task.hidden_dim)
    if key not in _CODEBOOKS:
        rng = Rng(task.codebook_seed, stream=0)
        symbols = torch.from_numpy(rng.normal((task.visual_alphabet, task.hidden_dim))).to(torch.float32)
        slots = torch.from_numpy(rng.normal((task.num_slots, task.hidden_dim))).to(torch.float32)
        _CODEBOOKS[key] = Codebook(symbols, slots)
    return _CODEBOOKS[key]


def chant(answers: Sequence[int], task: TaskConfig) -> List[int]:
    """Continuacion larga y determinista que depende de las respuestas."""
    if task.chant_len == 0:
        return []
    size = task.chant_size
    current = (sum(int(a) for a in answers) * 7) % size
    out = [task.chant_base + current]
    for _ in range(task.chant_len - 1):
        current = (current * 5 + 3) % size
        out.append(task.chant_base + current)
    return out


def prompt_text(slots: Sequence[int], task: TaskConfig) -> List[int]:
    return [task.bos, task.query] + [task.slot_base + int(s) for s in slots] + [task.answer]


def _grounded_prompt(workload: Workload, task: TaskConfig, rng: Rng) -> Prompt:
    if workload.l_vis < task.tagged:
        raise SequenceError(f"l_vis={workload.l_vis} no alcanza para {task.tagged} items etiquetados")
    k = task.query_slots if workload.queries is None else workload.queries
    if not 0 <= k <= task.tagged:
        raise ConfigError(f"queries={k} fuera de [0, {task.tagged}]")
    book = codebook(task)
    positions = np.sort(rng.choice(workload.l_vis, task.tagged))
    rows = torch.as_tensor(positions)
    slots = rng.choice(task.num_slots, task.tagged)
    tagged_symbols = rng.integers(0, task.visual_alphabet, task.tagged)
    if task.noise:
        symbols = rng.integers(0, task.visual_alphabet, workload.l_vis)
    else:
        symbols = np.zeros(workload.l_vis, dtype=np.int64)
    jitter = torch.from_numpy(rng.normal((workload.l_vis, task.hidden_dim))).to(torch.float32) * task.jitter
    visual = jitter
    symbols[positions] = tagged_symbols
    if task.noise:
        visual = visual + book.symbols[torch.as_tensor(symbols)]
    else:
        visual[rows] += book.symbols[torch.as_tensor(tagged_symbols)]
    visual[rows] += book.slots[torch.as_tensor(slots)]
    asked = rng.choice(task.tagged, k)
    text = prompt_text([slots[i] for i in asked], task)
    reference = tuple(int(tagged_symbols[i]) for i in asked)
    return Prompt(TokenSequence(visual, tuple(int(s) for s in symbols), tuple(text)), reference)


def _random_prompt(workload: Workload, task: TaskConfig, rng: Rng) -> Prompt:
    visual = torch.from_numpy(rng.normal((workload.l_vis, task.hidden_dim))).to(torch.float32)
    symbols = tuple(int(s) for s in rng.integers(0, task.visual_alphabet, workload.l_vis))
    text = tuple(int(t) for t in rng.integers(0, task.vocab_size, workload.text_len))
    return Prompt(TokenSequence(visual, symbols, text))


def gen_workload(workload: Workload, task: TaskConfig) -> List[Prompt]:
    """
    Genera los prompts de una carga; funcion pura de ``workload.seed``.

    Retorna:
    --------
    list of Prompt
        Secuencia del prompt y continuacion de referencia (vacia para ``random_model``).
    """
    text_len = workload.text_len
    if workload.kind == GROUNDED:
        k = task.query_slots if workload.queries is None else workload.queries
        text_len = k + 3
    if workload.l_vis + text_len > task.max_positions:
        raise SequenceError(f"l_vis={workload.l_vis} + texto={text_len} excede max_positions={task.max_positions}")
    base = Rng(workload.seed)
    build = _grounded_prompt if workload.kind == GROUNDED else _random_prompt
    prompts = [build(workload, task, base.child(i + 1)) for i in range(workload.num_prompts)]
    logger.debug("workload %s l_vis=%d prompts=%d", workload.kind, workload.l_vis, len(prompts))
    return prompts


def training_sequence(prompt: Prompt, task: TaskConfig) -> TokenSequence:
    """Prompt + respuestas + canto + EOS: la secuencia completa que ve el entrenamiento."""
    tail = list(prompt.reference) + chant(prompt.reference, task) + [task.eos]
    return prompt.seq.extend(tail)


def training_sequences(task: TaskConfig, count: int, l_vis_choices: Sequence[int], seed: int) -> List[TokenSequence]:
    """``count`` secuencias de entrenamiento repartidas en ciclo sobre ``l_vis_choices``."""
    rng = Rng(seed, stream=7)
    out = []
    for i in range(count):
        l_vis = int(l_vis_choices[i % len(l_vis_choices)])
        workload = Workload(GROUNDED, l_vis, num_prompts=1, seed=int(rng.integers(0, 2**62)))
        out.append(training_sequence(gen_workload(workload, task)[0], task))
    return out


@torch.no_grad()
def grounded_accuracy(model, prompts: Sequence[Prompt], logits_fn=None) -> float:
    """
    Exactitud con teacher forcing: fraccion de simbolos de referencia que coinciden con el
    argmax en la posicion anterior a cada uno. ``logits_fn(seq)`` permite evaluar pasadas
    alternativas (p. ej. con truncado visual).
    """
    correct = total = 0
    for prompt in prompts:
        if not prompt.reference:
            continue
        seq = prompt.seq.extend(prompt.reference)
        logits = logits_fn(seq) if logits_fn is not None else model.prefill(seq).logits
        base = len(prompt.seq) - 1
        for i, symbol in enumerate(prompt.reference):
            correct += int(torch.argmax(logits[base + i])) == symbol
            total += 1
    return correct / total if total else 0.0


def prompts_to_records(prompts: Sequence[Prompt]) -> List[dict]:
    """Formato de archivo de prompts (JSON lines): prompt_id, text, symbols, visual, reference."""
    return [{
        'prompt_id': i,
        'text': list(p.seq.text),
        'symbols': list(p.seq.symbols),
        'visual': p.seq.visual.tolist(),
        'reference': list(p.reference),
    } for i, p in enumerate(prompts)]


def prompts_from_records(records: Sequence[dict], dim: int) -> List[Prompt]:
    out = []
    for record in records:
        if 'text' not in record:
            raise SequenceError("cada prompt necesita un campo 'text'")
        visual_rows = record.get('visual') or []
        visual = torch.tensor(visual_rows, dtype=torch.float32) if visual_rows else torch.zeros(0, dim)
        symbols = tuple(int(s) for s in (record.get('symbols') or [0] * visual.shape[0]))
        seq = TokenSequence(visual, symbols, tuple(int(t) for t in record['text']))
        out.append(Prompt(seq, tuple(int(t) for t in (record.get('reference') or ()))))
    return out
