"""
Motor de borrador/verificacion: crecimiento dinamico del arbol de candidatos,
linealizacion con mascara de ancestros, verificacion greedy y por muestreo sin
perdida, y el bucle de decodificacion completo con sus estadisticas.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .draft import FULL_VISUAL, FUSED_TEXT, VATA, VISUAL_STATE, build_init_input, hsr_fuse
from .exceptions import ConfigError, DistributionError, MaskError, SequenceError, ShapeError
from .model import TokenSequence
from .numkernel import Rng, gumbel_top_k, sample_categorical, softmax

logger = logging.getLogger(__name__)

SPARROW = 'sparrow'
FULL_VISUAL_DRAFT = 'full_visual_draft'
VANILLA = 'vanilla'
METHODS = (SPARROW, FULL_VISUAL_DRAFT, VANILLA)
METHOD_ALIASES = {'baseline': FULL_VISUAL_DRAFT}

LAST_INSTRUCTION = 'last_instruction'
ALL_TEXT = 'all_text'
RANKINGS = (LAST_INSTRUCTION, ALL_TEXT)

ROOT = -1


@dataclass(frozen=True)
class TreeConfig:
    """Presupuesto del arbol: ``total_tokens-depth-width`` (p. ej. ``30-4-8``)."""
    total_tokens: int = 30
    depth: int = 4
    width: int = 8

    def __post_init__(self):
        if self.total_tokens < 1 or self.depth < 1 or self.width < 1:
            raise ConfigError(f"arbol invalido {self}: los tres valores deben ser >= 1")

    @classmethod
    def parse(cls, text: str) -> 'TreeConfig':
        parts = str(text).strip().split('-')
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ConfigError(f"arbol mal formado {text!r}; se espera T-D-W")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return f"{self.total_tokens}-{self.depth}-{self.width}"


def resolve_method(name: str) -> str:
    method = METHOD_ALIASES.get(name, name)
    if method not in METHODS:
        raise ConfigError(f"metodo desconocido {name!r}; opciones: {', '.join(METHODS + tuple(METHOD_ALIASES))}")
    return method


@dataclass
class TreeNode:
    token: int
    parent: int
    depth: int
    q: float
    cum_logp: float


@dataclass
class DraftTree:
    """
    Arbol de candidatos anclado en el ultimo token generado (la raiz, aun fuera de la
    cache del objetivo). ``distributions`` guarda la distribucion del borrador de cada
    nodo expandido; la clave ``ROOT`` es la raiz.
    """
    root_token: int
    nodes: List[TreeNode] = field(default_factory=list)
    distributions: Dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.nodes)

    def add(self, token: int, parent: int, depth: int, q: float) -> int:
        base = 0.0 if parent == ROOT else self.nodes[parent].cum_logp
        self.nodes.append(TreeNode(int(token), parent, depth, float(q), base + math.log(q)))
        return len(self.nodes) - 1

    def cum_logp(self, index: int) -> float:
        return 0.0 if index == ROOT else self.nodes[index].cum_logp

    def children(self, index: int) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.parent == index]

    def ancestors(self, index: int) -> List[int]:
        """Ancestros de ``index`` (sin la raiz), del mas cercano al mas lejano."""
        out, seen = [], {index}
        parent = self.nodes[index].parent
        while parent != ROOT:
            if parent in seen or not 0 <= parent < len(self.nodes):
                raise MaskError(f"enlaces de padre ciclicos o invalidos en el nodo {index}")
            seen.add(parent)
            out.append(parent)
            parent = self.nodes[parent].parent
        return out

    @property
    def max_depth(self) -> int:
        return max((n.depth for n in self.nodes), default=0)


@dataclass
class VerificationResult:
    accepted_path: List[int]
    bonus_token: int
    decisions: List[tuple] = field(default_factory=list)

    @property
    def accepted_len(self) -> int:
        return len(self.accepted_path)

    def keep(self) -> List[int]:
        """Indices provisionales a confirmar: la raiz (0) y el camino aceptado."""
        return [0] + [i + 1 for i in self.accepted_path]


@dataclass
class DecodeStats:
    generated_tokens: int = 0
    target_calls: int = 0
    draft_steps: int = 0
    wall_time: float = 0.0
    decode_time: float = 0.0
    prefill_time: float = 0.0
    accepted_lengths: List[int] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return self.generated_tokens / self.target_calls if self.target_calls else 0.0

    @property
    def latency_per_step(self) -> float:
        steps = self.target_calls - 1
        return self.decode_time / steps if steps > 0 else 0.0

    def record(self, prompt_id, tokens: Sequence[int]) -> dict:
        return {
            'prompt_id': prompt_id,
            'tokens': [int(t) for t in tokens],
            'tau': self.tau,
            'target_calls': self.target_calls,
            'prefill_time_s': self.prefill_time,
            'decode_time_s': self.decode_time,
            'wall_time_s': self.wall_time,
        }


@dataclass
class DecodeOutput:
    tokens: List[int]
    stats: DecodeStats


# -- arbol --------------------------------------------------------------------


def linearize_tree(tree: DraftTree, committed_length: int = 0):
    """
    Orden lineal ``[raiz] + nodos`` con posiciones ``committed_length + profundidad``.

    Retorna:
    --------
    tuple
        ``(tokens, positions, ancestor_mask)``; ``ancestor_mask[i][j]`` es verdadero si
        ``j`` es ``i`` o un ancestro de ``i`` (la raiz es ancestro de todos).
    """
    n = len(tree.nodes) + 1
    tokens = [tree.root_token] + [node.token for node in tree.nodes]
    positions = [committed_length] + [committed_length + node.depth for node in tree.nodes]
    mask = torch.zeros(n, n, dtype=torch.bool)
    mask[:, 0] = True
    for i in range(len(tree.nodes)):
        mask[i + 1, i + 1] = True
        for a in tree.ancestors(i):
            if a >= i:
                raise MaskError("un ancestro debe preceder al nodo en el orden lineal")
            mask[i + 1, a + 1] = True
    return tokens, positions, mask


def _child_counts(tree: DraftTree, frontier: Sequence[int], width: int, budget: int) -> List[int]:
    # Cada nodo ofrece sus `width` mejores ranuras con puntaje cum + log q ordenado;
    # las `budget` mejores del conjunto fijan cuantos hijos recibe cada nodo.
    slots = []
    for f, node in enumerate(frontier):
        probs = np.sort(tree.distributions[node])[::-1][:width]
        base = tree.cum_logp(node)
        for j, p in enumerate(probs):
            if p > 0:
                slots.append((-(base + math.log(p)), f, j))
    slots.sort()
    counts = [0] * len(frontier)
    for _, f, _ in slots[:budget]:
        counts[f] += 1
    return counts


def _select_children(probs: np.ndarray, k: int, temperature: float, rng: Optional[Rng]) -> List[int]:
    if temperature == 0 or rng is None:
        return [int(i) for i in np.argsort(-probs, kind='stable')[:k]]
    with np.errstate(divide='ignore'):
        logp = np.log(probs)
    return [int(i) for i in gumbel_top_k(logp, k, rng)]


def grow_tree(session: 'DecodeSession', cfg: TreeConfig) -> DraftTree:
    """
    Crece el arbol por niveles hasta agotar la profundidad o ``total_tokens``.

    En cada nivel los nodos de la frontera reparten hasta ``width`` hijos segun su
    probabilidad acumulada; los hijos nuevos se expanden con el propio borrador
    (fusion HSR con el estado oculto del borrador del padre).
    """
    if session.root_probs is None:
        raise SequenceError("grow_tree sin contexto confirmado")
    tree = DraftTree(session.root_token)
    tree.distributions[ROOT] = session.root_probs
    hidden = {ROOT: session.root_hidden}
    frontier = [ROOT]
    depth_cap = min(cfg.depth, session.depth_cap)
    for depth in range(1, depth_cap + 1):
        budget = min(cfg.width, cfg.total_tokens - len(tree))
        if budget <= 0 or not frontier:
            break
        counts = _child_counts(tree, frontier, cfg.width, budget)
        new = []
        for node, k in zip(frontier, counts):
            if not k:
                continue
            probs = tree.distributions[node]
            for token in _select_children(probs, k, session.temperature, session.rng):
                new.append(tree.add(token, node, depth, probs[token]))
        if depth == depth_cap or len(tree) >= cfg.total_tokens:
            break
        states, dists = session.expand(tree, new, hidden)
        for index, h, p in zip(new, states, dists):
            hidden[index] = h
            tree.distributions[index] = p
        frontier = new
    return tree


# -- verificacion -------------------------------------------------------------


def verify_greedy(tree: DraftTree, target_logits: torch.Tensor) -> VerificationResult:
    """Sigue desde la raiz al hijo cuyo token es el argmax del objetivo en el nodo actual."""
    if target_logits.shape[0] != len(tree) + 1:
        raise ShapeError(f"{target_logits.shape[0]} filas de logits para {len(tree) + 1} nodos")
    path, decisions = [], []
    current = ROOT
    while True:
        best = int(torch.argmax(target_logits[current + 1]))
        match = None
        for child in tree.children(current):
            accepted = tree.nodes[child].token == best
            decisions.append((child, accepted))
            if accepted:
                match = child
                break
        if match is None:
            return VerificationResult(path, best, decisions)
        path.append(match)
        current = match


def verify_sampling(tree: DraftTree, target_probs: np.ndarray, rng: Rng) -> VerificationResult:
    """
    Verificacion sin perdida sobre conjuntos de hermanos.

    En cada nodo aceptado se recorren los hijos en el orden del arbol: el hijo ``c`` se
    acepta con probabilidad ``min(1, p(c)/q(c))``; si se rechaza, ``p`` pasa a
    ``norm(max(p - q, 0))`` y ``q`` se renormaliza sin ``c``. Si todos se rechazan, el
    token extra se muestrea del residuo.
    """
    probs = np.asarray(target_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != len(tree) + 1:
        raise ShapeError(f"se esperaban {len(tree) + 1} distribuciones del objetivo")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise DistributionError("distribuciones del objetivo invalidas")
    path, decisions = [], []
    current = ROOT
    while True:
        p = probs[current + 1].copy()
        children = tree.children(current)
        accepted = None
        if children:
            q = np.asarray(tree.distributions[current], dtype=np.float64).copy()
            rejected = []
            for child in children:
                token = tree.nodes[child].token
                ratio = p[token] / q[token] if q[token] > 0 else 0.0
                if rng.uniform() < min(1.0, ratio):
                    accepted = child
                    decisions.append((child, True))
                    break
                decisions.append((child, False))
                rejected.append(token)
                residual = np.maximum(p - q, 0.0)
                if residual.sum() > 0:
                    p = residual / residual.sum()
                else:
                    p[rejected] = 0.0
                    p = p / p.sum()
                q[token] = 0.0
                if q.sum() > 0:
                    q = q / q.sum()
        if accepted is None:
            return VerificationResult(path, sample_categorical(p, rng), decisions)
        path.append(accepted)
        current = accepted


# -- sesion -------------------------------------------------------------------


def _distribution(logits: torch.Tensor, temperature: float) -> np.ndarray:
    return softmax(logits.to(torch.float64), temperature if temperature > 0 else 1.0).detach().numpy()


def _pick(logits: torch.Tensor, temperature: float, rng: Optional[Rng]) -> int:
    if temperature == 0:
        return int(torch.argmax(logits))
    return sample_categorical(_distribution(logits, temperature), rng)


def _check_request(target, prompt: TokenSequence, temperature: float, max_tokens: int, rng):
    if max_tokens < 0:
        raise ConfigError("max_tokens debe ser >= 0")
    if not math.isfinite(temperature) or temperature < 0:
        raise ConfigError(f"temperatura invalida: {temperature}")
    if temperature > 0 and rng is None:
        raise ConfigError("el muestreo requiere un Rng")
    prompt.validate(target.cfg)
    if len(prompt) + max_tokens - 1 > target.cfg.max_positions:
        raise SequenceError(f"prompt de {len(prompt)} + {max_tokens} tokens excede max_positions")


def visual_keep_set(attention: List[torch.Tensor], prompt: TokenSequence, fraction: float,
                    ranking: str = LAST_INSTRUCTION) -> List[int]:
    """
    Filas visuales a conservar: el ``fraction`` superior segun la atencion de la ultima
    capa, desde el ultimo token de instruccion o promediada sobre todo el texto.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraccion de retencion {fraction} fuera de [0, 1]")
    if ranking not in RANKINGS:
        raise ConfigError(f"ranking desconocido {ranking!r}")
    keep = int(round(fraction * prompt.l_vis))
    if keep >= prompt.l_vis:
        return list(range(prompt.l_vis))
    if keep == 0:
        return []
    # attention[-1]: (H, filas capturadas, L) de la ultima capa
    final = attention[-1][..., :prompt.l_vis].to(torch.float64)
    if ranking == LAST_INSTRUCTION:
        scores = final[:, -1].sum(dim=0)
    else:
        scores = final.sum(dim=0).mean(dim=0)
    order = torch.argsort(-scores, stable=True)[:keep]
    return sorted(int(i) for i in order)


def capture_rows(prompt: TokenSequence, ranking: str) -> List[int]:
    last = len(prompt) - 1
    if ranking == ALL_TEXT and prompt.l_txt:
        return list(range(prompt.l_vis, len(prompt)))
    return [last]


class DecodeSession:
    """
    Estado de una decodificacion especulativa: caches del objetivo y del borrador, la
    raiz actual y su distribucion del borrador. Una sesion es estrictamente secuencial.
    """

    def __init__(self, target, draft, tree_cfg: TreeConfig, temperature: float = 0.0,
                 rng: Optional[Rng] = None, method: str = SPARROW, visual_fraction: float = 1.0,
                 ranking: str = LAST_INSTRUCTION):
        if draft is None:
            raise ConfigError("la decodificacion especulativa requiere un borrador")
        self.target = target
        self.draft = draft
        self.tree_cfg = tree_cfg
        self.temperature = float(temperature)
        self.rng = rng
        self.method = method
        self.visual_fraction = visual_fraction
        self.ranking = ranking
        self.stats = DecodeStats()
        self.output: List[int] = []
        self.target_cache = None
        self.draft_cache = None
        self.draft_position = 0
        self.root_token: Optional[int] = None
        self.root_hidden: Optional[torch.Tensor] = None
        self.root_probs: Optional[np.ndarray] = None
        self.depth_cap = tree_cfg.depth
        self._rows: Dict[int, int] = {}

    # -- borrador ---------------------------------------------------------

    def feed(self, tokens: Sequence[int], h_prev: torch.Tensor):
        """Confirma filas fusionadas con estados del objetivo; la ultima es la raiz."""
        e = self.draft.embed_tokens(list(tokens))
        empty = torch.zeros(0, e.shape[1], dtype=e.dtype)
        inp = build_init_input(empty, e, h_prev.to(e.dtype), self.draft.fc)
        positions = torch.arange(self.draft_position, self.draft_position + len(tokens))
        out = self.draft.step(inp.rows, positions, self.draft_cache, inp.tags)
        self.stats.draft_steps += 1
        self.draft_position += len(tokens)
        self.root_token = int(tokens[-1])
        self.root_hidden = out.hidden[-1]
        self.root_probs = _distribution(out.logits[-1], self.temperature)

    def expand(self, tree: DraftTree, nodes: Sequence[int], hidden: Dict[int, torch.Tensor]):
        """Pasa los nodos nuevos por el borrador como filas provisionales."""
        n = len(nodes)
        tokens = [tree.nodes[i].token for i in nodes]
        parents = torch.stack([hidden[tree.nodes[i].parent] for i in nodes])
        rows = hsr_fuse(self.draft.embed_tokens(tokens), parents, self.draft.fc)
        root_position = self.draft_position - 1
        positions = torch.tensor([root_position + tree.nodes[i].depth for i in nodes])
        visible = torch.zeros(n, self.draft_cache.provisional, dtype=torch.bool)
        for r, i in enumerate(nodes):
            for a in tree.ancestors(i):
                visible[r, self._rows[a]] = True
        start = self.draft_cache.provisional
        out = self.draft.step(rows, positions, self.draft_cache, [FUSED_TEXT] * n, visible, commit=False)
        for r, i in enumerate(nodes):
            self._rows[i] = start + r
        self.stats.draft_steps += 1
        dists = [_distribution(row, self.temperature) for row in out.logits]
        return list(out.hidden), dists

    # -- bucle ------------------------------------------------------------

    def start(self, prompt: TokenSequence):
        capture = None
        if self.method == FULL_VISUAL_DRAFT and prompt.l_vis and self.visual_fraction < 1.0:
            capture = capture_rows(prompt, self.ranking)
        t0 = time.perf_counter()
        result = self.target.prefill(prompt, capture=capture)
        first = _pick(result.logits[-1], self.temperature, self.rng)
        self.stats.prefill_time = time.perf_counter() - t0
        self.stats.target_calls = 1
        self.target_cache = result.cache
        self.output = [first]

        penult = result.trace.level(self.target.cfg.penultimate)
        tokens = list(prompt.text) + [first]
        padded = torch.cat((torch.zeros(1, penult.shape[1], dtype=penult.dtype), penult), dim=0)
        h_prev = padded[prompt.l_vis:len(prompt) + 1]
        if self.method == FULL_VISUAL_DRAFT:
            self.draft_cache = self.draft.new_cache(FULL_VISUAL)
            keep = list(range(prompt.l_vis))
            if capture is not None:
                keep = visual_keep_set(result.attention, prompt, self.visual_fraction, self.ranking)
            if keep:
                raw = result.trace.level(0)[keep].to(self.draft.dtype)
                self.draft.step(raw, torch.tensor(keep), self.draft_cache, [VISUAL_STATE] * len(keep))
                self.stats.draft_steps += 1
            self.draft_position = prompt.l_vis
        else:
            self.draft_cache = self.draft.new_cache(VATA)
            self.draft_position = 0
        self.feed(tokens, h_prev)

    def step(self, remaining: int) -> VerificationResult:
        """Una iteracion: crecer el arbol, verificar, confirmar y refrescar el borrador."""
        self.depth_cap = max(0, remaining - 1)
        self._rows = {}
        tree = grow_tree(self, self.tree_cfg)
        committed = self.target_cache.length
        tokens, positions, mask = linearize_tree(tree, committed)
        verified = self.target.verify_batch(self.target_cache, tokens, mask, positions)
        self.stats.target_calls += 1
        if self.temperature == 0:
            result = verify_greedy(tree, verified.logits)
        else:
            probs = np.stack([_distribution(row, self.temperature) for row in verified.logits])
            result = verify_sampling(tree, probs, self.rng)
        keep = result.keep()
        self.target_cache.commit_prefix(keep)
        self.draft_cache.rollback()
        self.stats.accepted_lengths.append(result.accepted_len)
        new_tokens = [tree.nodes[i].token for i in result.accepted_path] + [result.bonus_token]
        self._pending = (new_tokens, verified.penultimate[keep])
        logger.debug("verify nodes=%d accepted=%d", len(tree), result.accepted_len)
        return result

    def run(self, prompt: TokenSequence, max_tokens: int, stop_token: Optional[int] = None) -> DecodeOutput:
        t0 = time.perf_counter()
        if max_tokens == 0:
            return DecodeOutput([], self.stats)
        self.start(prompt)
        done = self._trim(max_tokens, stop_token)
        while not done:
            self.step(max_tokens - len(self.output))
            new_tokens, h_prev = self._pending
            self.output.extend(new_tokens)
            done = self._trim(max_tokens, stop_token)
            if not done:
                self.feed(new_tokens, h_prev)
        self.stats.generated_tokens = len(self.output)
        self.stats.wall_time = time.perf_counter() - t0
        self.stats.decode_time = max(0.0, self.stats.wall_time - self.stats.prefill_time)
        return DecodeOutput(list(self.output), self.stats)

    def _trim(self, max_tokens: int, stop_token: Optional[int]) -> bool:
        if stop_token is not None and stop_token in self.output:
            del self.output[self.output.index(stop_token) + 1:]
        if len(self.output) >= max_tokens:
            del self.output[max_tokens:]
            return True
        return stop_token is not None and self.output[-1] == stop_token


def decode(target, draft, prompt: TokenSequence, tree_cfg: TreeConfig = TreeConfig(), temperature: float = 0.0,
           max_tokens: int = 32, stop_token: Optional[int] = None, rng: Optional[Rng] = None,
           method: str = SPARROW, visual_fraction: float = 1.0, ranking: str = LAST_INSTRUCTION) -> DecodeOutput:
    """
    Decodificacion especulativa de ``prompt``.

    Parámetros:
    -----------
    target : TargetModel
        Modelo objetivo; define la distribucion de salida.
    draft : DraftModel
        Borrador (ignorado con ``method='vanilla'``).
    tree_cfg : TreeConfig
        Presupuesto del arbol.
    temperature : float
        0 para greedy; > 0 para muestreo verificado sin perdida.
    method : str
        ``sparrow`` (VATA), ``full_visual_draft`` (borrador con filas visuales crudas) o ``vanilla``.
    visual_fraction : float
        Solo para ``full_visual_draft``: fraccion de filas visuales conservadas.

    Retorna:
    --------
    DecodeOutput
        Tokens generados y estadisticas (``tau = generados / llamadas al objetivo``).
    """
    method = resolve_method(method)
    if method == VANILLA:
        return vanilla_decode(target, prompt, temperature, max_tokens, stop_token, rng)
    _check_request(target, prompt, temperature, max_tokens, rng)
    session = DecodeSession(target, draft, tree_cfg, temperature, rng, method, visual_fraction, ranking)
    with torch.no_grad():
        return session.run(prompt, max_tokens, stop_token)


def vanilla_decode(target, prompt: TokenSequence, temperature: float = 0.0, max_tokens: int = 32,
                   stop_token: Optional[int] = None, rng: Optional[Rng] = None) -> DecodeOutput:
    """Decodificacion autorregresiva token a token; una llamada al objetivo por token."""
    _check_request(target, prompt, temperature, max_tokens, rng)
    stats = DecodeStats()
    t0 = time.perf_counter()
    output: List[int] = []
    if max_tokens:
        result = target.prefill(prompt)
        output.append(_pick(result.logits[-1], temperature, rng))
        stats.prefill_time = time.perf_counter() - t0
        stats.target_calls = 1
        cache = result.cache
        while len(output) < max_tokens and output[-1] != stop_token:
            step = target.decode_step(cache, output[-1])
            stats.target_calls += 1
            output.append(_pick(step.logits[-1], temperature, rng))
    stats.generated_tokens = len(output)
    stats.accepted_lengths = [0] * max(0, stats.target_calls - 1)
    stats.wall_time = time.perf_counter() - t0
    stats.decode_time = max(0.0, stats.wall_time - stats.prefill_time)
    return DecodeOutput(output, stats)
