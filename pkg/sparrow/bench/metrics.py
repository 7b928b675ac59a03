"""
Metricas de benchmark: tau, DSR, ESR y el desglose de prefill / latencia por paso.

Todos los campos derivados se recalculan a partir de los contadores crudos, de modo
que cualquier lector del CSV puede verificar la aritmetica exactamente.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..exceptions import CheckpointError, ConfigError
from ..numkernel import Rng
from ..specdec import LAST_INSTRUCTION, SPARROW, VANILLA, TreeConfig, decode, resolve_method

logger = logging.getLogger(__name__)


def ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


@dataclass(frozen=True, eq=False)
class Engine:
    """Un metodo a medir: tipo de decodificacion, borrador y parametros del arbol/poda."""
    method: str = SPARROW
    draft: object = None
    tree_cfg: TreeConfig = TreeConfig()
    visual_fraction: float = 1.0
    ranking: str = LAST_INSTRUCTION


@dataclass
class RunRecord:
    label: str
    method: str
    l_vis: int
    prompt_id: int
    tokens: List[int]
    generated_tokens: int
    target_calls: int
    draft_steps: int
    prefill_time: float
    decode_time: float
    wall_time: float

    @property
    def tau(self) -> float:
        return ratio(self.generated_tokens, self.target_calls)


@dataclass
class MethodSummary:
    label: str
    method: str
    l_vis: int
    generated_tokens: int
    target_calls: int
    prefill_time: float
    decode_time: float
    wall_time: float
    tau: float = 0.0
    prefill_ratio: float = 0.0
    latency_per_step: float = 0.0
    dsr: float = 0.0
    esr: float = 0.0

    def derive(self, vanilla: 'MethodSummary'):
        """Recalcula los campos derivados (la referencia es la corrida vanilla del mismo L_vis)."""
        self.tau = ratio(self.generated_tokens, self.target_calls)
        self.prefill_ratio = ratio(self.prefill_time, self.wall_time)
        self.latency_per_step = ratio(self.decode_time, self.target_calls - 1 if self.target_calls > 1 else 0)
        self.dsr = ratio(vanilla.decode_time, self.decode_time)
        self.esr = ratio(vanilla.wall_time, self.wall_time)
        return self


@dataclass
class BenchmarkReport:
    runs: List[RunRecord] = field(default_factory=list)
    summaries: List[MethodSummary] = field(default_factory=list)

    def summary(self, label: str, l_vis: Optional[int] = None) -> MethodSummary:
        for s in self.summaries:
            if s.label == label and (l_vis is None or s.l_vis == l_vis):
                return s
        raise KeyError(f"sin resumen para {label} l_vis={l_vis}")

    def extend(self, other: 'BenchmarkReport'):
        self.runs.extend(other.runs)
        self.summaries.extend(other.summaries)
        return self

    def summary_rows(self) -> List[dict]:
        return [asdict(s) for s in self.summaries]

    def run_rows(self) -> List[dict]:
        return [{**asdict(r), 'tau': r.tau} for r in self.runs]


def _trial(target, engine: Engine, prompt, prompt_id: int, label: str, temperature: float, max_tokens: int,
           stop_token, repetitions: int, warmup: int, seed: int) -> RunRecord:
    walls, decodes, prefills = [], [], []
    output = None
    for rep in range(warmup + repetitions):
        rng = Rng(seed, stream=prompt_id + 1)
        result = decode(target, engine.draft, prompt.seq, engine.tree_cfg, temperature, max_tokens, stop_token,
                        rng, engine.method, engine.visual_fraction, engine.ranking)
        if rep < warmup:
            continue
        output = output or result
        walls.append(result.stats.wall_time)
        decodes.append(result.stats.decode_time)
        prefills.append(result.stats.prefill_time)
    stats = output.stats
    return RunRecord(label, engine.method, prompt.seq.l_vis, prompt_id, output.tokens, stats.generated_tokens,
                     stats.target_calls, stats.draft_steps, float(np.median(prefills)), float(np.median(decodes)),
                     float(np.median(walls)))


def run_benchmark(target, prompts: Sequence, engines: Dict[str, Engine], temperature: float = 0.0,
                  max_tokens: int = 32, stop_token: Optional[int] = None, repetitions: int = 5, warmup: int = 1,
                  workers: int = 1, seed: int = 0) -> BenchmarkReport:
    """
    Ejecuta cada metodo sobre todos los prompts y resume por metodo.

    Parámetros:
    -----------
    target : TargetModel
        Objetivo ya entrenado.
    prompts : lista de Prompt
        Una sola longitud visual por llamada.
    engines : dict
        ``etiqueta -> Engine``; ``vanilla`` se agrega siempre como referencia de DSR/ESR.
    repetitions, warmup : int
        Los tiempos son medianas de ``repetitions`` corridas tras ``warmup`` descartadas.
    workers : int
        Prompts en paralelo (1 = serie, recomendado para latencias).

    Retorna:
    --------
    BenchmarkReport
    """
    if repetitions < 1 or warmup < 0 or workers < 1:
        raise ConfigError("repetitions >= 1, warmup >= 0 y workers >= 1")
    engines = dict(engines)
    engines.setdefault(VANILLA, Engine(VANILLA))
    for label, engine in engines.items():
        if resolve_method(engine.method) != VANILLA and engine.draft is None:
            raise CheckpointError(f"el metodo {label} no tiene borrador cargado")
    l_vis = prompts[0].seq.l_vis if prompts else 0
    report = BenchmarkReport()
    for label, engine in engines.items():
        engine = Engine(resolve_method(engine.method), engine.draft, engine.tree_cfg, engine.visual_fraction,
                        engine.ranking)
        jobs = [(target, engine, p, i, label, temperature, max_tokens, stop_token, repetitions, warmup, seed)
                for i, p in enumerate(prompts)]
        t0 = time.perf_counter()
        with torch.no_grad():
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    runs = list(pool.map(lambda job: _trial(*job), jobs))
            else:
                runs = [_trial(*job) for job in jobs]
        report.runs.extend(runs)
        report.summaries.append(MethodSummary(
            label, engine.method, l_vis,
            generated_tokens=sum(r.generated_tokens for r in runs),
            target_calls=sum(r.target_calls for r in runs),
            prefill_time=sum(r.prefill_time for r in runs),
            decode_time=sum(r.decode_time for r in runs),
            wall_time=sum(r.wall_time for r in runs),
        ))
        logger.info("bench %s l_vis=%d took %.2fs", label, l_vis, time.perf_counter() - t0)
    vanilla = report.summary(VANILLA)
    for s in report.summaries:
        s.derive(vanilla)
    return report
