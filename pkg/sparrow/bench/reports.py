"""
Escritura de resultados: JSON lines y un CSV por analogo de figura/tabla.

Columnas:

- ``table5.csv``: label, method, l_vis, generated_tokens, target_calls, prefill_time, decode_time,
  wall_time, tau, prefill_ratio, latency_per_step, dsr, esr
- ``fig1a.csv``: label, method, l_vis, tau
- ``fig3a.csv``: layer_x, accuracy
- ``fig3b.csv``: layer, head, visual_attention, text_attention
- ``retention.csv``: level, visual, text
- ``pruning.csv``: fraction, ranking, tau
- ``draft_cost.csv``: method, l_vis, multiplies, cache_rows
"""
import logging
from pathlib import Path
from typing import Iterable, List, Sequence

import pandas as pd

logger = logging.getLogger(__name__)

TABLE5_COLUMNS = ['label', 'method', 'l_vis', 'generated_tokens', 'target_calls', 'prefill_time', 'decode_time',
                  'wall_time', 'tau', 'prefill_ratio', 'latency_per_step', 'dsr', 'esr']


def _write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info("csv %s rows=%d", path, len(frame))
    return path


def write_jsonl(records: Iterable[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(records))
    if frame.empty:
        path.write_text('')
    else:
        frame.to_json(path, orient='records', lines=True)
    return path


def read_jsonl(path) -> List[dict]:
    path = Path(path)
    if not path.read_text().strip():
        return []
    return pd.read_json(path, orient='records', lines=True).to_dict(orient='records')


def write_table5(report, path) -> Path:
    return _write_csv(pd.DataFrame(report.summary_rows(), columns=TABLE5_COLUMNS), path)


def write_fig1a(report, path) -> Path:
    frame = pd.DataFrame(report.summary_rows(), columns=TABLE5_COLUMNS)[['label', 'method', 'l_vis', 'tau']]
    return _write_csv(frame, path)


def write_fig3a(series: Sequence[tuple], path) -> Path:
    return _write_csv(pd.DataFrame(series, columns=['layer_x', 'accuracy']), path)


def write_fig3b(visual, text, path) -> Path:
    rows = []
    for layer in range(visual.shape[0]):
        for head in range(visual.shape[1]):
            rows.append((layer, head, float(visual[layer, head]), float(text[layer, head])))
    return _write_csv(pd.DataFrame(rows, columns=['layer', 'head', 'visual_attention', 'text_attention']), path)


def write_retention(visual: Sequence[float], text: Sequence[float], path) -> Path:
    frame = pd.DataFrame({'level': range(len(visual)), 'visual': list(visual), 'text': list(text)})
    return _write_csv(frame, path)


def write_pruning(series: Sequence[tuple], ranking: str, path) -> Path:
    frame = pd.DataFrame([(f, ranking, tau) for f, tau in series], columns=['fraction', 'ranking', 'tau'])
    return _write_csv(frame, path)


def write_draft_cost(rows: Sequence[tuple], path) -> Path:
    return _write_csv(pd.DataFrame(rows, columns=['method', 'l_vis', 'multiplies', 'cache_rows']), path)
