"""
Run Reports - pandas views over metrics streams, sample archives and the ledger
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

import checkpoint_store
from run_ledger import RunLedger, flatten_report

logger = logging.getLogger(__name__)

MOVING_WINDOW = 20


def metrics_frame(path, window: int = MOVING_WINDOW) -> pd.DataFrame:
    """One row per NDJSON record plus trailing moving averages of the loss columns"""
    path = Path(path)
    records = [json.loads(line) for line in path.read_text(encoding='utf-8').splitlines() if line.strip()]
    frame = pd.DataFrame.from_records(records)
    if frame.empty:
        return frame
    frame = frame.drop_duplicates(subset='step', keep='last').sort_values('step').reset_index(drop=True)
    for column in ('nf_loss', 'align_loss', 'total'):
        if column in frame:
            frame[f'{column}_ma'] = frame[column].rolling(window, min_periods=1).mean()
    return frame


def loss_trend(frame: pd.DataFrame, column: str = 'nf_loss', window: int = MOVING_WINDOW) -> Dict:
    """Means over consecutive non-overlapping windows and whether they strictly decrease"""
    values = frame[column].to_numpy()
    blocks = [float(values[i:i + window].mean()) for i in range(0, len(values) - window + 1, window)]
    return {
        'window_means': blocks,
        'strictly_decreasing': bool(len(blocks) >= 2 and np.all(np.diff(blocks) < 0)),
        'drop': float(values[0] - blocks[-1]) if blocks else 0.0,
    }


def samples_frame(path) -> pd.DataFrame:
    """Sample archive as rows of label + flattened coordinates x0, x1, ..."""
    arrays, meta = checkpoint_store.read_archive(path)
    if meta.get('kind') != 'samples':
        raise ValueError(f"{path} is not a sample archive")
    samples = arrays['samples'].reshape(len(arrays['samples']), -1)
    frame = pd.DataFrame(samples, columns=[f'x{i}' for i in range(samples.shape[1])])
    frame.insert(0, 'label', arrays['labels'].astype(int))
    return frame


def ledger_frame(ledger: RunLedger, kind: Optional[str] = None) -> pd.DataFrame:
    """Ledger history with every numeric report field as a column"""
    rows = []
    for entry in ledger.history(kind=kind):
        row = {'id': entry['id'], 'kind': entry['kind'], 'checkpoint': entry['checkpoint'],
               'recorded_at': pd.to_datetime(entry['recorded_at']), 'success': entry['success']}
        row.update(flatten_report(entry['report']))
        rows.append(row)
    frame = pd.DataFrame(rows)
    return frame.sort_values('id').reset_index(drop=True) if not frame.empty else frame
