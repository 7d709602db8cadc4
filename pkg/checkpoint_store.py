"""
Checkpoint Store - named-array archives on disk
One directory = manifest.txt (text index) + arrays.bin (little-endian float64)
Used for checkpoints, sample archives and injected feature archives
"""

import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = 'manifest.txt'
ARRAYS = 'arrays.bin'
ARRAY_SECTION = '[arrays]'
DTYPE = np.dtype('<f8')


class CheckpointError(ValueError):
    """Unreadable, incomplete or inconsistent archive"""


def _format_shape(shape) -> str:
    return ','.join(str(int(s)) for s in shape) if len(shape) else '-'


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == '-' else tuple(int(s) for s in text.split(','))


def write_archive(path, arrays: Dict[str, np.ndarray], meta: Optional[Dict] = None) -> Path:
    """Write arrays (sorted by name) plus `key = value` metadata; replaces any archive at path"""
    path = Path(path)
    meta = dict(meta or {})
    for key in meta:
        if '=' in key or '\n' in str(meta[key]) or not str(key).strip():
            raise CheckpointError(f"metadata entry '{key}' cannot be stored as one 'key = value' line")

    tmp = path.with_name(path.name + '.tmp')
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)

    lines = [f"format_version = {FORMAT_VERSION}"]
    lines += [f"{key} = {meta[key]}" for key in sorted(meta) if key != 'format_version']
    lines.append(ARRAY_SECTION)

    offset = 0
    with open(tmp / ARRAYS, 'wb') as blob:
        for name in sorted(arrays):
            if not name or any(ch.isspace() for ch in name):
                raise CheckpointError(f"array name '{name}' must be non-empty without whitespace")
            data = np.ascontiguousarray(np.asarray(arrays[name], dtype=DTYPE))
            blob.write(data.tobytes(order='C'))
            lines.append(f"{name} {offset} {_format_shape(data.shape)}")
            offset += data.size
    (tmp / MANIFEST).write_text('\n'.join(lines) + '\n', encoding='utf-8')

    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def read_manifest(path) -> Tuple[Dict[str, str], Dict[str, Tuple[int, Tuple[int, ...]]]]:
    path = Path(path)
    manifest = path / MANIFEST
    if not manifest.exists():
        raise CheckpointError(f"{path} has no {MANIFEST}")

    meta, index = {}, {}
    in_arrays = False
    for lineno, raw in enumerate(manifest.read_text(encoding='utf-8').splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line == ARRAY_SECTION:
            in_arrays = True
            continue
        if in_arrays:
            parts = line.split()
            if len(parts) != 3:
                raise CheckpointError(f"{manifest}:{lineno}: expected '<name> <offset> <shape>'")
            index[parts[0]] = (int(parts[1]), _parse_shape(parts[2]))
        else:
            key, sep, value = line.partition('=')
            if not sep:
                raise CheckpointError(f"{manifest}:{lineno}: expected 'key = value'")
            meta[key.strip()] = value.strip()

    version = int(meta.get('format_version', -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    return meta, index


def read_archive(path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    """Inverse of write_archive; arrays come back as writable float64 copies"""
    path = Path(path)
    meta, index = read_manifest(path)
    blob_path = path / ARRAYS
    if not blob_path.exists():
        raise CheckpointError(f"{path} has no {ARRAYS}")
    flat = np.fromfile(blob_path, dtype=DTYPE)

    arrays = {}
    for name, (offset, shape) in index.items():
        size = int(np.prod(shape)) if shape else 1
        if offset < 0 or offset + size > flat.size:
            raise CheckpointError(f"{path}: array '{name}' runs past the end of {ARRAYS}")
        arrays[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
    return arrays, meta


# ============================================================================
# CHECKPOINTS
# ============================================================================
@dataclass
class Checkpoint:
    """Raw + EMA parameters, optimizer moments, and the config echo"""
    step: int
    params: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray]
    optimizer_state: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    config: Dict[str, str] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)
    path: Optional[Path] = None


_GROUPS = ('raw', 'ema', 'adam.m', 'adam.v')


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    arrays = {f"raw/{name}": value for name, value in ckpt.params.items()}
    arrays.update({f"ema/{name}": value for name, value in ckpt.ema.items()})
    for slot, values in ckpt.optimizer_state.items():
        arrays.update({f"adam.{slot}/{name}": value for name, value in values.items()})

    meta = {f"config.{key}": value for key, value in ckpt.config.items()}
    meta.update(ckpt.meta)
    meta['kind'] = 'checkpoint'
    meta['step'] = int(ckpt.step)
    written = write_archive(path, arrays, meta)
    logger.info(f"✅ Checkpoint step {ckpt.step} written to {written}")
    return written


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_archive(path)
    if meta.get('kind') != 'checkpoint':
        raise CheckpointError(f"{path} is not a checkpoint (kind={meta.get('kind')})")

    groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for name, value in arrays.items():
        group, sep, param = name.partition('/')
        if not sep or group not in groups:
            raise CheckpointError(f"{path}: unexpected array '{name}'")
        groups[group][param] = value
    if not groups['raw']:
        raise CheckpointError(f"{path}: checkpoint holds no parameters")

    config = {key[len('config.'):]: value for key, value in meta.items() if key.startswith('config.')}
    rest = {key: value for key, value in meta.items() if not key.startswith('config.')}
    optimizer_state = {slot: groups[f'adam.{slot}'] for slot in ('m', 'v') if groups[f'adam.{slot}']}
    return Checkpoint(step=int(rest.get('step', 0)), params=groups['raw'], ema=groups['ema'] or dict(groups['raw']),
                      optimizer_state=optimizer_state, config=config, meta=rest, path=Path(path))
