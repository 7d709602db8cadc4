"""
Invariant Suite - checks run against a saved checkpoint (`roundtrip-check`)
Invertibility, cached-inverse identity, log-det vs numerical Jacobian,
checkpoint save/load round trip
"""

import logging
import tempfile
from pathlib import Path
from typing import Callable, Dict

import numpy as np

import graphcore as gc
from alignment import pseudo_reverse_pass, reconstruction_error
from checkpoint_store import load_checkpoint, save_checkpoint
from flow_blocks import FlowBlock
from tar_model import log_likelihood
import toy_datasets
from toy_datasets import stream_rng
from trainer import build_run, load_run, state_checkpoint

logger = logging.getLogger(__name__)

TOLERANCES = {
    'invertibility': 1e-6,
    'cached_inverse': 1e-10,
    'logdet': 1e-4,
    'checkpoint_roundtrip': 0.0,
}
MAX_JACOBIAN_DIMS = 64


def numerical_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a map [D, C] -> [D, C], flattened to [DC, DC]"""
    flat = np.array(x, dtype=np.float64).reshape(-1)
    columns = []
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += epsilon
        minus[i] -= epsilon
        diff = fn(plus.reshape(x.shape)) - fn(minus.reshape(x.shape))
        columns.append(diff.reshape(-1) / (2.0 * epsilon))
    return np.stack(columns, axis=1)


def logdet_gap(block: FlowBlock, x: np.ndarray, cond=None) -> float:
    """Relative gap between -sum log sigma and log|det| of the numerical Jacobian"""
    _, logdet, _ = block.forward(gc.constant(x), cond)
    jac = numerical_jacobian(lambda v: block.forward(gc.constant(v), cond)[0].data, x)
    _, numeric = np.linalg.slogdet(jac)
    analytic = float(logdet.data)
    return abs(analytic - numeric) / max(abs(numeric), 1.0)


def _check(value: float, tolerance: float) -> Dict:
    return {'passed': bool(value <= tolerance), 'value': float(value), 'tolerance': tolerance}


def roundtrip_check(checkpoint, probe: int = 16, seed: int = 0) -> Dict:
    state = load_run(checkpoint)
    model = state.model
    x, labels, _ = state.dataset.balanced(stream_rng(seed, toy_datasets.EVAL_STREAM), probe)
    x, labels = x[:probe], labels[:probe]
    checks = {}

    enc = model.encode(x, labels)
    x_back = model.decode(enc.z.data, labels).data
    checks['invertibility'] = _check(np.max(np.abs(x_back - x)), TOLERANCES['invertibility'])

    reverse = pseudo_reverse_pass(model, enc)
    checks['cached_inverse'] = _check(reconstruction_error(enc, reverse), TOLERANCES['cached_inverse'])

    if model.dims <= MAX_JACOBIAN_DIMS:
        cond = model.embedding(labels[0])
        gaps = [logdet_gap(block, enc.cached_inputs[block.index - 1].data[0], cond) for block in model.blocks]
        checks['logdet'] = _check(max(gaps), TOLERANCES['logdet'])
    else:
        logger.warning(f"⚠️ log-det check skipped: {model.dims} dims exceeds {MAX_JACOBIAN_DIMS}")

    with tempfile.TemporaryDirectory() as tmp:
        saved = save_checkpoint(Path(tmp) / 'probe', state_checkpoint(state))
        restored = build_run(state.cfg, load_checkpoint(saved))
        array_gap = max(float(np.max(np.abs(restored.params[name].data - value.data)))
                        for name, value in state.params.items())
        ll_a = log_likelihood(model.encode(x, labels)).data
        ll_b = log_likelihood(restored.model.encode(x, labels)).data
        checks['checkpoint_roundtrip'] = _check(max(array_gap, float(np.max(np.abs(ll_a - ll_b)))),
                                                TOLERANCES['checkpoint_roundtrip'])

    passed = all(c['passed'] for c in checks.values())
    if passed:
        logger.info(f"✅ All {len(checks)} invariants hold for {checkpoint}")
    else:
        logger.error(f"❌ Failed invariants: {[k for k, c in checks.items() if not c['passed']]}")
    return {'success': passed, 'checkpoint': str(checkpoint), 'checks': checks}
