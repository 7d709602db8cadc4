"""
Trainer - the training loop around repa_training_step
AdamW + EMA, threaded batch shards, periodic checkpoints, bit-exact resume,
one NDJSON metrics record per step
"""

import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, IO, List, NamedTuple, Optional, Tuple

import numpy as np

from graphcore import ParamSet
from flow_blocks import FlowError
from tar_model import FlowModel, add_noise
from alignment import (AlignmentConfig, LossBreakdown, Projector, TargetEncoder, repa_gradients)
from optimizer import AdamW, EMA
from checkpoint_store import Checkpoint, load_checkpoint, save_checkpoint
from run_config import RunConfig, from_flat, to_flat
import toy_datasets
from toy_datasets import ToyDataset, stream_rng

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = 'checkpoint'


class TrainingAborted(RuntimeError):
    """Non-finite loss; the last good checkpoint (if any) is kept on disk"""

    def __init__(self, message: str, step: int, last_checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class RunState:
    cfg: RunConfig
    model: FlowModel
    projector: Projector
    encoder: TargetEncoder
    dataset: ToyDataset
    optimizer: AdamW
    ema: EMA
    step: int = 0

    @property
    def params(self) -> ParamSet:
        return self.model.params


def build_run(cfg: RunConfig, checkpoint: Optional[Checkpoint] = None) -> RunState:
    """Fresh (or checkpoint-restored) model, projector, encoder, optimizer and EMA"""
    rng = stream_rng(cfg.seed, toy_datasets.INIT_STREAM)
    encoder = TargetEncoder.from_config(cfg.align, cfg.model)
    params = ParamSet()
    model = FlowModel.build(cfg.model, rng, cfg.sigma_noise, params=params)
    projector = Projector.build(params, cfg.model.width, cfg.align.projector_hidden, encoder.feature_dim, rng)
    dataset = ToyDataset.load(cfg.dataset, cfg.model.classes, cfg.model.patch, cfg.data_path)
    optimizer = AdamW(cfg.optimizer)
    ema = EMA(params, cfg.ema_decay)

    state = RunState(cfg, model, projector, encoder, dataset, optimizer, ema)
    if checkpoint is not None:
        params.load_arrays(checkpoint.params)
        ema.shadow = {k: np.array(v) for k, v in checkpoint.ema.items()}
        ema.updates = int(checkpoint.meta.get('ema_updates', 0))
        optimizer.load_state(checkpoint.optimizer_state, int(checkpoint.meta.get('adam_step', 0)))
        state.step = checkpoint.step
    return state


def load_run(path, use_ema: bool = True) -> RunState:
    """Rebuild a run from its checkpoint; evaluation uses the EMA weights by default"""
    ckpt = load_checkpoint(path)
    cfg = from_flat(ckpt.config)
    state = build_run(cfg, ckpt)
    if use_ema:
        state.ema.copy_to(state.params)
    return state


def state_checkpoint(state: RunState) -> Checkpoint:
    return Checkpoint(step=state.step, params=state.params.arrays(),
                      ema={k: v.copy() for k, v in state.ema.shadow.items()},
                      optimizer_state=state.optimizer.state(), config=to_flat(state.cfg),
                      meta={'adam_step': state.optimizer.t, 'ema_updates': state.ema.updates})


# ============================================================================
# ONE STEP
# ============================================================================
class TrainingBatch(NamedTuple):
    x: np.ndarray
    labels: np.ndarray
    targets: Optional[np.ndarray]
    weights: Optional[np.ndarray] = None    # [B, K + 1] when some rows condition on a class mixture


def mixing_weights(labels: np.ndarray, mixed: np.ndarray, classes: int, concentration: float,
                   rng: np.random.Generator) -> np.ndarray:
    """
    One-hot rows over the K + 1 embedding rows, Dirichlet rows where `mixed`

    A mixed row for a sample of class y is drawn from Dir(concentration + e_y), the
    posterior over mixing weights after seeing one draw of class y, so the model
    learns p(x | w^T E) ~ sum_k w_k p(x | k) across the simplex, uniform point included.
    """
    weights = np.eye(classes + 1)[labels]
    if np.any(mixed):
        alpha = concentration + np.eye(classes)[labels[mixed]]
        draws = rng.standard_gamma(alpha)
        weights[mixed] = 0.0
        weights[mixed, :classes] = draws / draws.sum(axis=-1, keepdims=True)
    return weights


def training_batch(state: RunState, step: int) -> TrainingBatch:
    """Batch for `step` from a generator seeded by (seed, step): noisy tokens, labels, clean targets"""
    cfg = state.cfg
    rng = stream_rng(cfg.seed, toy_datasets.TRAIN_STREAM, step)
    x, labels, ids = state.dataset.draw(rng, cfg.train.batch)
    dropped = rng.random(len(labels)) < cfg.train.label_dropout
    labels = np.where(dropped, state.model.null_label, labels)
    weights = None
    if cfg.train.mixture_prob > 0:
        mixed = ~dropped & (rng.random(len(labels)) < cfg.train.mixture_prob)
        if np.any(mixed):
            weights = mixing_weights(labels, mixed, state.model.num_classes, cfg.train.mixture_concentration, rng)
    targets = state.encoder.target_features(x, ids) if cfg.align.active else None
    return TrainingBatch(add_noise(x, cfg.sigma_noise, rng), labels, targets, weights)


def _shard_gradients(state: RunState, batch: TrainingBatch, workers: int) -> Tuple[Dict[str, np.ndarray], Dict]:
    align_cfg: AlignmentConfig = state.cfg.align
    x, labels, targets, weights = batch
    if workers == 1:
        grads, breakdown = repa_gradients(x, labels, state.model, align_cfg, state.projector, targets, weights)
        return grads, breakdown.report()

    shards = np.array_split(np.arange(len(labels)), workers)

    def run(index):
        t = targets[index] if targets is not None else None
        w = weights[index] if weights is not None else None
        return repa_gradients(x[index], labels[index], state.model, align_cfg, state.projector, t, w)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results: List[Tuple[Dict[str, np.ndarray], LossBreakdown]] = list(pool.map(run, shards))

    # fixed shard order, each shard weighted by its share of the batch
    total = float(len(labels))
    grads: Dict[str, np.ndarray] = {}
    report = {'total': 0.0, 'nf_loss': 0.0, 'align_loss': 0.0, 'reconstruction_gap': 0.0}
    for index, (shard_grads, breakdown) in zip(shards, results):
        weight = len(index) / total
        for name, g in shard_grads.items():
            grads[name] = grads[name] + weight * g if name in grads else weight * g
        shard_report = breakdown.report()
        for key in ('total', 'nf_loss', 'align_loss'):
            report[key] += weight * shard_report[key]
        report['reconstruction_gap'] = max(report['reconstruction_gap'], shard_report['reconstruction_gap'])
    return grads, report


def train_step(state: RunState) -> Dict:
    batch = training_batch(state, state.step)
    grads, report = _shard_gradients(state, batch, state.cfg.train.workers)
    if not np.isfinite(report['total']):
        raise FloatingPointError(f"non-finite loss {report['total']}")
    state.optimizer.step(state.params, grads)
    state.ema.update(state.params)
    state.step += 1
    return {'step': state.step, **report}


# ============================================================================
# LOOP
# ============================================================================
def _open_sink(metrics_path) -> Tuple[IO, bool]:
    if metrics_path is None or str(metrics_path) == '-':
        return sys.stdout, False
    path = Path(metrics_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, 'a', encoding='utf-8'), True


def train(cfg: RunConfig, out_dir, metrics_path=None, resume=None) -> Dict:
    """Run cfg.train.steps optimizer steps (continuing from `resume` if given)"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = load_checkpoint(resume) if resume else None
    state = build_run(cfg, checkpoint)
    last_good: Optional[Path] = Path(resume) if resume else None

    logger.info(f"🚀 Training {cfg.dataset}: {cfg.train.steps} steps, strategy={cfg.align.strategy.value}, "
                f"lambda={cfg.align.lambda_align}, {state.params.num_scalars()} parameters, from step {state.step}")
    sink, owned = _open_sink(metrics_path)
    started = time.perf_counter()
    first_nf, last_record = None, None
    try:
        while state.step < cfg.train.steps:
            try:
                record = train_step(state)
            except (FloatingPointError, FlowError) as e:
                logger.error(f"❌ Aborting at step {state.step + 1}: {e}")
                raise TrainingAborted(str(e), state.step + 1, last_good) from e
            record['wallclock'] = round(time.perf_counter() - started, 6)
            sink.write(json.dumps(record) + '\n')
            sink.flush()
            first_nf = record['nf_loss'] if first_nf is None else first_nf
            last_record = record

            if cfg.train.log_every and state.step % cfg.train.log_every == 0:
                logger.info(f"📊 step {state.step}: nf={record['nf_loss']:.4f} align={record['align_loss']:.4f}")
            every = cfg.train.checkpoint_every
            if every and state.step % every == 0 and state.step < cfg.train.steps:
                last_good = save_checkpoint(out_dir / f"step-{state.step:06d}", state_checkpoint(state))
    finally:
        if owned:
            sink.close()

    final = save_checkpoint(out_dir / FINAL_CHECKPOINT, state_checkpoint(state))
    logger.info(f"✅ Training done at step {state.step}")
    return {
        'success': True,
        'steps': state.step,
        'initial_nf_loss': first_nf,
        'final_nf_loss': last_record['nf_loss'] if last_record else None,
        'final_align_loss': last_record['align_loss'] if last_record else None,
        'checkpoint': str(final),
    }
