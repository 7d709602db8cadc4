"""
Bench - reverse-pass throughput comparison
Training-step rate and graph size for Forward, Detach, accelerated Reverse
and naive sequential Reverse at one matched config, single thread
"""

import dataclasses
import logging
import time
from typing import Dict

import graphcore as gc
from alignment import Strategy, repa_loss
from run_config import RunConfig
from trainer import build_run, training_batch

logger = logging.getLogger(__name__)

VARIANTS = (
    ('forward', Strategy.FORWARD, False),
    ('detach', Strategy.DETACH, False),
    ('reverse', Strategy.REVERSE, False),
    ('naive_reverse', Strategy.REVERSE, True),
)
MIN_SPEEDUP = 5.0
MIN_NODE_RATIO = 1.5


def _one_step(state, align_cfg, batch, naive: bool):
    breakdown = repa_loss(batch.x, batch.labels, state.model, align_cfg, state.projector, batch.targets,
                          naive=naive, weights=batch.weights)
    return gc.backward(breakdown.total)


def bench_reverse(cfg: RunConfig, repeats: int = 3) -> Dict:
    """Best-of-`repeats` steps/sec and node counts per strategy; checks the expected ordering"""
    lambda_align = cfg.align.lambda_align if cfg.align.lambda_align > 0 else 0.1
    bench_cfg = dataclasses.replace(cfg, align=dataclasses.replace(cfg.align, lambda_align=lambda_align))
    bench_cfg.train = dataclasses.replace(cfg.train, workers=1)
    state = build_run(bench_cfg)
    batch = training_batch(state, 0)
    logger.info(f"🚀 Bench at D={cfg.model.tokens}, T={cfg.model.blocks}, batch={cfg.train.batch}, "
                f"sites={list(bench_cfg.align.sites)}")

    rates, nodes = {}, {}
    for name, strategy, naive in VARIANTS:
        align_cfg = dataclasses.replace(bench_cfg.align, strategy=strategy)
        with gc.count_nodes() as counter:
            _one_step(state, align_cfg, batch, naive)
        nodes[name] = counter.total
        best = float('inf')
        for _ in range(repeats):
            started = time.perf_counter()
            _one_step(state, align_cfg, batch, naive)
            best = min(best, time.perf_counter() - started)
        rates[name] = 1.0 / best
        logger.info(f"📊 {name}: {rates[name]:.2f} steps/s, {nodes[name]} graph nodes")

    ratios = {
        'forward_over_detach': rates['forward'] / rates['detach'],
        'detach_over_reverse': rates['detach'] / rates['reverse'],
        'reverse_over_naive': rates['reverse'] / rates['naive_reverse'],
        'naive_nodes_over_reverse': nodes['naive_reverse'] / max(nodes['reverse'], 1),
    }
    checks = {
        'ordering': rates['forward'] >= rates['detach'] >= rates['reverse'],
        'speedup': ratios['reverse_over_naive'] >= MIN_SPEEDUP,
        'node_ratio': ratios['naive_nodes_over_reverse'] >= MIN_NODE_RATIO,
    }
    if not all(checks.values()):
        logger.warning(f"⚠️ Bench checks failed: {[k for k, ok in checks.items() if not ok]}")
    return {'success': all(checks.values()), 'steps_per_sec': rates, 'nodes': nodes,
            'ratios': ratios, 'checks': checks, 'tokens': cfg.model.tokens}
