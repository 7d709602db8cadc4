"""
Evaluation - sampling reports, paired classifier evaluation, Frechet proxy
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from flow_blocks import FlowError
from alignment import TargetEncoder
from classifier import classify_bruteforce, classify_multistep, classify_single_step
import checkpoint_store
import toy_datasets
from toy_datasets import stream_rng
from trainer import RunState, load_run

logger = logging.getLogger(__name__)

RIDGE = 1e-6
CHUNK = 256


# ============================================================================
# FRECHET PROXY
# ============================================================================
def frechet_distance(mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))"""
    diff = mu1 - mu2
    covmean = linalg.sqrtm(sigma1 @ sigma2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean))


def _gaussian_fit(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def _is_singular(cov: np.ndarray) -> bool:
    eigvals = np.linalg.eigvalsh(cov)
    return eigvals.min() <= 1e-12 * max(1.0, eigvals.max())


def _features(samples: np.ndarray, encoder: Optional[TargetEncoder]) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if encoder is not None and encoder.kind == 'stub':
        samples = encoder.target_features(samples)
    return samples.reshape(len(samples), -1)


def frechet_report(samples_a: np.ndarray, samples_b: np.ndarray,
                   encoder: Optional[TargetEncoder] = None) -> Dict:
    """Frechet distance between Gaussian fits of the two sets' features; flags a ridge when one was needed"""
    if len(samples_a) < 2 or len(samples_b) < 2:
        raise ValueError("frechet proxy needs at least 2 samples per side")
    mu1, s1 = _gaussian_fit(_features(samples_a, encoder))
    mu2, s2 = _gaussian_fit(_features(samples_b, encoder))
    ridged = _is_singular(s1) or _is_singular(s2)
    if ridged:
        eye = np.eye(len(s1))
        s1, s2 = s1 + RIDGE * eye, s2 + RIDGE * eye
    return {'frechet': frechet_distance(mu1, s1, mu2, s2), 'ridge': ridged}


def frechet_proxy(samples_a: np.ndarray, samples_b: np.ndarray, encoder: Optional[TargetEncoder] = None) -> float:
    return frechet_report(samples_a, samples_b, encoder)['frechet']


# ============================================================================
# SAMPLING
# ============================================================================
def class_moments(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(samples).reshape(len(samples), -1)
    return flat.mean(axis=0), np.atleast_2d(np.cov(flat, rowvar=False))


def sample_run(state: RunState, n: int, label: Optional[int], cfg_scale: float, seed: int,
               denoise: bool = False, unconditional: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """n samples for one label, or n per class when label is None"""
    K = state.model.num_classes
    if unconditional:
        labels = np.full(n, K, dtype=np.int64)
    elif label is None:
        labels = np.repeat(np.arange(K), n)
    else:
        if not 0 <= label < K:
            raise FlowError(f"label {label} outside [0, {K}); use --unconditional for the null class")
        labels = np.full(n, label, dtype=np.int64)
    rng = stream_rng(seed, toy_datasets.SAMPLE_STREAM)
    samples = np.concatenate([
        state.model.sample(labels[i:i + CHUNK], cfg_scale, rng, denoise)
        for i in range(0, len(labels), CHUNK)
    ]) if len(labels) else np.zeros((0, state.model.geometry.tokens, state.model.geometry.channels))
    return samples, labels


def sample_cmd(checkpoint, n: Optional[int] = None, label: Optional[int] = None, cfg_scale: Optional[float] = None,
               seed: int = 0, out_path=None, denoise: Optional[bool] = None, unconditional: bool = False) -> Dict:
    """
    Deterministic samples plus per-class moments against fresh data

    n, cfg_scale and denoise left as None come from the run's sample.* settings.
    """
    state = load_run(checkpoint)
    defaults = state.cfg.sampling
    n = defaults.n if n is None else n
    cfg_scale = defaults.cfg_scale if cfg_scale is None else cfg_scale
    denoise = defaults.denoise if denoise is None else denoise
    samples, labels = sample_run(state, n, label, cfg_scale, seed, denoise, unconditional)

    arrays = {'samples': samples, 'labels': labels.astype(np.float64)}
    per_class = {}
    if not unconditional and state.cfg.dataset != 'file':
        data_rng = stream_rng(seed, toy_datasets.EVAL_STREAM)
        for k in np.unique(labels):
            mine = samples[labels == k]
            data, _, _ = state.dataset.draw(data_rng, len(mine), labels=np.full(len(mine), k))
            mean, cov = class_moments(mine)
            data_mean, data_cov = class_moments(data)
            arrays[f"mean/{k}"], arrays[f"cov/{k}"] = mean, cov
            per_class[int(k)] = {
                'mean': mean.tolist(),
                'data_mean': data_mean.tolist(),
                'mean_rel_error': float(np.linalg.norm(mean - data_mean) / max(np.linalg.norm(data_mean), 1e-12)),
                'cov_rel_error': float(np.linalg.norm(cov - data_cov) / max(np.linalg.norm(data_cov), 1e-12)),
                'frechet': frechet_report(mine, data, state.encoder)['frechet'] if len(mine) >= 2 else None,
            }

    written = None
    if out_path is not None:
        written = checkpoint_store.write_archive(out_path, arrays, {
            'kind': 'samples', 'seed': seed, 'cfg_scale': repr(float(cfg_scale)), 'denoise': denoise,
            'checkpoint': Path(checkpoint).name,
        })
        logger.info(f"✅ {len(samples)} samples written to {written}")
    return {'success': True, 'n': int(len(samples)), 'cfg_scale': cfg_scale, 'denoise': denoise, 'seed': seed,
            'archive': str(written) if written else None, 'classes': per_class}


# ============================================================================
# CLASSIFICATION
# ============================================================================
def evaluate_classifiers(state: RunState, x: np.ndarray, labels: np.ndarray,
                         multistep_lrs=(), multistep_steps: int = 5) -> Dict:
    """Single-step and brute-force predictions over the same samples, plus agreement"""
    single, brute = [], []
    multi = {lr: [] for lr in multistep_lrs}
    for i in range(0, len(labels), CHUNK):
        chunk = x[i:i + CHUNK]
        single.append(classify_single_step(chunk, state.model)[0])
        brute.append(classify_bruteforce(chunk, state.model)[0])
        for lr in multistep_lrs:
            multi[lr].append(classify_multistep(chunk, state.model, multistep_steps, lr))
    single, brute = np.concatenate(single), np.concatenate(brute)

    report = {
        'success': True,
        'n': int(len(labels)),
        'single_step_accuracy': float(np.mean(single == labels)),
        'bruteforce_accuracy': float(np.mean(brute == labels)),
        'agreement': float(np.mean(single == brute)),
    }
    for lr, preds in multi.items():
        preds = np.concatenate(preds)
        report[f'multistep_agreement_lr{lr:g}'] = float(np.mean(preds == single))
    return report


def classify_cmd(checkpoint, n: int = 2000, seed: int = 0, use_ema: bool = True,
                 multistep_lrs=(), multistep_steps: int = 5) -> Dict:
    state = load_run(checkpoint, use_ema=use_ema)
    x, labels, _ = state.dataset.balanced(stream_rng(seed, toy_datasets.EVAL_STREAM), n)
    report = evaluate_classifiers(state, x, labels, multistep_lrs, multistep_steps)
    report['weights'] = 'ema' if use_ema else 'raw'
    logger.info(f"📊 single-step acc {report['single_step_accuracy']:.3f}, brute-force acc "
                f"{report['bruteforce_accuracy']:.3f}, agreement {report['agreement']:.3f}")
    return report
