"""Shared fixtures: small random flow models and the hand-built affine toy flow"""

import numpy as np
import pytest

from flow_blocks import ModelGeometry
from tar_model import EMBED_NAME, FlowModel

SMALL = dict(tokens=4, channels=2, width=8, blocks=2, layers=2, heads=2, ff_mult=2, classes=3, patch=1)


def randomize_heads(model: FlowModel, rng: np.random.Generator, scale: float = 0.3) -> FlowModel:
    """Non-zero out heads, so blocks stop being identity maps"""
    for block in model.blocks:
        for name in ('out.w', 'out.b'):
            value = block.p(name)
            value.data[...] = rng.normal(0.0, scale, value.shape)
    return model


def build_affine_toy(means, log_scale: float = 0.0, sigma_noise: float = 0.2,
                     attention_gain: float = 100.0) -> FlowModel:
    """
    One-token, one-block flow with p(x | k) = N(means[k], exp(log_scale)^2 I)

    Width C + 2: coordinate 0 flags the conditioning row, coordinate 1 is a
    constant carried by the position row, coordinates 2.. hold the class mean.
    Attention sends the token row onto the conditioning row; the value/out
    maps copy the mean through, the out head reads it as mu.
    """
    means = np.asarray(means, dtype=np.float64)
    K, C = means.shape
    W = C + 2
    geometry = ModelGeometry(tokens=1, channels=C, width=W, blocks=1, layers=1, heads=1,
                             ff_mult=1, classes=K, patch=1)
    model = FlowModel.build(geometry, np.random.default_rng(0), sigma_noise)
    for _, value in model.params.items():
        value.data[...] = 0.0

    p = model.params
    p['block.1.pos'].data[0, 1] = 1.0
    p['block.1.layer.1.attn.q'].data[1, 0] = 1.0
    p['block.1.layer.1.attn.k'].data[0, 0] = attention_gain
    for c in range(C):
        p['block.1.layer.1.attn.v'].data[2 + c, 2 + c] = 1.0
        p['block.1.layer.1.attn.o'].data[2 + c, 2 + c] = 1.0
        p['block.1.out.w'].data[2 + c, c] = 1.0
    p['block.1.out.b'].data[C:] = log_scale

    table = p[EMBED_NAME].data
    table[:, 0] = 1.0
    table[:K, 2:] = means
    return model


def draw_toy_samples(means, log_scale: float, n: int, seed: int = 0):
    """Balanced labels and x ~ N(means[label], exp(log_scale)^2) as [n, 1, C] tokens"""
    means = np.asarray(means, dtype=np.float64)
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(means)
    x = means[labels] + np.exp(log_scale) * rng.standard_normal((n, means.shape[1]))
    return x[:, None, :], labels


@pytest.fixture
def make_model():
    """Factory for small random models; keyword arguments override the geometry"""
    def _make(seed: int = 0, heads_scale: float = 0.3, sigma_noise: float = 0.2, **geometry) -> FlowModel:
        settings = dict(SMALL)
        settings.update(geometry)
        rng = np.random.default_rng(seed)
        model = FlowModel.build(ModelGeometry(**settings), rng, sigma_noise)
        if heads_scale:
            randomize_heads(model, rng, heads_scale)
        return model
    return _make


@pytest.fixture
def affine_toy():
    return build_affine_toy


@pytest.fixture
def two_class_toy():
    means = [[-1.0], [1.0]]
    return build_affine_toy(means, log_scale=np.log(0.3)), means, np.log(0.3)


@pytest.fixture
def four_class_toy():
    angles = np.pi / 2 * np.arange(4)
    means = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return build_affine_toy(means, log_scale=np.log(0.5)), means, np.log(0.5)


TINY_RUN = {
    'dataset': 'gauss2d', 'model.classes': '2', 'model.width': '8', 'model.blocks': '2',
    'model.layers': '1', 'model.heads': '1', 'train.batch': '8', 'train.steps': '4',
    'train.log_every': '0', 'align.projector_hidden': '8', 'align.feature_dim': '4',
    'ema_decay': '0.9', 'optim.lr': '0.01',
}


def tiny_run_config(**extra):
    """Seconds-scale gauss2d run; `train__steps=6` style keywords override dotted keys"""
    from run_config import from_flat
    settings = dict(TINY_RUN)
    settings.update({key.replace('__', '.'): str(value) for key, value in extra.items()})
    return from_flat(settings)


@pytest.fixture(scope='session')
def tiny_checkpoint(tmp_path_factory):
    """Checkpoint directory of a short tiny run, shared by the evaluation and CLI tests"""
    from trainer import train
    out = tmp_path_factory.mktemp('tiny-run')
    report = train(tiny_run_config(train__steps=6), out, out / 'metrics.ndjson')
    return report['checkpoint']
