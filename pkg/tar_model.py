"""
TAR Model - the stacked autoregressive flow
Encoding with cache capture, exact likelihood, noise augmentation,
guided sequential sampling and score-based denoising
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

import graphcore as gc
from graphcore import GraphValue, ParamSet
from flow_blocks import BlockTrace, FlowBlock, FlowError, ModelGeometry, Ordering

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
EMBED_NAME = 'embed.classes'


@dataclass
class EncodeResult:
    """Everything one forward pass through the stack leaves behind"""
    z: GraphValue
    logdets: List[GraphValue]            # per block, shape [..]
    cached_inputs: List[GraphValue]      # cut copies of each block's input
    traces: List[BlockTrace]
    cond: GraphValue

    @property
    def total_logdet(self) -> GraphValue:
        total = self.logdets[0]
        for ld in self.logdets[1:]:
            total = total + ld
        return total


class FlowModel:
    """Ordered stack of FlowBlocks sharing one class-embedding table"""

    def __init__(self, params: ParamSet, geometry: ModelGeometry, sigma_noise: float = 0.2,
                 orderings: Optional[Sequence[Ordering]] = None):
        geometry.validate()
        if sigma_noise < 0:
            raise FlowError(f"sigma_noise must be >= 0, got {sigma_noise}")
        if orderings is not None and len(orderings) != geometry.blocks:
            raise FlowError(f"{len(orderings)} orderings given for {geometry.blocks} blocks")
        if EMBED_NAME not in params:
            raise FlowError(f"parameter set has no '{EMBED_NAME}' table")
        expected = (geometry.classes + 1, geometry.width)
        if params[EMBED_NAME].shape != expected:
            raise FlowError(f"'{EMBED_NAME}' has shape {list(params[EMBED_NAME].shape)}, expected {list(expected)}")

        self.params = params
        self.geometry = geometry
        self.sigma_noise = float(sigma_noise)
        self.blocks: List[FlowBlock] = []
        for t in range(1, geometry.blocks + 1):
            ordering = orderings[t - 1] if orderings is not None else Ordering.alternating(t, geometry.tokens)
            block = FlowBlock(t, params, geometry, ordering)
            missing = [n for n in ('in.w', 'out.w', 'start') if block.prefix + n not in params]
            if missing:
                raise FlowError(f"block {t} is missing parameters {missing}")
            self.blocks.append(block)

    @classmethod
    def build(cls, geometry: ModelGeometry, rng: np.random.Generator, sigma_noise: float = 0.2,
              orderings: Optional[Sequence[Ordering]] = None, params: Optional[ParamSet] = None) -> 'FlowModel':
        """Fresh model; blocks start as identity maps because their out heads are zero"""
        geometry.validate()
        params = params if params is not None else ParamSet()
        for t in range(1, geometry.blocks + 1):
            ordering = orderings[t - 1] if orderings is not None else None
            FlowBlock.build(t, params, geometry, rng, ordering)
        params.add(EMBED_NAME, rng.normal(0.0, 1.0, (geometry.classes + 1, geometry.width)))
        return cls(params, geometry, sigma_noise, orderings)

    @classmethod
    def from_params(cls, params: ParamSet, geometry: ModelGeometry, sigma_noise: float = 0.2,
                    orderings: Optional[Sequence[Ordering]] = None) -> 'FlowModel':
        return cls(params, geometry, sigma_noise, orderings)

    @property
    def num_classes(self) -> int:
        return self.geometry.classes

    @property
    def null_label(self) -> int:
        return self.geometry.classes

    @property
    def dims(self) -> int:
        return self.geometry.tokens * self.geometry.channels

    # ------------------------------------------------------------------
    # conditioning
    # ------------------------------------------------------------------
    def embedding(self, labels) -> GraphValue:
        """Rows of the class table; label K selects the null (unconditional) row"""
        labels = np.asarray(labels, dtype=np.int64)
        if np.any(labels < 0) or np.any(labels > self.geometry.classes):
            raise FlowError(f"labels must lie in [0, {self.geometry.classes}], got {np.unique(labels).tolist()}")
        return gc.take_rows(self.params[EMBED_NAME], labels)

    def mixed_embedding(self, weights) -> GraphValue:
        """weights @ E over all K + 1 rows; each row of weights is a point on the simplex"""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape[-1:] != (self.geometry.classes + 1,):
            raise FlowError(f"mixing weights need {self.geometry.classes + 1} columns, got {list(weights.shape)}")
        if np.any(weights < 0) or not np.allclose(weights.sum(axis=-1), 1.0):
            raise FlowError("mixing weights must be non-negative and sum to 1")
        return gc.constant(weights) @ self.params[EMBED_NAME]

    def null_embedding(self, batch_shape=()) -> GraphValue:
        return self.embedding(np.full(batch_shape, self.null_label, dtype=np.int64))

    def _condition(self, batch_shape, labels=None, embedding: Optional[GraphValue] = None) -> GraphValue:
        if embedding is not None:
            if embedding.shape[-1] != self.geometry.width:
                raise FlowError(f"embedding width {embedding.shape[-1]} != model width {self.geometry.width}")
            return embedding
        if labels is None:
            return self.null_embedding(batch_shape)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape not in ((), tuple(batch_shape)):
            raise FlowError(f"labels shape {list(labels.shape)} does not match batch {list(batch_shape)}")
        return self.embedding(labels)

    # ------------------------------------------------------------------
    # encoding / likelihood
    # ------------------------------------------------------------------
    def encode(self, x, labels=None, embedding: Optional[GraphValue] = None) -> EncodeResult:
        """z = f_T o ... o f_1 (x), caching a cut copy of every block input"""
        x = x if isinstance(x, GraphValue) else gc.constant(x)
        g = self.geometry
        if x.shape[-2:] != (g.tokens, g.channels):
            raise FlowError(f"expected [.., {g.tokens}, {g.channels}] input, got {list(x.shape)}")
        cond = self._condition(x.shape[:-2], labels, embedding)

        h = x
        logdets, cached, traces = [], [], []
        for block in self.blocks:
            cached.append(gc.cut(h))
            h, logdet, trace = block.forward(h, cond)
            logdets.append(logdet)
            traces.append(trace)
        return EncodeResult(z=h, logdets=logdets, cached_inputs=cached, traces=traces, cond=cond)

    def decode(self, z, labels=None, cfg_scale: float = 1.0, embedding: Optional[GraphValue] = None) -> GraphValue:
        """Invert the stack block by block in reverse order, token by token within each block"""
        z = z if isinstance(z, GraphValue) else gc.constant(z)
        cond = self._condition(z.shape[:-2], labels, embedding)
        null_cond = self.null_embedding(z.shape[:-2]) if cfg_scale != 1.0 else None
        h = z
        for block in reversed(self.blocks):
            h = block.inverse_sequential(h, cond, cfg_scale=cfg_scale, null_cond=null_cond)
        return h

    def sample(self, labels, cfg_scale: float = 1.0, rng: Optional[np.random.Generator] = None,
               denoise: bool = False) -> np.ndarray:
        """One sample per label from a seeded standard-normal latent"""
        labels = np.asarray(labels, dtype=np.int64)
        rng = rng if rng is not None else np.random.default_rng(0)
        g = self.geometry
        z = rng.standard_normal(labels.shape + (g.tokens, g.channels))
        x = self.decode(gc.constant(z), labels, cfg_scale).data
        if denoise:
            x = score_denoise(x, labels, self)
        return x


def log_likelihood(enc: EncodeResult) -> GraphValue:
    """Exact log p(x) per sample in nats under the standard-normal prior"""
    z = enc.z
    dims = z.shape[-2] * z.shape[-1]
    quad = gc.reduce_sum(z * z, axis=(-2, -1))
    return enc.total_logdet - 0.5 * quad - 0.5 * dims * LOG_2PI


def nf_loss(enc: EncodeResult) -> GraphValue:
    """Mean negative log-likelihood per dimension (nats), averaged over the batch"""
    dims = enc.z.shape[-2] * enc.z.shape[-1]
    loss = gc.reduce_mean(-log_likelihood(enc)) * (1.0 / dims)
    if not np.isfinite(loss.data):
        raise FlowError(f"nf_loss is not finite ({float(loss.data)})")
    return loss


def add_noise(x: np.ndarray, sigma_noise: float, rng: np.random.Generator) -> np.ndarray:
    """x + eps, eps ~ N(0, sigma^2 I)"""
    if sigma_noise < 0:
        raise FlowError(f"sigma_noise must be >= 0, got {sigma_noise}")
    x = np.asarray(x, dtype=np.float64)
    if sigma_noise == 0:
        return x.copy()
    return x + sigma_noise * rng.standard_normal(x.shape)


def score_denoise(x_noisy: np.ndarray, labels, model: FlowModel) -> np.ndarray:
    """One Tweedie step: x + sigma^2 grad log p(x), with the conditional score"""
    if model.sigma_noise <= 0:
        raise FlowError("score denoising needs sigma_noise > 0")
    x = gc.leaf(x_noisy, 'input.x')
    enc = model.encode(x, labels)
    grads = gc.backward(gc.reduce_sum(log_likelihood(enc)))
    score = grads.get('input.x')
    if score is None or not np.all(np.isfinite(score)):
        raise FlowError("score is not finite")
    return np.asarray(x_noisy, dtype=np.float64) + model.sigma_noise ** 2 * score
