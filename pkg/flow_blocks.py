"""
Flow Blocks - one autoregressive affine transform per block
Causal-attention parameter network, forward / sequential inverse / cached inverse
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import graphcore as gc
from graphcore import GraphValue, ParamSet

logger = logging.getLogger(__name__)

LOG_SIGMA_CLAMP = 7.0


class FlowError(ValueError):
    """Raised when a flow computation cannot proceed (shapes, non-finite scales, cache misuse)"""


@dataclass
class ModelGeometry:
    """Token geometry and network sizes shared by every block of a model"""
    tokens: int = 16            # D
    channels: int = 4           # C, patch pixels per token
    width: int = 32             # W, parameter-network width
    blocks: int = 2             # T
    layers: int = 2             # L per block
    heads: int = 1
    ff_mult: int = 2
    classes: int = 2            # K (row K of the embedding table is the null class)
    patch: int = 2

    def validate(self):
        for name in ('tokens', 'channels', 'width', 'blocks', 'layers', 'heads', 'ff_mult', 'classes', 'patch'):
            if getattr(self, name) < 1:
                raise FlowError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.width % self.heads:
            raise FlowError(f"model.width ({self.width}) must be divisible by model.heads ({self.heads})")


class Ordering:
    """A permutation of token positions; position j of the ordered sequence holds token pi[j]"""

    def __init__(self, pi: Sequence[int]):
        pi = np.asarray(pi, dtype=np.int64)
        if pi.ndim != 1 or sorted(pi.tolist()) != list(range(len(pi))):
            raise FlowError(f"ordering is not a permutation of 0..{len(pi) - 1}: {pi.tolist()}")
        self.pi = pi
        self.inverse = np.argsort(pi)

    @classmethod
    def identity(cls, tokens: int) -> 'Ordering':
        return cls(np.arange(tokens))

    @classmethod
    def reversed(cls, tokens: int) -> 'Ordering':
        return cls(np.arange(tokens)[::-1])

    @classmethod
    def alternating(cls, index: int, tokens: int) -> 'Ordering':
        """Identity for odd block numbers (1, 3, ...), reversal for even ones"""
        return cls.identity(tokens) if index % 2 == 1 else cls.reversed(tokens)

    def apply(self, v: GraphValue) -> GraphValue:
        return gc.permute_tokens(v, self.pi)

    def undo(self, v: GraphValue) -> GraphValue:
        return gc.permute_tokens(v, self.inverse)

    def position_of(self, token: int) -> int:
        return int(self.inverse[token])

    def __len__(self):
        return len(self.pi)


@dataclass
class BlockTrace:
    """Per-layer hidden features [.., D, W] plus the affine parameters [.., D, C]"""
    hidden: Dict[int, GraphValue]
    mu: GraphValue
    log_sigma: GraphValue
    sigma: GraphValue


def _causal_mask(rows: int) -> np.ndarray:
    return np.tril(np.ones((rows, rows), dtype=bool))


class FlowBlock:
    """
    One autoregressive affine block over a transformer parameter network

    The parameter network reads tokens in ordering space. Row d of its
    input holds the start token (d = 0) or token d-1, so everything it
    emits at row d depends only on tokens before d. A conditioning token,
    when given, is prepended and visible to every row.
    """

    def __init__(self, index: int, params: ParamSet, geometry: ModelGeometry, ordering: Ordering):
        if len(ordering) != geometry.tokens:
            raise FlowError(f"ordering length {len(ordering)} != tokens {geometry.tokens}")
        self.index = index
        self.params = params
        self.geometry = geometry
        self.ordering = ordering
        self.prefix = f"block.{index}."

    @classmethod
    def build(cls, index: int, params: ParamSet, geometry: ModelGeometry,
              rng: np.random.Generator, ordering: Optional[Ordering] = None) -> 'FlowBlock':
        """Register freshly initialised parameters for block `index` (1-based)"""
        g = geometry
        ordering = ordering or Ordering.alternating(index, g.tokens)
        p = f"block.{index}."
        hidden = g.width * g.ff_mult

        params.add(p + 'in.w', rng.normal(0.0, 1.0 / np.sqrt(g.channels), (g.channels, g.width)))
        params.add(p + 'in.b', np.zeros(g.width))
        params.add(p + 'pos', rng.normal(0.0, 0.02, (g.tokens, g.width)))
        params.add(p + 'start', rng.normal(0.0, 0.02, (g.width,)))
        for l in range(1, g.layers + 1):
            lp = f"{p}layer.{l}."
            for name in ('q', 'k', 'v'):
                params.add(lp + f'attn.{name}', rng.normal(0.0, 1.0 / np.sqrt(g.width), (g.width, g.width)))
            params.add(lp + 'attn.o', rng.normal(0.0, 0.5 / np.sqrt(g.width), (g.width, g.width)))
            params.add(lp + 'ff.w1', rng.normal(0.0, 1.0 / np.sqrt(g.width), (g.width, hidden)))
            params.add(lp + 'ff.b1', np.zeros(hidden))
            params.add(lp + 'ff.w2', rng.normal(0.0, 0.5 / np.sqrt(hidden), (hidden, g.width)))
            params.add(lp + 'ff.b2', np.zeros(g.width))
        # zero head: every block starts as the identity map in ordering space
        params.add(p + 'out.w', np.zeros((g.width, 2 * g.channels)))
        params.add(p + 'out.b', np.zeros(2 * g.channels))
        return cls(index, params, geometry, ordering)

    def _check_tokens(self, v: GraphValue, what: str):
        g = self.geometry
        if v.shape[-2:] != (g.tokens, g.channels):
            raise FlowError(f"block {self.index}: expected [.., {g.tokens}, {g.channels}] {what}, got {list(v.shape)}")

    def p(self, name: str) -> GraphValue:
        return self.params[self.prefix + name]

    def param_names(self) -> List[str]:
        return self.params.with_prefix(self.prefix)

    # ------------------------------------------------------------------
    # parameter network
    # ------------------------------------------------------------------
    def _attention(self, h: GraphValue, l: int, mask: np.ndarray) -> GraphValue:
        g = self.geometry
        lp = f"layer.{l}.attn."
        q = h @ self.p(lp + 'q')
        k = h @ self.p(lp + 'k')
        v = h @ self.p(lp + 'v')
        head_dim = g.width // g.heads
        scale = 1.0 / np.sqrt(head_dim)
        heads = []
        for hd in range(g.heads):
            cols = (Ellipsis, slice(hd * head_dim, (hd + 1) * head_dim))
            q_h = gc.take_slice(q, cols) if g.heads > 1 else q
            k_h = gc.take_slice(k, cols) if g.heads > 1 else k
            v_h = gc.take_slice(v, cols) if g.heads > 1 else v
            scores = gc.masked((q_h @ gc.swap_last(k_h)) * scale, mask)
            heads.append(gc.softmax(scores, axis=-1) @ v_h)
        mixed = heads[0] if g.heads == 1 else gc.concat(heads, axis=-1)
        return mixed @ self.p(lp + 'o')

    def _feedforward(self, h: GraphValue, l: int) -> GraphValue:
        lp = f"layer.{l}.ff."
        inner = gc.silu(h @ self.p(lp + 'w1') + self.p(lp + 'b1'))
        return inner @ self.p(lp + 'w2') + self.p(lp + 'b2')

    def param_net(self, x_ctx: GraphValue, cond: Optional[GraphValue] = None) -> BlockTrace:
        """(mu, sigma) for every position from tokens strictly before it, plus per-layer features"""
        g = self.geometry
        self._check_tokens(x_ctx, "tokens")
        batch = x_ctx.shape[:-2]
        D, W = g.tokens, g.width

        tokens = x_ctx @ self.p('in.w') + self.p('in.b')
        start = gc.broadcast_to(gc.reshape(self.p('start'), (1, W)), batch + (1, W))
        rows = [start]
        if D > 1:
            rows.append(gc.take_slice(tokens, (Ellipsis, slice(0, D - 1), slice(None))))
        h = gc.concat(rows, axis=-2) + self.p('pos')

        offset = 0
        if cond is not None:
            if cond.shape[-1] != W:
                raise FlowError(f"block {self.index}: conditioning width {cond.shape[-1]} != model width {W}")
            cond_row = gc.broadcast_to(gc.reshape(cond, cond.shape[:-1] + (1, W)), batch + (1, W))
            h = gc.concat([cond_row, h], axis=-2)
            offset = 1
        mask = _causal_mask(D + offset)

        hidden = {}
        for l in range(1, g.layers + 1):
            h = h + self._attention(h, l, mask)
            h = h + self._feedforward(h, l)
            hidden[l] = gc.take_slice(h, (Ellipsis, slice(offset, None), slice(None))) if offset else h

        body = hidden[g.layers] if g.layers else h
        head = body @ self.p('out.w') + self.p('out.b')
        C = g.channels
        mu = gc.take_slice(head, (Ellipsis, slice(0, C)))
        log_sigma = gc.clamp(gc.take_slice(head, (Ellipsis, slice(C, 2 * C))), -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
        return BlockTrace(hidden=hidden, mu=mu, log_sigma=log_sigma, sigma=gc.exp(log_sigma))

    # ------------------------------------------------------------------
    # transforms
    # ------------------------------------------------------------------
    def forward(self, x: GraphValue, cond: Optional[GraphValue] = None) -> Tuple[GraphValue, GraphValue, BlockTrace]:
        """z = (x_pi - mu) / sigma in ordering space; logdet = -sum log sigma per sample"""
        if not np.all(np.isfinite(x.data)):
            raise FlowError(f"block {self.index}: non-finite input")
        self._check_tokens(x, "input")
        x_ordered = self.ordering.apply(x)
        trace = self.param_net(x_ordered, cond)
        if not np.all(np.isfinite(trace.sigma.data)):
            raise FlowError(f"block {self.index}: non-finite sigma")
        z = (x_ordered - trace.mu) / trace.sigma
        logdet = -gc.reduce_sum(trace.log_sigma, axis=(-2, -1))
        return z, logdet, trace

    def feature_trace(self, x_ordered: GraphValue, cond: Optional[GraphValue] = None) -> BlockTrace:
        """Layer features of the parameter network reading already-ordered tokens"""
        return self.param_net(x_ordered, cond)

    def inverse_sequential(self, z: GraphValue, cond: Optional[GraphValue] = None,
                           cfg_scale: float = 1.0, null_cond: Optional[GraphValue] = None,
                           cut_context: bool = False) -> GraphValue:
        """
        Token-by-token inverse in ordering order, then mapped back with pi^-1

        cut_context conditions every step on a cut copy of the tokens
        generated so far (the sequential counterpart of inverse_cached).
        """
        g = self.geometry
        if not np.all(np.isfinite(z.data)):
            raise FlowError(f"block {self.index}: non-finite latent")
        self._check_tokens(z, "latent")
        batch = z.shape[:-2]
        D, C = g.tokens, g.channels

        generated: List[GraphValue] = []
        for j in range(D):
            parts = generated + [gc.constant(np.zeros(batch + (D - j, C)))]
            ctx = gc.concat(parts, axis=-2) if len(parts) > 1 else parts[0]
            if cut_context:
                ctx = gc.cut(ctx)
            mu, log_sigma = guided_params(self, ctx, cond, null_cond, cfg_scale)
            row = (Ellipsis, slice(j, j + 1), slice(None))
            x_j = gc.take_slice(mu, row) + gc.exp(gc.take_slice(log_sigma, row)) * gc.take_slice(z, row)
            generated.append(x_j)

        x_ordered = gc.concat(generated, axis=-2) if D > 1 else generated[0]
        return self.ordering.undo(x_ordered)

    def inverse_cached(self, z: GraphValue, cached_ctx: GraphValue,
                       cond: Optional[GraphValue] = None) -> Tuple[GraphValue, BlockTrace]:
        """
        Parallel pseudo-inverse: every token's (mu, sigma) read from the cut
        cached forward input, so x_d = mu(c_<d) + sigma(c_<d) * z_d for all d at once.
        Layer features are then recorded over the reconstructed tokens.
        """
        if cached_ctx.parents or cached_ctx.requires_grad:
            raise FlowError(f"block {self.index}: cached context must be graph-cut before use")
        context = self.param_net(self.ordering.apply(cached_ctx), cond)
        x_ordered = context.mu + context.sigma * z
        trace = self.feature_trace(x_ordered, cond)
        return self.ordering.undo(x_ordered), trace


def guided_params(block: FlowBlock, ctx_ordered: GraphValue, cond: Optional[GraphValue],
                  null_cond: Optional[GraphValue], cfg_scale: float) -> Tuple[GraphValue, GraphValue]:
    """
    Classifier-free guidance on the affine parameters

    mu_g = mu_u + w (mu_c - mu_u), log sigma_g = log sigma_u + w (log sigma_c - log sigma_u).
    w = 1 (or no null embedding) returns the conditional parameters untouched.
    """
    conditional = block.param_net(ctx_ordered, cond)
    if cfg_scale == 1.0 or null_cond is None:
        return conditional.mu, conditional.log_sigma
    unconditional = block.param_net(ctx_ordered, null_cond)
    mu = unconditional.mu + cfg_scale * (conditional.mu - unconditional.mu)
    log_sigma = unconditional.log_sigma + cfg_scale * (conditional.log_sigma - unconditional.log_sigma)
    return mu, log_sigma
