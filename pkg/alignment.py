"""
Representation Alignment - frozen target features, projector, and gradient routing
Forward / Detach / Reverse strategies, with the cached pseudo-reverse pass for Reverse
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

import graphcore as gc
from graphcore import GraphValue, ParamSet
from flow_blocks import BlockTrace, ModelGeometry
from tar_model import EncodeResult, FlowModel, nf_loss
import checkpoint_store

logger = logging.getLogger(__name__)

Site = Tuple[int, int]


class AlignmentError(ValueError):
    """Invalid alignment setup (strategy, sites, target geometry)"""


class Strategy(Enum):
    FORWARD = 'forward'
    DETACH = 'detach'
    REVERSE = 'reverse'

    @classmethod
    def parse(cls, value) -> 'Strategy':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise AlignmentError(f"unknown alignment strategy '{value}' (forward|detach|reverse)")


def default_sites(geometry: ModelGeometry) -> Tuple[Site, ...]:
    """Blocks {T-1, T}, layer 6 (or the last layer when there are fewer)"""
    layer = 6 if geometry.layers >= 6 else geometry.layers
    blocks = [t for t in (geometry.blocks - 1, geometry.blocks) if t >= 1]
    return tuple((t, layer) for t in blocks)


@dataclass
class AlignmentConfig:
    strategy: Strategy = Strategy.REVERSE
    sites: Tuple[Site, ...] = ()
    lambda_align: float = 0.1
    projector_hidden: int = 64
    feature_dim: int = 16
    encoder: str = 'stub'               # stub | file
    encoder_seed: int = 1234
    feature_path: Optional[str] = None

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        self.sites = tuple(sorted((int(t), int(l)) for t, l in self.sites))

    def validate(self, geometry: ModelGeometry):
        if self.lambda_align < 0:
            raise AlignmentError(f"align.lambda must be >= 0, got {self.lambda_align}")
        if self.lambda_align > 0 and not self.sites:
            raise AlignmentError("align.sites must be non-empty when align.lambda > 0")
        for t, l in self.sites:
            if not (1 <= t <= geometry.blocks and 1 <= l <= geometry.layers):
                raise AlignmentError(f"alignment site ({t}, {l}) outside blocks 1..{geometry.blocks}, "
                                     f"layers 1..{geometry.layers}")
        if self.encoder not in ('stub', 'file'):
            raise AlignmentError(f"align.encoder must be 'stub' or 'file', got '{self.encoder}'")
        if self.encoder == 'file' and not self.feature_path:
            raise AlignmentError("align.encoder = file needs align.feature_path")

    @property
    def active(self) -> bool:
        return self.lambda_align > 0 and bool(self.sites)

    def aligned_blocks(self) -> List[int]:
        return sorted({t for t, _ in self.sites})


# ============================================================================
# TARGET FEATURES
# ============================================================================
def pool_to_tokens(v: np.ndarray, tokens: int) -> np.ndarray:
    """Nearest-neighbour map of P encoder patches onto D flow tokens (grid-aware for square counts)"""
    patches = v.shape[-2]
    if patches == tokens:
        return v
    side_p, side_t = int(round(np.sqrt(patches))), int(round(np.sqrt(tokens)))
    if side_p ** 2 == patches and side_t ** 2 == tokens:
        src = np.minimum(((np.arange(side_t) + 0.5) * side_p / side_t).astype(np.int64), side_p - 1)
        index = (src[:, None] * side_p + src[None, :]).reshape(-1)
    else:
        index = np.minimum(((np.arange(tokens) + 0.5) * patches / tokens).astype(np.int64), patches - 1)
    return np.take(v, index, axis=-2)


class TargetEncoder:
    """
    Frozen feature provider

    stub: v = tanh(x W + b) over patch tokens with fixed seeded weights
    file: features looked up by sample id from a named-array archive
    """

    def __init__(self, kind: str, tokens: int, feature_dim: int,
                 weight: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None,
                 features: Optional[Dict[str, np.ndarray]] = None):
        self.kind = kind
        self.tokens = tokens
        self.feature_dim = feature_dim
        self.weight = weight
        self.bias = bias
        self.features = features or {}

    @classmethod
    def stub(cls, channels: int, tokens: int, feature_dim: int, seed: int = 1234) -> 'TargetEncoder':
        rng = np.random.default_rng(seed)
        weight = rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, feature_dim))
        bias = rng.normal(0.0, 0.5, feature_dim)
        weight.setflags(write=False)
        bias.setflags(write=False)
        return cls('stub', tokens, feature_dim, weight=weight, bias=bias)

    @classmethod
    def from_archive(cls, path, tokens: int) -> 'TargetEncoder':
        arrays, meta = checkpoint_store.read_archive(path)
        if meta.get('kind') != 'features':
            raise AlignmentError(f"{path} is not a feature archive (kind={meta.get('kind')})")
        features = {name.split('/', 1)[1]: array for name, array in arrays.items() if name.startswith('features/')}
        feature_dim = int(meta.get('feature_dim', 0))
        logger.info(f"📊 Loaded {len(features)} injected feature maps from {path}")
        return cls('file', tokens, feature_dim, features=features)

    @classmethod
    def from_config(cls, cfg: AlignmentConfig, geometry: ModelGeometry) -> 'TargetEncoder':
        if cfg.encoder == 'file':
            return cls.from_archive(cfg.feature_path, geometry.tokens)
        return cls.stub(geometry.channels, geometry.tokens, cfg.feature_dim, cfg.encoder_seed)

    def target_features(self, x_tokens: Optional[np.ndarray] = None,
                        sample_ids: Optional[Sequence[str]] = None) -> np.ndarray:
        """v = Phi(x) as a plain array [.., D, D_feat]; it never takes part in a gradient"""
        if self.kind == 'stub':
            if x_tokens is None:
                raise AlignmentError("stub encoder needs patch tokens")
            x_tokens = np.asarray(x_tokens, dtype=np.float64)
            if x_tokens.shape[-1] != self.weight.shape[0]:
                raise AlignmentError(f"stub encoder expects {self.weight.shape[0]} channels, "
                                     f"got {x_tokens.shape[-1]}")
            return pool_to_tokens(np.tanh(x_tokens @ self.weight + self.bias), self.tokens)

        if sample_ids is None:
            raise AlignmentError("file-injected encoder needs sample ids")
        missing = [sid for sid in sample_ids if str(sid) not in self.features]
        if missing:
            raise AlignmentError(f"no injected features for sample ids {missing[:5]}")
        return np.stack([pool_to_tokens(self.features[str(sid)], self.tokens) for sid in sample_ids])


def write_feature_archive(path, features: Dict[str, np.ndarray]) -> Path:
    """Write externally computed features as 'features/<id>' arrays with P and D_feat in the manifest"""
    if not features:
        raise AlignmentError("no features to write")
    shapes = {np.shape(v) for v in features.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise AlignmentError(f"feature maps must all share one [P, D_feat] shape, got {sorted(shapes)}")
    patches, feature_dim = next(iter(shapes))
    arrays = {f"features/{sid}": np.asarray(v, dtype=np.float64) for sid, v in features.items()}
    return checkpoint_store.write_archive(path, arrays, {
        'kind': 'features', 'patches': patches, 'feature_dim': feature_dim,
    })


# ============================================================================
# PROJECTOR
# ============================================================================
class Projector:
    """3-layer SiLU MLP, width W -> H -> H -> D_feat, stored under 'proj.*'"""

    def __init__(self, params: ParamSet):
        for i in (1, 2, 3):
            if f'proj.{i}.w' not in params:
                raise AlignmentError(f"parameter set has no projector layer proj.{i}")
        self.params = params

    @classmethod
    def build(cls, params: ParamSet, width: int, hidden: int, feature_dim: int,
              rng: np.random.Generator) -> 'Projector':
        dims = [width, hidden, hidden, feature_dim]
        for i in (1, 2, 3):
            fan_in, fan_out = dims[i - 1], dims[i]
            params.add(f'proj.{i}.w', rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
            params.add(f'proj.{i}.b', np.zeros(fan_out))
        return cls(params)

    def __call__(self, h: GraphValue) -> GraphValue:
        p = self.params
        h = gc.silu(h @ p['proj.1.w'] + p['proj.1.b'])
        h = gc.silu(h @ p['proj.2.w'] + p['proj.2.b'])
        return h @ p['proj.3.w'] + p['proj.3.b']


def align_loss_site(hidden: GraphValue, v, projector: Projector) -> GraphValue:
    """-(1/P) sum_p cos(v_p, Proj(h)_p), averaged over the batch"""
    v = v if isinstance(v, GraphValue) else gc.constant(v)
    projected = projector(hidden)
    if projected.shape[-2:] != v.shape[-2:]:
        raise AlignmentError(f"projected features {list(projected.shape)} do not match targets {list(v.shape)}")
    return -gc.reduce_mean(gc.cosine_similarity(projected, v))


def total_loss(nf: GraphValue, site_losses: Sequence[GraphValue], lambda_align: float) -> GraphValue:
    """L_NF + lambda * mean(site losses)"""
    if lambda_align == 0 or not site_losses:
        return nf
    summed = site_losses[0]
    for loss in site_losses[1:]:
        summed = summed + loss
    return nf + (lambda_align / len(site_losses)) * summed


# ============================================================================
# GRADIENT ROUTING
# ============================================================================
def pseudo_reverse_pass(model: FlowModel, enc: EncodeResult, stop_at: int = 1) -> Dict[int, Tuple[GraphValue, BlockTrace]]:
    """
    Cached pseudo-reverse pass from block T down to `stop_at`

    z^T is cut; each block rebuilds its input in parallel from the cut
    cached forward input, so the chain z^T -> z^{stop_at - 1} costs one
    parallel pass per block.
    """
    z = gc.cut(enc.z)
    out = {}
    for block in reversed(model.blocks[stop_at - 1:]):
        x_rev, trace = block.inverse_cached(z, enc.cached_inputs[block.index - 1], enc.cond)
        out[block.index] = (x_rev, trace)
        z = x_rev
    return out


def naive_reverse_pass(model: FlowModel, enc: EncodeResult, stop_at: int = 1) -> Dict[int, Tuple[GraphValue, BlockTrace]]:
    """Token-by-token reverse pass on cut generated prefixes; reference for pseudo_reverse_pass"""
    z = gc.cut(enc.z)
    out = {}
    for block in reversed(model.blocks[stop_at - 1:]):
        x_rev = block.inverse_sequential(z, enc.cond, cut_context=True)
        trace = block.feature_trace(block.ordering.apply(x_rev), enc.cond)
        out[block.index] = (x_rev, trace)
        z = x_rev
    return out


def reconstruction_error(enc: EncodeResult, reverse: Dict[int, Tuple[GraphValue, BlockTrace]]) -> float:
    """Max-abs gap between each reverse-pass block input and its cache"""
    gaps = [float(np.max(np.abs(x_rev.data - enc.cached_inputs[t - 1].data))) for t, (x_rev, _) in reverse.items()]
    return max(gaps) if gaps else 0.0


def site_features(strategy: Strategy, model: FlowModel, enc: EncodeResult, sites: Sequence[Site],
                  naive: bool = False) -> Tuple[Dict[Site, GraphValue], float]:
    """Hidden features h^(t,l) for every site, routed according to the strategy"""
    strategy = Strategy.parse(strategy)
    features: Dict[Site, GraphValue] = {}
    gap = 0.0
    if not sites:
        return features, gap

    if strategy is Strategy.FORWARD:
        for t, l in sites:
            features[(t, l)] = enc.traces[t - 1].hidden[l]
    elif strategy is Strategy.DETACH:
        for t in sorted({t for t, _ in sites}):
            block = model.blocks[t - 1]
            trace = block.param_net(block.ordering.apply(enc.cached_inputs[t - 1]), enc.cond)
            for site in sites:
                if site[0] == t:
                    features[site] = trace.hidden[site[1]]
    else:
        lowest = min(t for t, _ in sites)
        reverse = (naive_reverse_pass if naive else pseudo_reverse_pass)(model, enc, stop_at=lowest)
        gap = reconstruction_error(enc, reverse)
        for t, l in sites:
            features[(t, l)] = reverse[t][1].hidden[l]
    return features, gap


@dataclass
class LossBreakdown:
    total: GraphValue
    nf: GraphValue
    align: Optional[GraphValue]
    site_losses: Dict[Site, float] = field(default_factory=dict)
    reconstruction_gap: float = 0.0

    def report(self) -> Dict:
        return {
            'total': float(self.total.data),
            'nf_loss': float(self.nf.data),
            'align_loss': float(self.align.data) if self.align is not None else 0.0,
            'reconstruction_gap': self.reconstruction_gap,
        }


def repa_loss(x_tokens, labels, model: FlowModel, cfg: AlignmentConfig, projector: Optional[Projector],
              targets: Optional[np.ndarray], include_nf: bool = True, naive: bool = False,
              weights: Optional[np.ndarray] = None) -> LossBreakdown:
    """
    L_total for one batch on one merged graph

    include_nf=False leaves only lambda * L_align (footprint checks).
    weights [B, K + 1], when given, condition on mixed class embeddings instead of `labels`.
    """
    cfg.validate(model.geometry)
    embedding = model.mixed_embedding(weights) if weights is not None else None
    enc = model.encode(x_tokens, labels, embedding=embedding)
    nf = nf_loss(enc)
    if not cfg.active:
        return LossBreakdown(total=nf, nf=nf, align=None)
    if projector is None or targets is None:
        raise AlignmentError("alignment is active but no projector/targets were supplied")

    features, gap = site_features(cfg.strategy, model, enc, cfg.sites, naive=naive)
    v = gc.constant(targets)
    site_losses = [align_loss_site(features[site], v, projector) for site in cfg.sites]
    align = site_losses[0]
    for loss in site_losses[1:]:
        align = align + loss
    align = align * (1.0 / len(site_losses))

    if include_nf:
        total = total_loss(nf, site_losses, cfg.lambda_align)
    else:
        total = cfg.lambda_align * align
    return LossBreakdown(total=total, nf=nf, align=align,
                         site_losses={site: float(loss.data) for site, loss in zip(cfg.sites, site_losses)},
                         reconstruction_gap=gap)


def repa_gradients(x_tokens, labels, model: FlowModel, cfg: AlignmentConfig, projector: Optional[Projector],
                   targets: Optional[np.ndarray],
                   weights: Optional[np.ndarray] = None) -> Tuple[Dict[str, np.ndarray], LossBreakdown]:
    breakdown = repa_loss(x_tokens, labels, model, cfg, projector, targets, weights=weights)
    return gc.backward(breakdown.total), breakdown


def repa_training_step(x_tokens, labels, model: FlowModel, cfg: AlignmentConfig, optimizer,
                       projector: Optional[Projector] = None,
                       targets: Optional[np.ndarray] = None,
                       weights: Optional[np.ndarray] = None) -> Tuple[Dict, ParamSet]:
    """One merged backward and one optimizer update; returns the loss report and the updated params"""
    grads, breakdown = repa_gradients(x_tokens, labels, model, cfg, projector, targets, weights)
    optimizer.step(model.params, grads)
    report = breakdown.report()
    report['success'] = True
    return report, model.params


# ============================================================================
# FOOTPRINTS
# ============================================================================
def param_group(name: str) -> str:
    """'block.3.layer.1.attn.q' -> 'block.3'; 'proj.2.w' -> 'proj'; 'embed.classes' -> 'embed'"""
    parts = name.split('.')
    return '.'.join(parts[:2]) if parts[0] == 'block' else parts[0]


def gradient_footprint(strategy, t: int, T: int) -> Set[str]:
    """Parameter groups the alignment term at block t can update"""
    if not 1 <= t <= T:
        raise AlignmentError(f"aligned block {t} outside 1..{T}")
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.FORWARD:
        blocks = range(1, t + 1)
    elif strategy is Strategy.DETACH:
        blocks = [t]
    else:
        blocks = range(t, T + 1)
    return {'proj'} | {f'block.{b}' for b in blocks}


def observed_footprint(grads: Dict[str, np.ndarray], exclude: Sequence[str] = ('embed',)) -> Set[str]:
    """Groups that actually hold a gradient entry"""
    return {param_group(name) for name in grads} - set(exclude)
