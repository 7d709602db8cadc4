import numpy as np
import pytest

import graphcore as gc
from graphcore import ParamSet
from alignment import (AlignmentConfig, AlignmentError, Projector, Strategy, TargetEncoder, align_loss_site,
                       default_sites, gradient_footprint, naive_reverse_pass, observed_footprint, param_group,
                       pool_to_tokens, pseudo_reverse_pass, reconstruction_error, repa_loss, repa_training_step,
                       site_features, total_loss, write_feature_archive)
from flow_blocks import ModelGeometry
from optimizer import AdamW, OptimizerConfig
from tar_model import FlowModel
from conftest import randomize_heads


def build_setup(blocks=2, tokens=2, channels=1, width=8, layers=1, heads=1, seed=0, feature_dim=4):
    geometry = ModelGeometry(tokens=tokens, channels=channels, width=width, blocks=blocks, layers=layers,
                             heads=heads, classes=2, patch=1)
    rng = np.random.default_rng(seed)
    params = ParamSet()
    model = randomize_heads(FlowModel.build(geometry, rng, params=params), rng)
    projector = Projector.build(params, width, 8, feature_dim, rng)
    encoder = TargetEncoder.stub(channels, tokens, feature_dim, seed=7)
    x = rng.normal(size=(3, tokens, channels))
    labels = np.array([0, 1, 0])
    return model, projector, encoder, x, labels


# ============================================================================
# CONFIG
# ============================================================================
def test_default_sites():
    assert default_sites(ModelGeometry(blocks=4, layers=8)) == ((3, 6), (4, 6))
    assert default_sites(ModelGeometry(blocks=2, layers=2)) == ((1, 2), (2, 2))
    assert default_sites(ModelGeometry(blocks=1, layers=3)) == ((1, 3),)


def test_strategy_parse():
    assert Strategy.parse(' Reverse ') is Strategy.REVERSE
    with pytest.raises(AlignmentError):
        Strategy.parse('sideways')


def test_config_validation():
    geometry = ModelGeometry(blocks=2, layers=2)
    with pytest.raises(AlignmentError):
        AlignmentConfig(lambda_align=0.1, sites=()).validate(geometry)
    with pytest.raises(AlignmentError):
        AlignmentConfig(sites=((3, 1),)).validate(geometry)
    with pytest.raises(AlignmentError):
        AlignmentConfig(sites=((1, 1),), lambda_align=-1.0).validate(geometry)
    with pytest.raises(AlignmentError):
        AlignmentConfig(sites=((1, 1),), encoder='file').validate(geometry)
    cfg = AlignmentConfig(strategy='detach', sites=[(2, 1), (1, 2)])
    cfg.validate(geometry)
    assert cfg.strategy is Strategy.DETACH
    assert cfg.sites == ((1, 2), (2, 1))
    assert cfg.aligned_blocks() == [1, 2]
    assert not AlignmentConfig(lambda_align=0.0, sites=((1, 1),)).active


# ============================================================================
# TARGETS AND PROJECTOR
# ============================================================================
def test_pool_to_tokens():
    v = np.arange(16.0 * 2).reshape(16, 2)
    assert pool_to_tokens(v, 16) is v
    pooled = pool_to_tokens(v, 4)
    # 4x4 patch grid onto a 2x2 token grid: patches (1,1), (1,3), (3,1), (3,3)
    np.testing.assert_array_equal(pooled[:, 0], v[[5, 7, 13, 15], 0])
    assert pool_to_tokens(np.zeros((3, 6, 2)), 2).shape == (3, 2, 2)


def test_stub_encoder_is_frozen_and_deterministic():
    a = TargetEncoder.stub(2, 4, 5, seed=3)
    b = TargetEncoder.stub(2, 4, 5, seed=3)
    x = np.random.default_rng(0).normal(size=(2, 4, 2))
    np.testing.assert_array_equal(a.target_features(x), b.target_features(x))
    assert a.target_features(x).shape == (2, 4, 5)
    assert not a.weight.flags.writeable
    with pytest.raises(AlignmentError):
        a.target_features(np.zeros((2, 4, 3)))


def test_file_encoder_looks_up_by_id(tmp_path):
    features = {'a': np.ones((4, 3)), 'b': 2 * np.ones((4, 3))}
    write_feature_archive(tmp_path / 'feats', features)
    encoder = TargetEncoder.from_config(
        AlignmentConfig(encoder='file', feature_path=str(tmp_path / 'feats')), ModelGeometry(tokens=4))
    assert encoder.feature_dim == 3
    v = encoder.target_features(sample_ids=['b', 'a'])
    np.testing.assert_array_equal(v[0], 2 * np.ones((4, 3)))
    with pytest.raises(AlignmentError):
        encoder.target_features(sample_ids=['missing'])


def test_feature_archive_needs_one_shape(tmp_path):
    with pytest.raises(AlignmentError):
        write_feature_archive(tmp_path / 'bad', {'a': np.ones((4, 3)), 'b': np.ones((2, 3))})


def test_align_loss_is_minus_one_for_matching_targets():
    model, projector, _, x, labels = build_setup()
    hidden = model.encode(x, labels).traces[0].hidden[1]
    v = projector(hidden).data
    assert abs(float(align_loss_site(hidden, v, projector).data) + 1.0) < 1e-12
    assert abs(float(align_loss_site(hidden, -v, projector).data) - 1.0) < 1e-12


def test_total_loss_arithmetic():
    nf = gc.constant(1.0)
    sites = [gc.constant(-1.0), gc.constant(-1.0)]
    assert abs(float(total_loss(nf, sites, 0.1).data) - 0.9) < 1e-12
    assert total_loss(nf, sites, 0.0) is nf


# ============================================================================
# GRADIENT ROUTING
# ============================================================================
@pytest.mark.parametrize('T', [2, 3, 4])
@pytest.mark.parametrize('strategy', list(Strategy))
def test_gradient_footprint_matches_prediction(strategy, T):
    model, projector, encoder, x, labels = build_setup(blocks=T)
    targets = encoder.target_features(x)
    for t in range(1, T + 1):
        cfg = AlignmentConfig(strategy=strategy, sites=((t, 1),), lambda_align=1.0)
        breakdown = repa_loss(x, labels, model, cfg, projector, targets, include_nf=False)
        grads = gc.backward(breakdown.total)
        assert observed_footprint(grads) == gradient_footprint(strategy, t, T)


def test_footprint_predictions():
    assert gradient_footprint('forward', 2, 3) == {'proj', 'block.1', 'block.2'}
    assert gradient_footprint('detach', 2, 3) == {'proj', 'block.2'}
    assert gradient_footprint('reverse', 2, 3) == {'proj', 'block.2', 'block.3'}
    with pytest.raises(AlignmentError):
        gradient_footprint('reverse', 4, 3)


def test_param_groups():
    assert param_group('block.3.layer.1.attn.q') == 'block.3'
    assert param_group('proj.2.w') == 'proj'
    assert param_group('embed.classes') == 'embed'


def test_pseudo_reverse_reconstructs_every_cache():
    model, _, _, x, labels = build_setup(blocks=3, tokens=4, channels=2)
    enc = model.encode(x, labels)
    reverse = pseudo_reverse_pass(model, enc)
    assert sorted(reverse) == [1, 2, 3]
    assert reconstruction_error(enc, reverse) < 1e-10
    for t, (x_rev, _) in reverse.items():
        assert np.max(np.abs(x_rev.data - enc.cached_inputs[t - 1].data)) < 1e-10


def test_pseudo_reverse_stops_at_lowest_site():
    model, _, _, x, labels = build_setup(blocks=4)
    enc = model.encode(x, labels)
    assert sorted(pseudo_reverse_pass(model, enc, stop_at=3)) == [3, 4]


def test_accelerated_reverse_matches_naive_reverse():
    model, projector, encoder, x, labels = build_setup(blocks=2, tokens=4, channels=2, layers=2, heads=2)
    targets = encoder.target_features(x)
    cfg = AlignmentConfig(strategy='reverse', sites=((1, 2), (2, 1)), lambda_align=1.0)

    fast = repa_loss(x, labels, model, cfg, projector, targets, include_nf=False)
    slow = repa_loss(x, labels, model, cfg, projector, targets, include_nf=False, naive=True)
    assert abs(float(fast.total.data) - float(slow.total.data)) < 1e-10
    assert fast.reconstruction_gap < 1e-10 and slow.reconstruction_gap < 1e-10

    g_fast, g_slow = gc.backward(fast.total), gc.backward(slow.total)
    shared = set(g_fast) & set(g_slow)
    assert shared == set(g_fast)
    for name in shared:
        np.testing.assert_allclose(g_fast[name], g_slow[name], rtol=1e-6, atol=1e-12)


def test_naive_reverse_also_reconstructs_caches():
    model, _, _, x, labels = build_setup(blocks=2, tokens=3, channels=2)
    enc = model.encode(x, labels)
    assert reconstruction_error(enc, naive_reverse_pass(model, enc)) < 1e-10


def test_forward_features_are_encode_traces():
    model, _, _, x, labels = build_setup(blocks=2, layers=2)
    enc = model.encode(x, labels)
    features, gap = site_features(Strategy.FORWARD, model, enc, [(2, 1)])
    assert features[(2, 1)] is enc.traces[1].hidden[1]
    assert gap == 0.0


def test_detach_features_equal_forward_values():
    model, _, _, x, labels = build_setup(blocks=2, layers=2)
    enc = model.encode(x, labels)
    forward, _ = site_features(Strategy.FORWARD, model, enc, [(2, 2)])
    detach, _ = site_features(Strategy.DETACH, model, enc, [(2, 2)])
    np.testing.assert_allclose(detach[(2, 2)].data, forward[(2, 2)].data, atol=1e-12)


def test_end_to_end_gradient_matches_finite_differences():
    model, projector, encoder, x, labels = build_setup(blocks=2, tokens=2, channels=1, width=4)
    targets = encoder.target_features(x)
    cfg = AlignmentConfig(strategy='reverse', sites=((1, 1), (2, 1)), lambda_align=0.5)

    def objective(params):
        return repa_loss(x, labels, model, cfg, projector, targets).total

    names = ['block.1.out.w', 'block.2.layer.1.attn.q', 'block.1.in.w', 'proj.1.w', 'embed.classes']
    analytic = gc.backward(objective(model.params))
    numeric = gc.finite_diff_grad(objective, model.params, names=names)
    for name in names:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-7)


def test_alignment_needs_projector_and_targets():
    model, _, _, x, labels = build_setup()
    cfg = AlignmentConfig(sites=((1, 1),), lambda_align=0.1)
    with pytest.raises(AlignmentError):
        repa_loss(x, labels, model, cfg, None, None)


def test_inactive_alignment_is_plain_likelihood():
    model, projector, encoder, x, labels = build_setup()
    cfg = AlignmentConfig(sites=((1, 1),), lambda_align=0.0)
    breakdown = repa_loss(x, labels, model, cfg, projector, encoder.target_features(x))
    assert breakdown.align is None
    assert breakdown.report()['align_loss'] == 0.0
    assert breakdown.total is breakdown.nf


def test_training_step_updates_parameters():
    model, projector, encoder, x, labels = build_setup()
    cfg = AlignmentConfig(strategy='reverse', sites=((1, 1), (2, 1)), lambda_align=0.1)
    optimizer = AdamW(OptimizerConfig(lr=1e-2))
    before = model.params.arrays()
    report, params = repa_training_step(x, labels, model, cfg, optimizer, projector, encoder.target_features(x))
    assert report['success'] and set(report) >= {'total', 'nf_loss', 'align_loss', 'reconstruction_gap'}
    assert params is model.params
    assert not np.allclose(before['proj.1.w'], params['proj.1.w'].data)
    assert not np.allclose(before['block.2.out.w'], params['block.2.out.w'].data)
    assert abs(report['total'] - (report['nf_loss'] + 0.1 * report['align_loss'])) < 1e-12


@pytest.mark.parametrize('strategy', list(Strategy))
def test_site_outside_the_model_is_rejected(strategy):
    model, projector, encoder, x, labels = build_setup(layers=1)
    cfg = AlignmentConfig(strategy=strategy, sites=((2, 5),), lambda_align=0.1)
    with pytest.raises(AlignmentError, match='outside'):
        repa_loss(x, labels, model, cfg, projector, encoder.target_features(x))
    with pytest.raises(AlignmentError):
        repa_training_step(x, labels, model, cfg, AdamW(OptimizerConfig(lr=1e-2)), projector,
                           encoder.target_features(x))


def test_zero_lambda_updates_are_identical_across_strategies():
    updated = {}
    for strategy in Strategy:
        model, projector, encoder, x, labels = build_setup(blocks=3, layers=2, seed=4)
        cfg = AlignmentConfig(strategy=strategy, sites=((1, 1), (3, 2)), lambda_align=0.0)
        optimizer = AdamW(OptimizerConfig(lr=1e-2))
        for _ in range(2):
            _, params = repa_training_step(x, labels, model, cfg, optimizer, projector, encoder.target_features(x))
        updated[strategy] = params.arrays()
    reference = updated[Strategy.FORWARD]
    for strategy in (Strategy.DETACH, Strategy.REVERSE):
        assert set(updated[strategy]) == set(reference)
        for name, value in reference.items():
            np.testing.assert_array_equal(updated[strategy][name], value, err_msg=f"{strategy.value}: {name}")
