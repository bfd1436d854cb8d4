import numpy as np
import pytest

from conftest import constant_features, identity_store
from mfpn import tensor as T
from mfpn.analysis import analytic_mask, flow_matrix, random_features, reachability_mask
from mfpn.pyramids import (
    KINDS,
    BackboneFeatures,
    FpnConfig,
    apply_laterals,
    build,
    build_bottom_up,
    build_fusing_splitting,
    build_mfpn,
    build_top_down,
    features_from_arrays,
    init_pyramid_weights,
    weight_shapes,
)
from mfpn.tensor import Tensor
from mfpn.weights import WeightStore

FOUR_LEVEL = ("top_down", "bottom_up", "fusing_splitting", "mfpn")


def values_per_level(pyr):
    out = {}
    for lvl in pyr.levels:
        data = pyr.maps[lvl].data
        assert np.all(data == data.flat[0]), f"level {lvl} is not constant"
        out[lvl] = data.flat[0]
    return out


# --- config ---------------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = FpnConfig()
    assert cfg.levels == (2, 3, 4, 5) and cfg.channels == 256
    assert cfg.backbone_channels == (256, 512, 1024, 2048)
    with pytest.raises(ValueError):
        FpnConfig(channels=0)
    with pytest.raises(ValueError):
        FpnConfig(levels=(2, 4, 5))
    with pytest.raises(ValueError):
        FpnConfig(backbone_channels=(1, 2, 3))
    with pytest.raises(ValueError):
        FpnConfig(extra_levels="pooled")


# --- laterals --------------------------------------------------------------------


def test_identity_laterals_pass_through(unit_cfg, rng):
    raw = {lvl: Tensor(rng.standard_normal((1, 1, 16 >> k, 16 >> k))) for k, lvl in enumerate(unit_cfg.levels)}
    feats = apply_laterals(BackboneFeatures(raw=raw), unit_cfg, identity_store(unit_cfg, "top_down"))
    for lvl in unit_cfg.levels:
        np.testing.assert_array_equal(feats.projected[lvl].data, raw[lvl].data)


def test_lateral_shapes_for_resnet_widths():
    cfg = FpnConfig()
    shapes = weight_shapes(cfg, "top_down")
    for lvl, c in zip(cfg.levels, cfg.backbone_channels):
        assert shapes[f"lateral.{lvl}.weight"] == (256, c, 1, 1)
    # small spatial extent keeps this cheap while exercising the real widths
    store = WeightStore()
    for name, shape in shapes.items():
        if name.startswith("lateral"):
            store.add(name, np.zeros(shape))
    raw = {lvl: Tensor(np.ones((1, c, 8 >> k, 8 >> k))) for k, (lvl, c) in
           enumerate(zip(cfg.levels, cfg.backbone_channels))}
    feats = apply_laterals(BackboneFeatures(raw=raw), cfg, store)
    for k, lvl in enumerate(cfg.levels):
        assert feats.projected[lvl].shape == (1, 256, 8 >> k, 8 >> k)
        assert not feats.projected[lvl].data.any()


def test_lateral_channel_mismatch(unit_cfg):
    raw = {lvl: Tensor(np.ones((1, 2, 16 >> k, 16 >> k))) for k, lvl in enumerate(unit_cfg.levels)}
    with pytest.raises(ValueError, match="channels"):
        apply_laterals(BackboneFeatures(raw=raw), unit_cfg, identity_store(unit_cfg, "top_down"))


def test_missing_level_and_bad_halving():
    with pytest.raises(ValueError, match="half"):
        features_from_arrays({2: np.ones((1, 1, 8, 8)), 3: np.ones((1, 1, 8, 8))})
    cfg = FpnConfig(channels=1, backbone_channels=(1, 1, 1, 1))
    feats = features_from_arrays({2: np.ones((1, 1, 8, 8)), 3: np.ones((1, 1, 4, 4))})
    with pytest.raises(ValueError, match="missing"):
        build_top_down(feats, cfg, identity_store(cfg, "top_down"))


# --- hand-computed constants ------------------------------------------------------


def test_top_down_constants(unit_cfg):
    out = build_top_down(constant_features(), unit_cfg, identity_store(unit_cfg, "top_down"))
    assert values_per_level(out) == {2: 23.0, 3: 22.0, 4: 20.0, 5: 16.0}


def test_bottom_up_constants(unit_cfg):
    out = build_bottom_up(constant_features(), unit_cfg, identity_store(unit_cfg, "bottom_up"))
    assert values_per_level(out) == {2: 3.0, 3: 9.0, 4: 21.0, 5: 29.0}


def test_fusing_splitting_constants(unit_cfg):
    out = build_fusing_splitting(constant_features(), unit_cfg, identity_store(unit_cfg, "fusing_splitting"))
    mid = out.intermediates
    assert np.all(mid.alpha_s.data == 12.0) and np.all(mid.alpha_l.data == 3.0)
    assert np.all(mid.beta_s.data == 15.0) and np.all(mid.beta_l.data == 15.0)
    assert values_per_level(out) == {2: 15.0, 3: 15.0, 4: 15.0, 5: 15.0}


def test_fusing_splitting_assigns_betas_directly(unit_cfg, rng):
    feats = features_from_arrays(random_features(unit_cfg, rng, base=16))
    out = build_fusing_splitting(feats, unit_cfg, init_pyramid_weights(unit_cfg, "fusing_splitting", 0))
    assert out.maps[3] is out.intermediates.beta_l
    assert out.maps[4] is out.intermediates.beta_s


def test_mfpn_constants(unit_cfg):
    out = build_mfpn(constant_features(), unit_cfg, identity_store(unit_cfg, "mfpn"))
    assert values_per_level(out) == {2: 41.0, 3: 46.0, 4: 56.0, 5: 60.0}


def test_mfpn_zero_branches_give_zero(unit_cfg, rng):
    weights = identity_store(unit_cfg, "mfpn")
    for name in weights:
        if not name.startswith("lateral"):
            weights[name].data[...] = 0.0
    feats = features_from_arrays(random_features(unit_cfg, rng, base=16))
    out = build_mfpn(feats, unit_cfg, weights)
    for lvl in out.levels:
        assert not out.maps[lvl].data.any()


# --- shape contract ----------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_shape_contract_64px(kind):
    cfg = FpnConfig(channels=3, backbone_channels=(2, 4, 4, 5))
    raw = {lvl: Tensor(np.ones((1, c, 64 >> lvl, 64 >> lvl))) for lvl, c in zip(cfg.levels, cfg.backbone_channels)}
    weights = init_pyramid_weights(cfg, kind, 0)
    out = build(kind, apply_laterals(BackboneFeatures(raw=raw), cfg, weights), cfg, weights)
    assert {lvl: out.maps[lvl].shape for lvl in out.levels} == {
        2: (1, 3, 16, 16), 3: (1, 3, 8, 8), 4: (1, 3, 4, 4), 5: (1, 3, 2, 2)
    }


@pytest.mark.parametrize("levels", [(3, 4), (2, 3, 4), (3, 4, 5, 6, 7)])
@pytest.mark.parametrize("kind", ["top_down", "bottom_up", "fpn"])
def test_other_level_counts(kind, levels):
    cfg = FpnConfig(levels=levels, channels=2, backbone_channels=(1,) * len(levels))
    feats = features_from_arrays(random_features(cfg, np.random.default_rng(0), base=2 ** len(levels) * 2))
    out = build(kind, feats, cfg, init_pyramid_weights(cfg, kind, 0))
    assert out.levels == list(levels)


@pytest.mark.parametrize("kind", ["fusing_splitting", "mfpn"])
def test_fusion_requires_four_levels(kind):
    cfg = FpnConfig(levels=(2, 3, 4), channels=1, backbone_channels=(1, 1, 1))
    with pytest.raises(ValueError, match="4"):
        weight_shapes(cfg, kind)
    feats = features_from_arrays(random_features(cfg, np.random.default_rng(0)))
    with pytest.raises(ValueError, match="4"):
        build(kind, feats, cfg, WeightStore())


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown"):
        weight_shapes(FpnConfig(), "panet")


def test_extra_levels_cannot_be_built():
    cfg = FpnConfig(levels=(3, 4, 5, 6, 7), channels=2, backbone_channels=(1, 1, 1), extra_levels="strided_conv")
    with pytest.raises(ValueError, match="extra"):
        init_pyramid_weights(cfg, "fpn", 0)


def test_missing_weight_is_reported(unit_cfg):
    with pytest.raises(KeyError, match="missing weight"):
        build_top_down(constant_features(), unit_cfg, WeightStore())


# --- weight naming and init -----------------------------------------------------------


def test_weight_names():
    cfg = FpnConfig(channels=4, backbone_channels=(1, 2, 3, 4))
    names = set(weight_shapes(cfg, "mfpn"))
    expected = {f"lateral.{l}.{p}" for l in range(2, 6) for p in ("weight", "bias")}
    expected |= {f"{b}.{l}.{p}" for b in ("td", "bu") for l in range(2, 6) for p in ("weight", "bias")}
    expected |= {f"fs.{s}.{p}" for s in "sl" for p in ("weight", "bias")}
    assert names == expected
    assert weight_shapes(cfg, "fusing_splitting")["fs.s.weight"] == (4, 8, 3, 3)


def test_glorot_init_bounds_and_zero_bias():
    cfg = FpnConfig(channels=8, backbone_channels=(4, 4, 4, 4))
    weights = init_pyramid_weights(cfg, "mfpn", 5)
    for name in weights:
        data = weights[name].data
        if name.endswith(".bias"):
            assert not data.any()
        else:
            c_out, c_in, k, _ = data.shape
            bound = np.sqrt(6.0 / (c_in * k * k + c_out * k * k))
            assert np.abs(data).max() <= bound and np.abs(data).max() > 0.5 * bound
    again = init_pyramid_weights(cfg, "mfpn", 5)
    assert all(np.array_equal(weights[n].data, again[n].data) for n in weights)


# --- invariants ------------------------------------------------------------------------


def test_branch_sum_consistency(rng):
    cfg = FpnConfig(channels=3, backbone_channels=(2, 3, 2, 3))
    weights = init_pyramid_weights(cfg, "mfpn", 3)
    for name in weights:
        weights[name].data[...] += 0.01 * rng.standard_normal(weights[name].shape)
    feats = features_from_arrays(random_features(cfg, rng, base=16))
    mixed = build_mfpn(feats, cfg, weights)
    separate = [build(k, feats, cfg, weights) for k in ("top_down", "bottom_up", "fusing_splitting")]
    for lvl in mixed.levels:
        total = sum(p.maps[lvl].data for p in separate)
        assert np.array_equal(mixed.maps[lvl].data, total)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("alpha", [0.5, 2.0, 7.0])
def test_linearity_with_zero_biases(kind, alpha):
    cfg = FpnConfig(channels=3, backbone_channels=(2, 3, 2, 3))
    weights = init_pyramid_weights(cfg, kind, 1)
    arrays = random_features(cfg, np.random.default_rng(9), base=16)
    base = build(kind, features_from_arrays(arrays), cfg, weights)
    scaled = build(kind, features_from_arrays({k: alpha * v for k, v in arrays.items()}), cfg, weights)
    for lvl in base.levels:
        assert np.abs(scaled.maps[lvl].data - alpha * base.maps[lvl].data).max() < 1e-10


@pytest.mark.parametrize("kind", KINDS)
def test_flow_masks(kind):
    cfg = FpnConfig(channels=2, backbone_channels=(2, 2, 2, 2))
    expected = analytic_mask(kind, cfg.levels)
    assert np.array_equal(reachability_mask(kind, cfg), expected)
    for seed in range(3):
        assert np.array_equal(flow_matrix(kind, cfg, seed).mask, expected)


def test_analytic_masks_spelled_out():
    levels = (2, 3, 4, 5)
    td = np.array([[1, 1, 1, 1], [0, 1, 1, 1], [0, 0, 1, 1], [0, 0, 0, 1]], bool)
    bu = np.array([[1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1]], bool)
    assert np.array_equal(analytic_mask("top_down", levels), td)
    assert np.array_equal(analytic_mask("bottom_up", levels), bu)
    assert analytic_mask("mfpn", levels).all() and analytic_mask("fusing_splitting", levels).all()


def test_builders_are_pure(unit_cfg, rng):
    arrays = random_features(unit_cfg, rng, base=16)
    weights = init_pyramid_weights(unit_cfg, "mfpn", 2)
    snapshot = {n: weights[n].data.copy() for n in weights}
    a = build_mfpn(features_from_arrays(arrays), unit_cfg, weights)
    b = build_mfpn(features_from_arrays(arrays), unit_cfg, weights)
    for lvl in a.levels:
        assert a.maps[lvl].data.tobytes() == b.maps[lvl].data.tobytes()
    assert all(np.array_equal(snapshot[n], weights[n].data) for n in weights)


def test_shared_laterals_receive_all_branch_gradients(rng):
    cfg = FpnConfig(channels=2, backbone_channels=(2, 2, 2, 2))
    weights = init_pyramid_weights(cfg, "mfpn", 4)
    raw = {lvl: Tensor(a) for lvl, a in random_features(cfg, rng, base=16).items()}

    def lateral_grad(kind):
        weights.zero_grad()
        out = build(kind, apply_laterals(BackboneFeatures(raw=raw), cfg, weights), cfg, weights)
        T.backward(T.add([T.sum_all(out.maps[l]) for l in out.levels]))
        return weights["lateral.3.weight"].grad.copy()

    parts = sum(lateral_grad(k) for k in ("top_down", "bottom_up", "fusing_splitting"))
    np.testing.assert_allclose(lateral_grad("mfpn"), parts, rtol=1e-12, atol=1e-12)
