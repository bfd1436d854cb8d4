import json

import numpy as np
import pytest

from conftest import constant_features, identity_store
from mfpn import tensor as T
from mfpn.analysis import (
    CONSTANT_GRAY,
    PRESETS,
    activation_map,
    count_params,
    export_heatmap,
    flow_matrix,
    grad_check,
    lateral_count,
    read_heatmap_csv,
    read_pgm,
    reconciliation_report,
    to_gray,
    write_heatmap_csv,
    write_pgm,
)
from mfpn.checks import check_builder
from mfpn.pyramids import KINDS, FpnConfig, PyramidSet, build_mfpn, build_top_down, features_from_arrays
from mfpn.tensor import Parameter, Tensor, record_op

BRANCHES = ("top_down", "bottom_up", "fusing_splitting")


# --- parameter counting ----------------------------------------------------------


def test_hand_count_unit_config(unit_cfg):
    # laterals 4 * (1 + 1), convs 4 * (9 + 1)
    report = count_params(unit_cfg, "top_down")
    assert report.total == 48
    assert report.subtotals == {"laterals": 8, "td": 40}


def test_retinanet_baseline_near_eight_million():
    total = count_params(*PRESETS["retinanet-fpn"]).total
    assert abs(total - 8.0e6) <= 0.05 * 8.0e6
    # laterals + three output convs + two extra-level convs, weights and biases
    expected = (256 * (512 + 1024 + 2048) + 3 * 256) + 3 * (9 * 256 * 256 + 256) \
        + (9 * 2048 * 256 + 256) + (9 * 256 * 256 + 256)
    assert total == expected


@pytest.mark.parametrize("cfg", [
    FpnConfig(),
    FpnConfig(channels=1, backbone_channels=(1, 1, 1, 1)),
    FpnConfig(channels=48, backbone_channels=(3, 5, 7, 11)),
])
def test_count_identities(cfg):
    n = {k: count_params(cfg, k).total for k in BRANCHES + ("mfpn",)}
    assert n["top_down"] == n["bottom_up"]
    assert n["fusing_splitting"] < n["top_down"]
    assert n["mfpn"] < sum(n[k] for k in BRANCHES)
    assert n["mfpn"] == sum(n[k] for k in BRANCHES) - 2 * lateral_count(cfg)


def test_extra_levels_are_shared_like_laterals():
    cfg = PRESETS["retinanet-mfpn"][0]
    n = {k: count_params(cfg, k).total for k in BRANCHES + ("mfpn",)}
    shared = lateral_count(cfg) + count_params(cfg, "top_down").subtotals["extra_levels"]
    assert n["mfpn"] == sum(n[k] for k in BRANCHES) - 2 * shared


def test_published_ordering_under_preset():
    cfg = PRESETS["retinanet-mfpn"][0]
    n = {k: count_params(cfg, k).total for k in BRANCHES + ("mfpn",)}
    assert n["fusing_splitting"] < n["top_down"] == n["bottom_up"] < n["mfpn"]


def test_count_matches_initialised_store():
    cfg = FpnConfig(channels=5, backbone_channels=(2, 3, 4, 5))
    from mfpn.pyramids import init_pyramid_weights

    for kind in KINDS:
        assert count_params(cfg, kind).total == init_pyramid_weights(cfg, kind, 0).count()


def test_report_is_config_pure():
    cfg = FpnConfig(channels=64)
    a, b = count_params(cfg, "mfpn"), count_params(cfg, "mfpn")
    assert a.to_text() == b.to_text() and a.to_json() == b.to_json()
    data = json.loads(a.to_json())
    assert data["total"] == sum(r["count"] for r in data["rows"]) == a.total
    assert "TOTAL" in a.to_text()


def test_reconciliation_report_lists_every_kind():
    text = reconciliation_report()
    for kind in BRANCHES + ("mfpn", "fpn"):
        assert kind in text
    assert "8.00" in text


# --- flow matrices ----------------------------------------------------------------------


def test_flow_values_seed_dependent_pattern_not():
    cfg = FpnConfig(channels=2, backbone_channels=(2, 2, 2, 2))
    a, b = flow_matrix("bottom_up", cfg, 0), flow_matrix("bottom_up", cfg, 1)
    assert not np.allclose(a.values, b.values)
    assert np.array_equal(a.mask, b.mask)
    assert a.to_text().count("*") == int(a.mask.sum())


# --- gradient checking --------------------------------------------------------------------


def test_grad_check_passes_on_mfpn():
    rep = check_builder("mfpn", 0)
    assert rep.passed, rep.to_text()


def test_corrupted_backward_is_caught():
    x = Parameter("x", np.random.default_rng(0).standard_normal((1, 1, 4, 4)))

    def broken_double(t):
        return record_op("double", (t,), 2 * t.data, lambda g: (3 * g,))

    rep = grad_check(lambda: T.sum_squares(broken_double(x)), [x])
    assert not rep.passed and rep.max_error > 0.1
    assert "FAIL" in rep.to_text()


def test_zero_network_passes_trivially(unit_cfg):
    weights = identity_store(unit_cfg, "mfpn")
    for name in weights:
        weights[name].data[...] = 0.0
    feats = constant_features()
    rep = grad_check(lambda: T.sum_squares(build_mfpn(feats, unit_cfg, weights).maps[2]), weights.parameters())
    assert rep.passed and rep.max_error == 0.0


def test_grad_check_needs_scalar():
    x = Parameter("x", np.ones((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        grad_check(lambda: T.relu(x), [x])


# --- heatmaps ----------------------------------------------------------------------------------


def test_min_max_gray_levels(tmp_path):
    pixels = to_gray(np.array([[0.0, 1.0], [2.0, 3.0]]))
    assert pixels.reshape(-1).tolist() == [0, 85, 170, 255]
    write_pgm(tmp_path / "m.pgm", pixels)
    assert (tmp_path / "m.pgm").read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255])
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), pixels)


def test_constant_map_is_mid_gray():
    assert np.all(to_gray(np.full((3, 5), 7.5)) == CONSTANT_GRAY)


def test_activation_map_is_channel_mean_of_abs():
    x = Tensor(np.array([[[[1.0, -2.0]], [[-3.0, 4.0]]]]))
    np.testing.assert_array_equal(activation_map(x), [[2.0, 3.0]])


def test_csv_round_trip_full_precision(tmp_path):
    values = np.random.default_rng(0).standard_normal((3, 4)) * np.array([1e-300, 1, 1e10, np.pi])
    write_heatmap_csv(tmp_path / "h.csv", 3, values)
    level, back = read_heatmap_csv(tmp_path / "h.csv")
    assert level == 3 and np.array_equal(back, values)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "level,y,x,value"


def test_export_heatmap_files_and_determinism(tmp_path, unit_cfg):
    weights = identity_store(unit_cfg, "top_down")
    arrays = {lvl: np.random.default_rng(lvl).standard_normal((1, 1, 16 >> k, 16 >> k))
              for k, lvl in enumerate(unit_cfg.levels)}

    def run(sub):
        pyr = build_top_down(features_from_arrays(arrays), unit_cfg, weights)
        return export_heatmap(pyr, tmp_path / sub / "td")

    first, second = run("a"), run("b")
    assert [p.name for p in first] == [f"td_L{l}.{ext}" for l in (2, 3, 4, 5) for ext in ("pgm", "csv")]
    for p, q in zip(first, second):
        assert p.read_bytes() == q.read_bytes()
    assert read_pgm(first[0]).shape == (16, 16)


def test_export_constant_pyramid(tmp_path):
    pyr = PyramidSet("const", {2: Tensor(np.full((1, 2, 4, 4), -3.0))})
    pgm, csv = export_heatmap(pyr, tmp_path / "c")
    assert np.all(read_pgm(pgm) == CONSTANT_GRAY)
    assert np.all(read_heatmap_csv(csv)[1] == 3.0)
