"""Finite-difference gradient suite over every op and every builder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .analysis import GradCheckReport, grad_check
from .backbone import generate_blob_scene, init_backbone_weights, synth_backbone_forward
from .pyramids import KINDS, BackboneFeatures, FpnConfig, apply_laterals, build, init_pyramid_weights
from .tensor import Tensor
from .training import detection_loss, head_forward, head_shapes
from .weights import WeightStore

SMALL = FpnConfig(channels=2, backbone_channels=(2, 3, 2, 3))


def _probe_loss(out: Tensor, offset: np.ndarray) -> Tensor:
    # quadratic around a random offset: no symmetric cancellations
    return T.sum_squares(T.add([out, Tensor(offset)]))


def _leaf(rng, shape, name):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (forward over leaves, leaves)."""
    x = _leaf(rng, (1, 2, 6, 6), "x")
    w3 = _leaf(rng, (3, 2, 3, 3), "w3")
    w1 = _leaf(rng, (3, 2, 1, 1), "w1")
    b = _leaf(rng, (1, 3, 1, 1), "b")
    y = _leaf(rng, (1, 2, 6, 6), "y")
    z = _leaf(rng, (1, 3, 6, 6), "z")
    v = _leaf(rng, (1, 2, 1, 1), "v")
    small = _leaf(rng, (2, 2, 4, 4), "small")
    return {
        "conv3x3": (lambda: T.conv2d(x, w3, b), [x, w3, b]),
        "conv1x1": (lambda: T.conv2d(x, w1, b, 1), [x, w1, b]),
        "upsample2x": (lambda: T.upsample_nearest_x2(small), [small]),
        "maxpool2x2": (lambda: T.maxpool_2x2(x), [x]),
        "gap": (lambda: T.global_avg_pool(x), [x]),
        "add": (lambda: T.add([x, y, v]), [x, y, v]),
        "concat": (lambda: T.concat_channels(x, z), [x, z]),
        "relu": (lambda: T.relu(x), [x]),
        "sigmoid": (lambda: T.sigmoid(x), [x]),
    }


def check_ops(seed: int, tolerance: float = 1e-5) -> dict:
    rng = np.random.default_rng([seed, 11])
    reports = {}
    for name, (fn, leaves) in op_cases(rng).items():
        offset = rng.standard_normal(fn().shape)
        reports[f"op/{name}"] = grad_check(lambda: _probe_loss(fn(), offset), leaves, tolerance)
    return reports


def _randomize_biases(store: WeightStore, rng: np.random.Generator) -> None:
    for name in store:
        if name.endswith(".bias"):
            store[name].data[...] = 0.1 * rng.standard_normal(store[name].shape)


def check_builder(kind: str, seed: int, cfg: FpnConfig = SMALL, base: int = 8,
                  tolerance: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng([seed, 12])
    weights = init_pyramid_weights(cfg, kind, seed)
    _randomize_biases(weights, rng)
    raw = {}
    for k, (lvl, c) in enumerate(zip(cfg.backbone_levels, cfg.backbone_channels)):
        side = base >> k
        raw[lvl] = Tensor(rng.standard_normal((1, c, side, side)), requires_grad=True, name=f"G{lvl}")
    offsets = {lvl: rng.standard_normal((1, cfg.channels, base >> k, base >> k))
               for k, lvl in enumerate(cfg.backbone_levels)}

    def loss():
        feats = apply_laterals(BackboneFeatures(raw=raw), cfg, weights)
        out = build(kind, feats, cfg, weights)
        return T.add([T.sum_all(_probe_loss(out.maps[lvl], offsets[lvl])) for lvl in out.levels])

    return grad_check(loss, list(weights.parameters()) + list(raw.values()), tolerance)


def check_composite(kind: str, seed: int, cfg: FpnConfig = SMALL, tolerance: float = 1e-5) -> GradCheckReport:
    """Backbone -> laterals -> builder -> head -> detection loss on a 32px scene."""
    rng = np.random.default_rng([seed, 13])
    weights = init_backbone_weights(cfg, seed, stem_channels=2)
    init_pyramid_weights(cfg, kind, seed, store=weights)
    for name, shape in head_shapes(cfg).items():
        weights.add(name, rng.standard_normal(shape))
    _randomize_biases(weights, rng)
    scene = generate_blob_scene(seed, {"small": 1}, size=32, levels=cfg.backbone_levels)
    image = Tensor(scene.image.data + 0.1 * rng.standard_normal(scene.image.shape))

    def loss():
        raw = synth_backbone_forward(image, weights, cfg)
        out = build(kind, apply_laterals(raw, cfg, weights), cfg, weights)
        return detection_loss(head_forward(out, weights), scene.targets)

    return grad_check(loss, list(weights.parameters()), tolerance)


def gradient_suite(seeds=(0, 1, 2), tolerance: float = 1e-5, composite: bool = True) -> dict:
    reports = {}
    for seed in seeds:
        for name, rep in check_ops(seed, tolerance).items():
            reports[f"{name}/seed{seed}"] = rep
        for kind in KINDS:
            reports[f"builder/{kind}/seed{seed}"] = check_builder(kind, seed, tolerance=tolerance)
        if composite:
            reports[f"composite/mfpn/seed{seed}"] = check_composite("mfpn", seed, tolerance=tolerance)
    return reports
