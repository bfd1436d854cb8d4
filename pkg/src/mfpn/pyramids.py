"""Feature-pyramid builders: top-down, bottom-up, fusing-splitting, their
mixture, and the plain FPN baseline.

Notation follows the usual convention: ``G_i`` are raw backbone maps at
stride ``2**i``, ``C_i`` their lateral 1x1 projections to ``channels``
channels, and each builder returns one map per level.  Pyramid 3x3 convs
carry no activation or normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .weights import WeightStore

KINDS = ("top_down", "bottom_up", "fusing_splitting", "mfpn", "fpn")

# weight-name prefixes used by each kind; laterals are shared by everyone
BRANCH_PREFIXES = {
    "top_down": ("td",),
    "bottom_up": ("bu",),
    "fusing_splitting": ("fs",),
    "mfpn": ("td", "bu", "fs"),
    "fpn": ("fpn",),
}

EXTRA_POLICIES = ("off", "strided_conv")


@dataclass(frozen=True)
class FpnConfig:
    """Pyramid geometry.

    ``levels`` covers every output level.  The first
    ``len(backbone_channels)`` of them are backbone levels; any remaining
    ones are extra levels, which exist only for parameter counting.
    """

    levels: tuple = (2, 3, 4, 5)
    channels: int = 256
    backbone_channels: tuple = (256, 512, 1024, 2048)
    extra_levels: str = "off"

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "backbone_channels", tuple(int(v) for v in self.backbone_channels))
        if len(levels) < 2:
            raise ValueError("need at least 2 pyramid levels")
        if list(levels) != list(range(levels[0], levels[0] + len(levels))):
            raise ValueError(f"levels must be a contiguous ascending range, got {levels}")
        if levels[0] < 1:
            raise ValueError("levels start at 1 or above")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if any(c < 1 for c in self.backbone_channels):
            raise ValueError("backbone channel counts must be >= 1")
        if self.extra_levels not in EXTRA_POLICIES:
            raise ValueError(f"extra_levels must be one of {EXTRA_POLICIES}")
        nb = len(self.backbone_channels)
        if self.extra_levels == "off" and nb != len(levels):
            raise ValueError(
                f"{len(levels)} levels but {nb} backbone channel counts (extra levels are off)"
            )
        if self.extra_levels != "off" and not 2 <= nb < len(levels):
            raise ValueError("extra levels need at least 2 backbone levels and one extra level")

    @property
    def backbone_levels(self) -> tuple:
        return self.levels[: len(self.backbone_channels)]

    @property
    def extra(self) -> tuple:
        return self.levels[len(self.backbone_channels):]

    @property
    def top(self) -> int:
        return self.backbone_levels[-1]

    def in_channels(self, level: int) -> int:
        return self.backbone_channels[self.backbone_levels.index(level)]


@dataclass
class BackboneFeatures:
    raw: dict
    projected: dict = field(default_factory=dict)

    def check(self) -> None:
        for maps in (self.raw, self.projected):
            levels = sorted(maps)
            for lo, hi in zip(levels, levels[1:]):
                a, b = maps[lo].shape, maps[hi].shape
                if a[2] != 2 * b[2] or a[3] != 2 * b[3]:
                    raise ValueError(f"level {hi} is not exactly half of level {lo}: {a} vs {b}")


@dataclass
class FusionIntermediates:
    alpha_s: Tensor
    alpha_l: Tensor
    beta_s: Tensor
    beta_l: Tensor


@dataclass
class PyramidSet:
    kind: str
    maps: dict
    intermediates: Optional[FusionIntermediates] = None
    branches: dict = field(default_factory=dict)

    def __getitem__(self, level: int) -> Tensor:
        return self.maps[level]

    @property
    def levels(self) -> list:
        return sorted(self.maps)


# ---------------------------------------------------------------------------
# weight shapes and initialisation
# ---------------------------------------------------------------------------


def _conv(name: str, c_out: int, c_in: int, k: int) -> dict:
    return {f"{name}.weight": (c_out, c_in, k, k), f"{name}.bias": (1, c_out, 1, 1)}


def lateral_shapes(cfg: FpnConfig) -> dict:
    shapes = {}
    for lvl, cin in zip(cfg.backbone_levels, cfg.backbone_channels):
        shapes.update(_conv(f"lateral.{lvl}", cfg.channels, cin, 1))
    return shapes


def extra_shapes(cfg: FpnConfig) -> dict:
    # first extra level reads the deepest raw backbone map, later ones chain
    shapes = {}
    cin = cfg.backbone_channels[-1]
    for lvl in cfg.extra:
        shapes.update(_conv(f"extra.{lvl}", cfg.channels, cin, 3))
        cin = cfg.channels
    return shapes


def branch_shapes(cfg: FpnConfig, prefix: str) -> dict:
    C = cfg.channels
    shapes = {}
    if prefix in ("td", "bu", "fpn"):
        for lvl in cfg.backbone_levels:
            shapes.update(_conv(f"{prefix}.{lvl}", C, C, 3))
    elif prefix == "fs":
        shapes.update(_conv("fs.s", C, 2 * C, 3))
        shapes.update(_conv("fs.l", C, 2 * C, 3))
    else:
        raise ValueError(f"unknown branch prefix {prefix!r}")
    return shapes


def weight_shapes(cfg: FpnConfig, kind: str) -> dict:
    """Ordered ``name -> shape`` map of every parameter ``kind`` needs."""
    if kind not in KINDS:
        raise ValueError(f"unknown builder kind {kind!r}; expected one of {KINDS}")
    if kind in ("fusing_splitting", "mfpn") and len(cfg.backbone_levels) != 4:
        raise ValueError(f"{kind} is defined for exactly 4 backbone levels")
    shapes = lateral_shapes(cfg)
    for prefix in BRANCH_PREFIXES[kind]:
        shapes.update(branch_shapes(cfg, prefix))
    shapes.update(extra_shapes(cfg))
    return shapes


def glorot_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    c_out, c_in, kh, kw = shape
    a = np.sqrt(6.0 / (c_in * kh * kw + c_out * kh * kw))
    return rng.uniform(-a, a, size=shape)


def init_weights(shapes: dict, rng: np.random.Generator, store: Optional[WeightStore] = None) -> WeightStore:
    """Glorot-uniform conv weights, zero biases, drawn in ``shapes`` order."""
    store = WeightStore() if store is None else store
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            store.add(name, np.zeros(shape))
        else:
            store.add(name, glorot_uniform(rng, shape))
    return store


def init_pyramid_weights(cfg: FpnConfig, kind: str, seed: int = 0, store: Optional[WeightStore] = None) -> WeightStore:
    shapes = weight_shapes(cfg, kind)
    if cfg.extra_levels != "off":
        raise ValueError("extra levels are parameter-count only; build with extra_levels='off'")
    return init_weights(shapes, np.random.default_rng(seed), store)


def _conv_by_name(x: Tensor, weights: WeightStore, name: str) -> Tensor:
    return T.conv2d(x, weights[f"{name}.weight"], weights[f"{name}.bias"])


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def apply_laterals(raw: BackboneFeatures, cfg: FpnConfig, weights: WeightStore) -> BackboneFeatures:
    projected = {}
    for lvl in cfg.backbone_levels:
        if lvl not in raw.raw:
            raise ValueError(f"missing backbone map for level {lvl}")
        g = raw.raw[lvl]
        if g.shape[1] != cfg.in_channels(lvl):
            raise ValueError(
                f"level {lvl}: backbone map has {g.shape[1]} channels, config says {cfg.in_channels(lvl)}"
            )
        projected[lvl] = T.conv2d(g, weights[f"lateral.{lvl}.weight"], weights[f"lateral.{lvl}.bias"], 1)
    feats = BackboneFeatures(raw=dict(raw.raw), projected=projected)
    feats.check()
    return feats


def _projected(feats: BackboneFeatures, cfg: FpnConfig) -> dict:
    if cfg.extra_levels != "off":
        raise ValueError("extra levels are parameter-count only; build with extra_levels='off'")
    levels = cfg.backbone_levels
    if len(levels) < 2:
        raise ValueError("need at least 2 levels")
    missing = [lvl for lvl in levels if lvl not in feats.projected]
    if missing:
        raise ValueError(f"projected features missing for levels {missing}")
    return {lvl: feats.projected[lvl] for lvl in levels}


def build_top_down(feats: BackboneFeatures, cfg: FpnConfig, weights: WeightStore) -> PyramidSet:
    """Top-down pathway with a global-context term on the deepest level.

    The deepest map is ``conv(C_top + GAP(C_top))`` (GAP broadcast over the
    grid); below it ``F_i = conv_i(U(F_{i+1}) + C_i)``.
    """
    C = _projected(feats, cfg)
    levels = cfg.backbone_levels
    top = levels[-1]
    maps = {top: _conv_by_name(T.add([C[top], T.global_avg_pool(C[top])]), weights, f"td.{top}")}
    for lvl in reversed(levels[:-1]):
        merged = T.add([T.upsample_nearest_x2(maps[lvl + 1]), C[lvl]])
        maps[lvl] = _conv_by_name(merged, weights, f"td.{lvl}")
    return PyramidSet("top_down", dict(sorted(maps.items())))


def build_fpn(feats: BackboneFeatures, cfg: FpnConfig, weights: WeightStore) -> PyramidSet:
    """Original FPN: merge top-down first, then one 3x3 output conv per level."""
    C = _projected(feats, cfg)
    levels = cfg.backbone_levels
    merged = {levels[-1]: C[levels[-1]]}
    for lvl in reversed(levels[:-1]):
        merged[lvl] = T.add([T.upsample_nearest_x2(merged[lvl + 1]), C[lvl]])
    maps = {lvl: _conv_by_name(merged[lvl], weights, f"fpn.{lvl}") for lvl in levels}
    return PyramidSet("fpn", maps)


def build_bottom_up(feats: BackboneFeatures, cfg: FpnConfig, weights: WeightStore) -> PyramidSet:
    """``F_i = conv_i(D(F_{i-1}) + C_i + U(C_{i+1}))``; the lowest level has
    no ``D`` term and the highest no ``U`` term."""
    C = _projected(feats, cfg)
    levels = cfg.backbone_levels
    maps = {}
    for k, lvl in enumerate(levels):
        terms = []
        if k > 0:
            terms.append(T.maxpool_2x2(maps[levels[k - 1]]))
        terms.append(C[lvl])
        if k < len(levels) - 1:
            terms.append(T.upsample_nearest_x2(C[levels[k + 1]]))
        maps[lvl] = _conv_by_name(T.add(terms), weights, f"bu.{lvl}")
    return PyramidSet("bottom_up", maps)


def build_fusing_splitting(feats: BackboneFeatures, cfg: FpnConfig, weights: WeightStore) -> PyramidSet:
    C = _projected(feats, cfg)
    levels = cfg.backbone_levels
    if len(levels) != 4:
        raise ValueError(f"fusing-splitting needs exactly 4 levels, got {len(levels)}")
    l2, l3, l4, l5 = levels
    alpha_s = T.add([C[l4], T.upsample_nearest_x2(C[l5])])
    alpha_l = T.add([T.maxpool_2x2(C[l2]), C[l3]])
    beta_s = _conv_by_name(T.concat_channels(alpha_s, T.maxpool_2x2(alpha_l)), weights, "fs.s")
    beta_l = _conv_by_name(T.concat_channels(T.upsample_nearest_x2(alpha_s), alpha_l), weights, "fs.l")
    maps = {
        l2: T.upsample_nearest_x2(beta_l),
        l3: beta_l,
        l4: beta_s,
        l5: T.maxpool_2x2(beta_s),
    }
    return PyramidSet(
        "fusing_splitting", maps, intermediates=FusionIntermediates(alpha_s, alpha_l, beta_s, beta_l)
    )


def build_mfpn(feats: BackboneFeatures, cfg: FpnConfig, weights: WeightStore) -> PyramidSet:
    """Per-level sum of the three branches, all reading the same laterals."""
    if len(cfg.backbone_levels) != 4:
        raise ValueError("mfpn needs exactly 4 levels")
    branches = {
        "top_down": build_top_down(feats, cfg, weights),
        "bottom_up": build_bottom_up(feats, cfg, weights),
        "fusing_splitting": build_fusing_splitting(feats, cfg, weights),
    }
    maps = {lvl: T.add([b.maps[lvl] for b in branches.values()]) for lvl in cfg.backbone_levels}
    return PyramidSet("mfpn", maps, branches=branches)


BUILDERS = {
    "top_down": build_top_down,
    "bottom_up": build_bottom_up,
    "fusing_splitting": build_fusing_splitting,
    "mfpn": build_mfpn,
    "fpn": build_fpn,
}


def build(kind: str, feats: BackboneFeatures, cfg: FpnConfig, weights: WeightStore) -> PyramidSet:
    try:
        builder = BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown builder kind {kind!r}; expected one of {KINDS}") from None
    return builder(feats, cfg, weights)


def features_from_arrays(arrays: dict, requires_grad: bool = False) -> BackboneFeatures:
    """Wrap already-projected ``C_i`` arrays as leaf tensors."""
    projected = {lvl: Tensor(a, requires_grad=requires_grad, name=f"C{lvl}") for lvl, a in arrays.items()}
    feats = BackboneFeatures(raw={}, projected=projected)
    feats.check()
    return feats
