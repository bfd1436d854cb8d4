"""Parameter counting, gradient-probed flow matrices, finite-difference
gradient checking and heatmap export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .pyramids import (
    FpnConfig,
    PyramidSet,
    build,
    features_from_arrays,
    init_pyramid_weights,
    weight_shapes,
)
from .tensor import Tensor

# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

PRESETS = {
    # RetinaNet neck on ResNet-50: P3-P5 from C3-C5, P6/P7 by strided convs
    "retinanet-fpn": (
        FpnConfig(levels=(3, 4, 5, 6, 7), channels=256, backbone_channels=(512, 1024, 2048),
                  extra_levels="strided_conv"),
        "fpn",
    ),
    # the four-level pyramid on the same backbone, plus the same extra levels
    "retinanet-mfpn": (
        FpnConfig(levels=(2, 3, 4, 5, 6, 7), channels=256, backbone_channels=(256, 512, 1024, 2048),
                  extra_levels="strided_conv"),
        "mfpn",
    ),
    "mfpn-c256": (FpnConfig(), "mfpn"),
}

# Table values in millions, for the reconciliation report only
PUBLISHED_MILLIONS = {
    "fpn": 8.00,
    "top_down": 8.52,
    "bottom_up": 8.52,
    "fusing_splitting": 6.49,
    "mfpn": 11.47,
}


def _component(name: str) -> str:
    head = name.split(".", 1)[0]
    return {"lateral": "laterals", "extra": "extra_levels"}.get(head, head)


@dataclass
class ParamReport:
    kind: str
    config: FpnConfig
    rows: list = field(default_factory=list)  # (name, shape, count)

    @property
    def total(self) -> int:
        return sum(r[2] for r in self.rows)

    @property
    def subtotals(self) -> dict:
        out: dict = {}
        for name, _, n in self.rows:
            key = _component(name)
            out[key] = out.get(key, 0) + n
        return out

    def to_text(self) -> str:
        width = max([len(r[0]) for r in self.rows] + [10])
        lines = [f"{'name':<{width}}  {'shape':<22} {'count':>12}"]
        for name, shape, n in self.rows:
            lines.append(f"{name:<{width}}  {str(tuple(shape)):<22} {n:>12,d}")
        lines.append("")
        for comp, n in self.subtotals.items():
            lines.append(f"{'[' + comp + ']':<{width}}  {'':<22} {n:>12,d}")
        lines.append(f"{'TOTAL':<{width}}  {'':<22} {self.total:>12,d}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "levels": list(self.config.levels),
            "channels": self.config.channels,
            "backbone_channels": list(self.config.backbone_channels),
            "extra_levels": self.config.extra_levels,
            "rows": [{"name": n, "shape": list(s), "count": c} for n, s, c in self.rows],
            "subtotals": self.subtotals,
            "total": self.total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def count_params(cfg: FpnConfig, kind: str) -> ParamReport:
    """Count weights and biases from shapes alone."""
    rows = [(name, shape, int(np.prod(shape))) for name, shape in weight_shapes(cfg, kind).items()]
    return ParamReport(kind, cfg, rows)


def lateral_count(cfg: FpnConfig) -> int:
    return count_params(cfg, "top_down").subtotals["laterals"]


def reconciliation_report() -> str:
    """Counted totals against the published table under candidate configs."""
    configs = {
        "levels 2-5, no extra levels": FpnConfig(),
        "levels 2-7, strided extra levels": PRESETS["retinanet-mfpn"][0],
    }
    lines = ["kind               published(M)  " + "  ".join(f"{k:>32}" for k in configs)]
    for kind, published in PUBLISHED_MILLIONS.items():
        cells = []
        for cfg in configs.values():
            n = count_params(cfg, kind).total
            cells.append(f"{n / 1e6:>14.3f}M ({n / 1e6 - published:+.3f})".rjust(32))
        lines.append(f"{kind:<18} {published:>12.2f}  " + "  ".join(cells))
    base = count_params(*PRESETS["retinanet-fpn"]).total
    lines.append("")
    lines.append(f"retinanet-fpn preset (levels 3-7): {base:,d} = {base / 1e6:.3f}M vs published 8.00M")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# flow matrices
# ---------------------------------------------------------------------------


def analytic_mask(kind: str, levels: Sequence[int]) -> np.ndarray:
    """Closed-form dependence of output level i (rows) on input level j."""
    levels = list(levels)
    top = levels[-1]
    i = np.array(levels)[:, None]
    j = np.array(levels)[None, :]
    if kind in ("top_down", "fpn"):
        return j >= i
    if kind == "bottom_up":
        return j <= np.minimum(i + 1, top)
    if kind in ("fusing_splitting", "mfpn"):
        return np.ones((len(levels), len(levels)), dtype=bool)
    raise ValueError(f"unknown kind {kind!r}")


@dataclass
class FlowMatrix:
    kind: str
    levels: list
    values: np.ndarray
    threshold: float = 1e-12

    @property
    def mask(self) -> np.ndarray:
        return self.values > self.threshold

    def to_text(self) -> str:
        head = "out\\in " + "".join(f"{'C' + str(j):>12}" for j in self.levels)
        rows = [head]
        for r, i in enumerate(self.levels):
            cells = "".join(
                f"{v:>11.3e}{'*' if m else ' '}" for v, m in zip(self.values[r], self.mask[r])
            )
            rows.append(f"F{i:<6}" + cells)
        return "\n".join(rows) + "\n"


def random_features(cfg: FpnConfig, rng: np.random.Generator, base: int = 8, batch: int = 1) -> dict:
    """Random projected maps with ``base x base`` cells at the lowest level."""
    arrays = {}
    for k, lvl in enumerate(cfg.backbone_levels):
        side = base >> k
        if side < 1:
            raise ValueError(f"base size {base} too small for {len(cfg.backbone_levels)} levels")
        arrays[lvl] = rng.standard_normal((batch, cfg.channels, side, side))
    return arrays


def flow_matrix(kind: str, cfg: FpnConfig, seed: int, base: int = 8, threshold: float = 1e-12) -> FlowMatrix:
    """Max-abs gradient of ``||F_i||^2`` w.r.t. each projected map ``C_j``.

    Weights are drawn from ``seed`` with zero biases; the probe input from
    ``seed`` as well, through an independent stream.
    """
    weights = init_pyramid_weights(cfg, kind, seed)
    arrays = random_features(cfg, np.random.default_rng([seed, 1]), base)
    levels = list(cfg.backbone_levels)
    values = np.zeros((len(levels), len(levels)))
    for r, lvl in enumerate(levels):
        feats = features_from_arrays(arrays, requires_grad=True)
        out = build(kind, feats, cfg, weights)
        T.backward(T.sum_squares(out.maps[lvl]))
        for c, src in enumerate(levels):
            g = feats.projected[src].grad
            values[r, c] = 0.0 if g is None else float(np.abs(g).max())
    return FlowMatrix(kind, levels, values, threshold)


def reachability_mask(kind: str, cfg: FpnConfig, seed: int = 0) -> np.ndarray:
    """Dependence pattern read off the tape structure, no gradients involved."""
    weights = init_pyramid_weights(cfg, kind, seed)
    feats = features_from_arrays(random_features(cfg, np.random.default_rng(seed)), requires_grad=True)
    out = build(kind, feats, cfg, weights)
    levels = list(cfg.backbone_levels)
    mask = np.zeros((len(levels), len(levels)), dtype=bool)
    for r, lvl in enumerate(levels):
        anc = T.ancestors(out.maps[lvl])
        for c, src in enumerate(levels):
            mask[r, c] = feats.projected[src].node_id in anc
    return mask


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def to_text(self) -> str:
        lines = [f"{name:<28} {err:.3e}  {'ok' if err < self.tolerance else 'FAIL'}"
                 for name, err in self.errors.items()]
        lines.append(f"{'max':<28} {self.max_error:.3e}  {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max-norm relative error; magnitudes below ``floor`` are compared absolutely."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(loss_fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``x``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = float(loss_fn().data.sum())
        flat[k] = orig - eps
        lo = float(loss_fn().data.sum())
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * eps)
    return grad


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], tolerance: float = 1e-5,
               eps: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph on every call and return a scalar.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    T.backward(loss)
    analytic = {}
    for k, p in enumerate(params):
        analytic[k] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.zero_grad()
    errors = {}
    for k, p in enumerate(params):
        name = p.name or f"param{k}"
        errors[name] = relative_error(analytic[k], numeric_grad(loss_fn, p, eps))
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

CONSTANT_GRAY = 128


def activation_map(x: Tensor) -> np.ndarray:
    """Channel-wise mean of absolute activations for the first sample."""
    return np.abs(x.data[0]).mean(axis=0)


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes uniform mid-gray."""
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, CONSTANT_GRAY, dtype=np.uint8)
    return np.floor((values - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not a binary 8-bit PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_heatmap_csv(path, level: int, values: np.ndarray) -> None:
    lines = ["level,y,x,value"]
    for (y, x), v in np.ndenumerate(values):
        lines.append(f"{level},{y},{x},{float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_heatmap_csv(path) -> tuple:
    rows = Path(path).read_text().splitlines()
    if rows[0] != "level,y,x,value":
        raise ValueError(f"{path}: unexpected header {rows[0]!r}")
    recs = [r.split(",") for r in rows[1:]]
    level = int(recs[0][0])
    h = max(int(r[1]) for r in recs) + 1
    w = max(int(r[2]) for r in recs) + 1
    values = np.zeros((h, w))
    for _, y, x, v in recs:
        values[int(y), int(x)] = float(v)
    return level, values


def export_heatmap(pyramid: PyramidSet, path) -> list:
    """Write ``<path>_L{i}.pgm`` and ``<path>_L{i}.csv`` for every level."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for lvl in pyramid.levels:
        values = activation_map(pyramid.maps[lvl])
        pgm = path.parent / f"{path.name}_L{lvl}.pgm"
        csv = path.parent / f"{path.name}_L{lvl}.csv"
        write_pgm(pgm, to_gray(values))
        write_heatmap_csv(csv, lvl, values)
        written += [pgm, csv]
    return written

