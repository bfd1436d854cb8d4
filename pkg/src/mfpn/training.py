"""Toy detection head, weighted BCE loss, SGD loop and size-class scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .backbone import (
    CLASS_NAMES,
    BlobScene,
    backbone_shapes,
    generate_blob_scene,
    synth_backbone_forward,
)
from .pyramids import FpnConfig, apply_laterals, build, init_weights, weight_shapes
from .tensor import Tensor
from .weights import WeightStore, load_weights, save_weights

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
# soft targets: only cells near a blob peak count as positives
POSITIVE_AT = 0.9
LEVEL_CLASS = {2: "small", 3: "medium", 4: "medium", 5: "large"}


class TrainingError(RuntimeError):
    pass


def head_shapes(cfg: FpnConfig) -> dict:
    return {"head.weight": (1, cfg.channels, 1, 1), "head.bias": (1, 1, 1, 1)}


def model_shapes(cfg: FpnConfig, kind: str, stem_channels: int = 8) -> dict:
    shapes = backbone_shapes(cfg, 1, stem_channels)
    shapes.update(weight_shapes(cfg, kind))
    shapes.update(head_shapes(cfg))
    return shapes


def init_model(cfg: FpnConfig, kind: str, seed: int = 0, stem_channels: int = 8) -> WeightStore:
    """Backbone, pyramid and head weights drawn from one seeded stream."""
    return init_weights(model_shapes(cfg, kind, stem_channels), np.random.default_rng(seed))


def head_forward(pyramid, weights: WeightStore) -> dict:
    """One shared 1x1 conv (C -> 1) on every level, squashed to (0, 1)."""
    w, b = weights["head.weight"], weights["head.bias"]
    out = {}
    for lvl, x in pyramid.maps.items():
        if x.shape[1] != w.shape[1]:
            raise ValueError(f"level {lvl} has {x.shape[1]} channels, head expects {w.shape[1]}")
        out[lvl] = T.sigmoid(T.conv2d(x, w, b, 1))
    return out


def positive_weight(target: np.ndarray) -> float:
    """Negative/positive cell ratio of one level, clamped to [1, 100]."""
    pos = int((target >= POSITIVE_AT).sum())
    if pos == 0:
        return 1.0
    return float(np.clip((target.size - pos) / pos, 1.0, 100.0))


def detection_loss(pred: Mapping[int, Tensor], target: Mapping[int, Tensor]) -> Tensor:
    """Weighted mean binary cross-entropy over every cell of every level.

    Cells with target >= ``POSITIVE_AT`` count as positives and get the level's
    negative/positive ratio as weight; the mean is taken over the weights,
    so the loss is a convex combination of per-cell cross-entropies.
    """
    levels = sorted(pred)
    if sorted(target) != levels:
        raise ValueError(f"levels differ: pred {levels}, target {sorted(target)}")
    ps, ts, ws = [], [], []
    for lvl in levels:
        t = target[lvl].data if isinstance(target[lvl], Tensor) else np.asarray(target[lvl], float)
        if pred[lvl].shape != t.shape:
            raise ValueError(f"level {lvl}: pred {pred[lvl].shape} vs target {t.shape}")
        if t.min() < 0 or t.max() > 1:
            raise ValueError(f"level {lvl}: target values outside [0, 1]")
        ps.append(np.clip(pred[lvl].data, PROB_EPS, 1 - PROB_EPS))
        ts.append(t)
        ws.append(np.where(t >= POSITIVE_AT, positive_weight(t), 1.0))
    total_w = sum(w.sum() for w in ws)
    value = sum((w * -(t * np.log(p) + (1 - t) * np.log(1 - p))).sum() for p, t, w in zip(ps, ts, ws))
    out = np.full((1, 1, 1, 1), value / total_w)

    def _backward(g):
        return [g * w * (-(t / p) + (1 - t) / (1 - p)) / total_w for p, t, w in zip(ps, ts, ws)]

    return T.record_op("weighted_bce", [pred[lvl] for lvl in levels], out, _backward)


def forward_scene(image: Tensor, weights: WeightStore, cfg: FpnConfig, kind: str) -> dict:
    raw = synth_backbone_forward(image, weights, cfg)
    feats = apply_laterals(raw, cfg, weights)
    return head_forward(build(kind, feats, cfg, weights), weights)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class TrainState:
    step: int
    lr: float
    weights: WeightStore
    seed: int
    running_loss: float = float("nan")
    losses: list = field(default_factory=list)
    window: int = 50

    def update_running(self) -> None:
        self.running_loss = float(np.mean(self.losses[-self.window:]))

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_weights(directory / "checkpoint.mfpw", self.weights)
        meta = {"step": self.step, "lr": self.lr, "seed": self.seed, "window": self.window,
                "running_loss": self.running_loss, "losses": self.losses}
        (directory / "state.json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, directory) -> "TrainState":
        directory = Path(directory)
        meta = json.loads((directory / "state.json").read_text())
        return cls(meta["step"], meta["lr"], load_weights(directory / "checkpoint.mfpw"), meta["seed"],
                   meta["running_loss"], meta["losses"], meta["window"])


def train_step(state: TrainState, scene: BlobScene, kind: str, cfg: FpnConfig) -> float:
    params = state.weights.trainable()
    for p in params:
        p.zero_grad()
    pred = forward_scene(scene.image, state.weights, cfg, kind)
    loss = detection_loss(pred, scene.targets)
    value = float(loss.data.item())
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step} (scene seed {scene.seed})")
    T.backward(loss)
    for p in params:
        if p.grad is not None:
            p.data -= state.lr * p.grad
    state.step += 1
    state.losses.append(value)
    state.update_running()
    return value


def train_epoch(state: TrainState, scenes: int, kind: str, cfg: FpnConfig,
                scene_spec: Optional[Mapping[str, int]] = None, image_size: int = 128) -> TrainState:
    """Plain SGD, one scene per step; scene ``k`` is a pure function of
    ``(state.seed, k)``."""
    if state.lr < 0:
        raise ValueError("learning rate must be >= 0")
    levels = cfg.backbone_levels
    for _ in range(scenes):
        scene = generate_blob_scene(scene_seed(state.seed, state.step), scene_spec, image_size, levels=levels)
        value = train_step(state, scene, kind, cfg)
        log.debug("step %d loss %.6f running %.6f", state.step, value, state.running_loss)
    return state


def write_loss_log(path, losses) -> None:
    lines = ["step,loss"] + [f"{k + 1},{v!r}" for k, v in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def find_peaks(prob: np.ndarray, threshold: float = 0.5) -> list:
    """Local maxima above ``threshold`` in a 2-D map, as (y, x) cells.

    A cell must be >= every neighbour and strictly greater than the
    neighbours before it in row-major order, so a plateau yields one peak.
    """
    h, w = prob.shape
    padded = np.pad(prob, 1, constant_values=-np.inf)
    keep = prob > threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            keep &= (prob > nb) if (dy, dx) < (0, 0) else (prob >= nb)
    return [tuple(int(v) for v in yx) for yx in np.argwhere(keep)]


def match_peaks(peaks: list, centers: list, radius: float = 1.5) -> int:
    """Greedy nearest-first one-to-one matching; returns the match count."""
    pairs = sorted(
        (float(np.hypot(py - cy, px - cx)), i, j)
        for i, (py, px) in enumerate(peaks)
        for j, (cy, cx) in enumerate(centers)
    )
    used_p, used_c = set(), set()
    for d, i, j in pairs:
        if d > radius:
            break
        if i not in used_p and j not in used_c:
            used_p.add(i)
            used_c.add(j)
    return len(used_p)


@dataclass
class SizeScores:
    counts: dict  # class -> [true positives, predicted peaks, ground-truth blobs]

    def precision(self, cls: str) -> float:
        tp, npred, _ = self.counts[cls]
        return tp / npred if npred else 0.0

    def recall(self, cls: str) -> float:
        tp, _, ngt = self.counts[cls]
        return tp / ngt if ngt else 0.0

    def f1(self, cls: str) -> float:
        p, r = self.precision(cls), self.recall(cls)
        return 2 * p * r / (p + r) if p + r else 0.0

    def as_tuple(self) -> tuple:
        return tuple(self.f1(c) for c in CLASS_NAMES)

    def to_csv(self) -> str:
        lines = ["class,precision,recall,f1"]
        for c in CLASS_NAMES:
            lines.append(f"{c},{self.precision(c)!r},{self.recall(c)!r},{self.f1(c)!r}")
        return "\n".join(lines) + "\n"


def score_predictions(predictions: list, scenes: list, threshold: float = 0.5) -> SizeScores:
    """Accumulate per-class peak matches; ``predictions[k]`` maps level to
    a probability map (array or Tensor) for ``scenes[k]``."""
    counts = {c: [0, 0, 0] for c in CLASS_NAMES}
    for pred, scene in zip(predictions, scenes):
        for lvl, p in pred.items():
            arr = p.data if isinstance(p, Tensor) else np.asarray(p)
            arr = arr.reshape(arr.shape[-2:])
            stride = 2**lvl
            peaks = find_peaks(arr, threshold)
            centers = [((b.cy + 0.5) / stride - 0.5, (b.cx + 0.5) / stride - 0.5)
                       for b in scene.blobs if b.level == lvl]
            cls = LEVEL_CLASS[lvl]
            counts[cls][0] += match_peaks(peaks, centers)
            counts[cls][1] += len(peaks)
            counts[cls][2] += len(centers)
    return SizeScores(counts)


def evaluate_by_size(weights: WeightStore, kind: str, cfg: FpnConfig, scenes: int, seed: int,
                     scene_spec: Optional[Mapping[str, int]] = None, image_size: int = 128) -> SizeScores:
    levels = cfg.backbone_levels
    batch = [generate_blob_scene(scene_seed(seed, k), scene_spec, image_size, levels=levels)
             for k in range(scenes)]
    preds = [forward_scene(s.image, weights, cfg, kind) for s in batch]
    return score_predictions(preds, batch)
