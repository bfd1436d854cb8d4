"""Synthetic backbone and Gaussian-blob detection scenes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .pyramids import BackboneFeatures, FpnConfig, init_weights
from .tensor import Tensor
from .weights import WeightStore, save_tensors

# radius ranges in pixels; "large" is closed at the top
SIZE_CLASSES = {"small": (4.0, 8.0), "medium": (8.0, 16.0), "large": (16.0, 32.0)}
CLASS_NAMES = tuple(SIZE_CLASSES)
DEFAULT_SCENE_SPEC = {"small": 2, "medium": 1, "large": 1}
MAX_ATTEMPTS = 1000
RESTART_AFTER = 50


class SceneError(ValueError):
    pass


def size_class(radius: float) -> str:
    if 4 <= radius < 8:
        return "small"
    if 8 <= radius < 16:
        return "medium"
    if 16 <= radius <= 32:
        return "large"
    raise ValueError(f"radius {radius} outside [4, 32]")


def assigned_level(radius: float) -> int:
    cls = size_class(radius)
    if cls == "small":
        return 2
    if cls == "medium":
        return 3 if radius < 12 else 4
    return 5


@dataclass
class Blob:
    cx: float
    cy: float
    radius: float
    size_class: str

    @property
    def level(self) -> int:
        return assigned_level(self.radius)


@dataclass
class BlobScene:
    seed: int
    image: Tensor
    blobs: list
    targets: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.image.shape[-1]

    def record(self) -> str:
        """One-line JSON description (seed and blob list)."""
        blobs = [dict(asdict(b), level=b.level) for b in self.blobs]
        return json.dumps({"seed": self.seed, "size": self.size, "blobs": blobs}, sort_keys=True)


def cell_centers(size: int, stride: int) -> np.ndarray:
    """Pixel coordinate of each cell center along one axis."""
    return (np.arange(size // stride) + 0.5) * stride - 0.5


def _gaussian(xs: np.ndarray, ys: np.ndarray, blob: Blob) -> np.ndarray:
    sigma = blob.radius / 2.0
    dx = (xs[None, :] - blob.cx) ** 2
    dy = (ys[:, None] - blob.cy) ** 2
    return np.exp(-(dx + dy) / (2.0 * sigma**2))


def _place_blobs(rng: np.random.Generator, spec: Mapping[str, int], size: int) -> list:
    # largest first: they are the hardest to fit
    wanted = [cls for cls in reversed(CLASS_NAMES) for _ in range(int(spec.get(cls, 0)))]
    unknown = set(spec) - set(SIZE_CLASSES)
    if unknown:
        raise SceneError(f"unknown size classes {sorted(unknown)}")
    if not wanted:
        raise SceneError("scene needs at least one blob")
    attempts = 0
    while True:
        blobs: list = []
        for cls in wanted:
            lo, hi = SIZE_CLASSES[cls]
            for _ in range(RESTART_AFTER):
                attempts += 1
                if attempts > MAX_ATTEMPTS:
                    raise SceneError(
                        f"could not place {dict(spec)} on a {size}px canvas in {MAX_ATTEMPTS} attempts"
                    )
                r = float(rng.uniform(lo, hi))
                if 2 * r > size:
                    continue
                cx, cy = (float(v) for v in rng.uniform(r, size - r, size=2))
                if all(np.hypot(cx - b.cx, cy - b.cy) >= 2 * (r + b.radius) for b in blobs):
                    blobs.append(Blob(cx, cy, r, cls))
                    break
            else:
                break  # dead end: start the scene over
        if len(blobs) == len(wanted):
            return blobs


def generate_blob_scene(
    seed: int,
    spec: Optional[Mapping[str, int]] = None,
    size: int = 128,
    channels: int = 1,
    noise: float = 0.0,
    levels=(2, 3, 4, 5),
) -> BlobScene:
    """Deterministic scene: Gaussian bumps (sigma = radius/2) on zero
    background, with per-level target heat maps peaking at 1 on each blob's
    assigned level."""
    spec = DEFAULT_SCENE_SPEC if spec is None else spec
    rng = np.random.default_rng(seed)
    blobs = _place_blobs(rng, spec, size)

    pix = np.arange(size, dtype=float)
    img = np.zeros((size, size))
    for b in blobs:
        img += _gaussian(pix, pix, b)
    image = np.broadcast_to(img, (1, channels, size, size)).copy()
    if noise > 0:
        image += noise * rng.standard_normal(image.shape)

    targets = {}
    for lvl in levels:
        stride = 2**lvl
        centers = cell_centers(size, stride)
        tmap = np.zeros((len(centers), len(centers)))
        for b in blobs:
            if b.level != lvl:
                continue
            g = _gaussian(centers, centers, b)
            tmap = np.maximum(tmap, g / g.max())
        targets[lvl] = Tensor(tmap[None, None])
    return BlobScene(seed, Tensor(image), blobs, targets)


def dump_scene(scene: BlobScene, directory, stem: Optional[str] = None) -> tuple:
    """Write ``<stem>.json`` (record) and ``<stem>.mfpw`` (image + targets)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"scene_{scene.seed}"
    rec = directory / f"{stem}.json"
    rec.write_text(scene.record() + "\n")
    arrays = {"image": scene.image.data}
    arrays.update({f"target.{lvl}": t.data for lvl, t in scene.targets.items()})
    blob = directory / f"{stem}.mfpw"
    save_tensors(blob, arrays)
    return rec, blob


# ---------------------------------------------------------------------------
# synthetic backbone
# ---------------------------------------------------------------------------


def backbone_shapes(cfg: FpnConfig, image_channels: int = 1, stem_channels: int = 8) -> dict:
    """Stem convs (each followed by a 2x2 pool) down to the first level, then
    one conv per level with a pool in front of every level but the first."""
    shapes = {}
    cin = image_channels
    for k in range(cfg.backbone_levels[0]):
        shapes[f"backbone.stem.{k}.weight"] = (stem_channels, cin, 3, 3)
        shapes[f"backbone.stem.{k}.bias"] = (1, stem_channels, 1, 1)
        cin = stem_channels
    for lvl, cout in zip(cfg.backbone_levels, cfg.backbone_channels):
        shapes[f"backbone.{lvl}.weight"] = (cout, cin, 3, 3)
        shapes[f"backbone.{lvl}.bias"] = (1, cout, 1, 1)
        cin = cout
    return shapes


def init_backbone_weights(cfg: FpnConfig, seed: int = 0, image_channels: int = 1,
                          stem_channels: int = 8, store: Optional[WeightStore] = None) -> WeightStore:
    shapes = backbone_shapes(cfg, image_channels, stem_channels)
    return init_weights(shapes, np.random.default_rng(seed), store)


def synth_backbone_forward(image: Tensor, weights: WeightStore, cfg: FpnConfig) -> BackboneFeatures:
    levels = cfg.backbone_levels
    factor = 2 ** levels[-1]
    h, w = image.shape[2:]
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by {factor}")
    x = image
    for k in range(levels[0]):
        x = T.relu(T.conv2d(x, weights[f"backbone.stem.{k}.weight"], weights[f"backbone.stem.{k}.bias"]))
        x = T.maxpool_2x2(x)
    raw = {}
    for i, lvl in enumerate(levels):
        if i:
            x = T.maxpool_2x2(x)
        x = T.relu(T.conv2d(x, weights[f"backbone.{lvl}.weight"], weights[f"backbone.{lvl}.bias"]))
        raw[lvl] = x
    feats = BackboneFeatures(raw=raw)
    feats.check()
    return feats
