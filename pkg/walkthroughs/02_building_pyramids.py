"""Build each pyramid from the same backbone maps and compare them."""

# %%
import numpy as np

from mfpn.analysis import random_features
from mfpn.pyramids import KINDS, FpnConfig, build, features_from_arrays, init_pyramid_weights

cfg = FpnConfig(channels=8, backbone_channels=(8, 8, 8, 8))
arrays = random_features(cfg, np.random.default_rng(1), base=32)
feats = features_from_arrays(arrays)

# %% Every builder returns the same level set and shapes
for kind in KINDS:
    weights = init_pyramid_weights(cfg, kind, seed=0)
    pyr = build(kind, feats, cfg, weights)
    shapes = {lvl: pyr.maps[lvl].shape[2:] for lvl in pyr.levels}
    print(f"{kind:<17} {len(weights):>3} tensors  {shapes}")

# %% MFPN is the per-level sum of its three branches over one set of laterals
weights = init_pyramid_weights(cfg, "mfpn", seed=0)
mixed = build("mfpn", feats, cfg, weights)
for lvl in mixed.levels:
    parts = [mixed.branches[k].maps[lvl].data for k in ("top_down", "bottom_up", "fusing_splitting")]
    print(lvl, np.abs(mixed.maps[lvl].data - sum(parts)).max())

# %% Fusing-splitting collapses everything into two maps first
mid = build("fusing_splitting", feats, cfg, init_pyramid_weights(cfg, "fusing_splitting", 0)).intermediates
print("alpha_s", mid.alpha_s.shape, "alpha_l", mid.alpha_l.shape)
print("beta_s", mid.beta_s.shape, "beta_l", mid.beta_l.shape)
