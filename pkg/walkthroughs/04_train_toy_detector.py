"""Train the toy blob detector on MFPN and one branch, then score by size."""

# %%
import numpy as np

from mfpn.backbone import generate_blob_scene
from mfpn.pyramids import FpnConfig
from mfpn.training import TrainState, evaluate_by_size, init_model, train_epoch

cfg = FpnConfig(channels=16, backbone_channels=(8, 16, 16, 16))

# %% A scene: Gaussian bumps, with each blob's target on exactly one level
scene = generate_blob_scene(7)
for blob in scene.blobs:
    print(f"{blob.size_class:<6} r={blob.radius:5.2f} level {blob.level}")
print({lvl: float(t.data.max()) for lvl, t in scene.targets.items()})

# %% Short training runs (300 scenes each, roughly 10 s apiece)
results = {}
for kind in ("mfpn", "top_down"):
    state = TrainState(0, 0.05, init_model(cfg, kind, seed=0), seed=0)
    train_epoch(state, 300, kind, cfg)
    blocks = np.array(state.losses).reshape(-1, 50).mean(axis=1)
    print(kind, "block means:", np.round(blocks, 4))
    results[kind] = evaluate_by_size(state.weights, kind, cfg, scenes=40, seed=1000)

# %% Per-size F1 (exploratory: small runs, small eval set)
print("builder    small  medium  large")
for kind, scores in results.items():
    print(f"{kind:<9}" + "".join(f"{f:7.3f}" for f in scores.as_tuple()))
