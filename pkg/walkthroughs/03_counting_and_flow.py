"""Parameter budgets and which backbone levels reach which output level."""

# %%
from mfpn.analysis import PRESETS, count_params, flow_matrix, reconciliation_report
from mfpn.pyramids import FpnConfig

# %% The RetinaNet-style baseline
report = count_params(*PRESETS["retinanet-fpn"])
print(f"retinanet-fpn: {report.total:,d} parameters")
print(report.subtotals)

# %% Branch budgets at C=256 on a ResNet-50-sized backbone
cfg = FpnConfig()
for kind in ("top_down", "bottom_up", "fusing_splitting", "mfpn"):
    print(f"{kind:<17} {count_params(cfg, kind).total / 1e6:6.3f}M")

# %% How far the counted totals are from the published ones under two guesses
print(reconciliation_report())

# %% Flow: top-down only looks up, bottom-up mostly down, the fused pyramids everywhere
small = FpnConfig(channels=2, backbone_channels=(2, 2, 2, 2))
for kind in ("top_down", "bottom_up", "mfpn"):
    print(kind)
    print(flow_matrix(kind, small, seed=0).to_text())
