"""Parameter and FLOP totals for every preset, plus the heaviest layers of one.

Run: python3 demos/cost_inspection.py
"""

from moa import PRESET_NAMES, preset
from moa.cost import cost_report

for name in PRESET_NAMES:
    r = cost_report(preset(name))
    print(f"{name:<12} {r.total_params / 1e6:7.2f}M params  {r.total_macs / 1e9:7.3f}G multiply-adds")

r = cost_report(preset("moa-t-in"))
print("\nheaviest rows of moa-t-in:")
for row in sorted(r.rows, key=lambda x: -x.macs)[:8]:
    print(f"  {row.name:<40} {row.macs / 1e6:9.1f}M MACs")

moa_macs = sum(x.macs for x in r.rows if ".moa." in x.name)
print(f"\nglobal blocks cost {moa_macs / r.total_macs:.1%} of all multiply-adds")
