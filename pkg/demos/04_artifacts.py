"""
Finding missing data in a field
===============================

Each kind of detection gap leaves its own shape on the time-space diagram:
a missing pole or an overpass is a horizontal band across the whole time
range, a dropped packet block is a bounded hole.  The detector reads them
back off an Edie field of the raw fragments.
"""

from roadtraj.macrofield import edie_field
from roadtraj.quality import detect_missing_bands
from roadtraj.synth import CorruptionSpec, ScenarioSpec, corrupt, generate_scenario

ds = generate_scenario(ScenarioSpec(x_end=5000, duration=300, n_lanes=3, inflow=0.8, seed=3))
planted = ({"type": "missing_pole", "x": [1210, 1710]},
           {"type": "overpass", "x": [2845, 2905]},
           {"type": "packet_drop", "x": [3733, 4233], "t": [97, 171]})
fs = corrupt(ds, CorruptionSpec(planted + ({"type": "noise"},), seed=3))

# fine bins in x so the 60 ft overpass is resolved; 20 s bins so natural
# headways never empty a whole bin
fld = edie_field(fs.to_dataset(), 20, 20, x_range=(0, 5000), t_range=(0, 300))
print("planted:")
for p in planted:
    print(f"  {p['type']:<13} x {p['x']}" + (f"  t {p['t']}" if "t" in p else ""))
print("detected:")
for a in detect_missing_bands(fld)["artifacts"]:
    print(f"  {a.kind:<13} x {list(a.x_range)}  t {list(a.t_range)}  ({a.n_bins} bins)")

clean = corrupt(ds, CorruptionSpec(({"type": "noise"},), seed=3)).to_dataset()
n = len(detect_missing_bands(edie_field(clean, 20, 20, x_range=(0, 5000),
                                        t_range=(0, 300)))["artifacts"])
print(f"detections on the clean field: {n}")
