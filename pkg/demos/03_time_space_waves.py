"""
Stop-and-go waves on a time-space diagram
=========================================

Half an hour of four-lane traffic with a planted wave travelling upstream at
13 mph.  The Edie field gives the speed raster; pairs of locations give a
distribution of wave speeds by cross-correlation, and a Morlet scaleogram at
one location gives the dominant period.

Writes ``ts.png`` and ``scaleogram.png`` to the directory given on the
command line (default: current directory).
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from roadtraj.macrofield import FTPS_TO_MPH, edie_field, raster_timespace
from roadtraj.synth import PlantedWave, ScenarioSpec, generate_scenario
from roadtraj.waves import (cwt_morlet, dominant_period, extract_speed_series, scale_grid,
                            wave_speed_distribution)

out = Path(sys.argv[1] if len(sys.argv) > 1 else ".")
out.mkdir(parents=True, exist_ok=True)

c = 13.0 / FTPS_TO_MPH
spec = ScenarioSpec(x_end=8000, duration=1800, n_lanes=4, inflow=1.2, drain=False,
                    waves=(PlantedWave(40.0, c, ((0.0, 126.0), (900.0, 402.0))),), seed=21)
ds = generate_scenario(spec)
print(f"{len(ds)} vehicles over {spec.duration / 60:.0f} min")

rgba, _ = raster_timespace(ds, (50, 10), path=out / "ts.png")
print(f"time-space diagram {rgba.shape[1]} x {rgba.shape[0]} bins -> {out / 'ts.png'}")

fld = edie_field(ds, 100, 5, x_range=(0, 8000), t_range=(0, 1800))
res = wave_speed_distribution(fld, n_pairs=20, seed=7)
print(f"wave speed {res.mean:.2f} +- {res.std:.2f} mph over {len(res.speeds)} pairs "
      f"(planted 13.0)")

series = extract_speed_series(fld, 4050.0)
sg = cwt_morlet(series, scale_grid())
for window, planted in (((150, 850), 2.1), ((1000, 1750), 6.7)):
    print(f"dominant period in {window} s: {dominant_period(sg, window):.2f} min "
          f"(planted {planted})")

fig, (a0, a1) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
a0.plot(series.t, series.v * FTPS_TO_MPH, lw=0.8)
a0.set_ylabel("speed (mph)")
power = np.where(sg.valid, np.nan_to_num(sg.power), np.nan)
a1.pcolormesh(sg.times, sg.periods / 60, power, shading="nearest")
a1.set_yscale("log")
a1.set_ylabel("period (min)")
a1.set_xlabel("time (s)")
fig.tight_layout()
fig.savefig(out / "scaleogram.png", dpi=110)
print(f"scaleogram -> {out / 'scaleogram.png'}")
