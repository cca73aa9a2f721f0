"""Short Monte Carlo sweep over coupling-point density for one hazard preset.

The stopping rule is shortened so the sweep runs in a few minutes; use the
``mesres simulate`` command for full-length runs.
"""
import sys

import pandas as pd

from mesres.events import EventParams
from mesres.montecarlo import StoppingConfig, bootstrap_ci, run_monte_carlo
from mesres.synth import SynthConfig, generate_mes, rural_mv_grid

preset = sys.argv[1] if len(sys.argv) > 1 else "medium-overall"
stopping = StoppingConfig(calibration_events=50, window=25, min_events=200, max_events=400)
base = rural_mv_grid()

rows = []
for density in (0.0, 1.0, 2.0):
    net = generate_mes(base, SynthConfig(seed=0).with_density(density))
    rep = run_monte_carlo(net, EventParams.preset(preset), seed=0, stopping=stopping)
    lo, hi = bootstrap_ci(rep.per_event_totals())
    rows.append({"density": density, "events": rep.n_events, **{f"R_{k}": v for k, v in rep.resilience.items()},
                 "R_total": sum(rep.resilience.values()), "ci_low": lo, "ci_high": hi})
    print(f"density {density}: {rep.n_events} events", flush=True)

print(pd.DataFrame(rows).round(4).to_string(index=False))
