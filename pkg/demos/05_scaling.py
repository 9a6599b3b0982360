"""
How scheduling time scales
==========================

Sweep cluster size for both schedulers and the cluster/worker split for a
fixed fleet of 45 workers.  Numbers are wall-clock medians of the decision
code, so they move a little from machine to machine.
"""

from pathlib import Path

from oak.sim.harness import sweep
from oak.sim.scenario import load_scenario

scenarios = Path(__file__).resolve().parent.parent / "scenarios"

ldp = load_scenario(scenarios / "scale_ldp.yaml")
print("workers   rom ms   ldp ms   ldp satisfied")
for n in (10, 50, 100, 250):
    rom_row, ldp_row = sweep(ldp.with_param("workers", n), "scheduler", ["rom", "ldp"])
    print(f"{n:>7}   {rom_row['cluster_calc_ms_median']:6.3f}   {ldp_row['cluster_calc_ms_median']:6.3f}   {ldp_row['satisfied_rate']:.2f}")

# too few clusters overload one scheduler; too many overload the root
print("\nsplit    total ms")
for row in sweep(load_scenario(scenarios / "split45.yaml"), "split", ["1x45", "3x15", "9x5", "15x3", "45x1"]):
    print(f"{row['split']:<7}  {row['total_schedule_ms_median']:.3f}")
