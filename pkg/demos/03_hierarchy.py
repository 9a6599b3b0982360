"""
A small hierarchy on virtual time
=================================

Boot the example topology, deploy a two-stage pipeline, crash the worker
that hosts a stage and watch the cluster repair it without the root.
"""

import json
from pathlib import Path

import yaml

from oak.system import OakSystem, load_topology, render_tree

here = Path(__file__).resolve().parent.parent
specs = load_topology(here / "configs" / "topology.yaml")
print(render_tree(specs))

system = OakSystem(specs)
system.start()
print(f"\nroot heard from every cluster at t={system.now:.0f} ms")

sla = yaml.safe_load((here / "configs" / "detector.yaml").read_text())
record = system.deploy(sla)
print(json.dumps(system.root.service_status(record), indent=2))

# crash whichever worker holds stage 1 and give the watchdog time to notice
victim = record.placed[1].worker_id
mark = len(system.runtime.trace)
system.crash_worker(victim)
system.run(3 * system.config.staleness_timeout_ms)

print(f"\nafter crashing {victim}:")
for iid, inst in sorted(system.root.instances.items()):
    print(f"  {iid:<24} {inst.state:<10} {inst.cluster}/{inst.worker_id}")
to_root = [e for e in system.runtime.trace[mark:] if "root" in (e.src, e.dst) and e.kind not in ("AggregatePush", "TableUpdate")]
print(f"control messages involving the root during repair: {len(to_root)}")
