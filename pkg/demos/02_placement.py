"""
Placing one task: resource-only versus latency-aware
====================================================

The same 100 workers and the same request go through both cluster
schedulers.  ROM only looks at free capacity; LDP also keeps the user
within 20 ms and 120 km.
"""

import random

from oak.coords import GeoPoint
from oak.model import CapacityVector, S2UConstraint, TaskRequirements, WorkerSnapshot
from oak.scheduler import SchedulingContext, ldp_select, rom_select
from oak.sim.latency import PlantedLatency

rnd = random.Random(3)
ids = [f"w{i:03d}" for i in range(100)]
model = PlantedLatency(ids, ["bob"], seed=3)
coords = model.embed(600, seed=3)

workers = [
    WorkerSnapshot(
        worker_id=w,
        capacity=CapacityVector(rnd.choice([2, 4, 8]), rnd.choice([2048, 4096])),
        used=CapacityVector(0, 0),
        geo=model.geo[w],
        vivaldi=coords[w],
        virtualizations=frozenset({"container"}),
    )
    for w in ids
]

near_bob = S2UConstraint("bob", model.geo["bob"], 120.0, 20.0, probe_count=8)
task = TaskRequirements(microservice_id=1, capacity=CapacityVector(1, 100), virtualization="container", s2u_constraints=[near_bob])

rom = rom_select(workers, task)
print(f"ROM picks {rom}: {model.rtt(rom, 'bob'):.1f} ms from bob")

# LDP returns the survivors; the cluster then keeps the one with the most slack
ctx = SchedulingContext(ping=model.ping, rng=random.Random(3))
survivors = ldp_select(workers, task, {}, ctx)
pick = rom_select([w for w in workers if w.worker_id in survivors], task)
print(f"LDP keeps {len(survivors)} of {len(workers)} workers and picks {pick}: {model.rtt(pick, 'bob'):.1f} ms from bob")
for w in sorted(survivors):
    print(f"  {w}  {model.rtt(w, 'bob'):5.1f} ms")
