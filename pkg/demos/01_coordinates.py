"""
Latency coordinates from pings
==============================

Plant 40 workers in a 3D latency space, let Vivaldi learn coordinates from
pairwise pings, then locate a user from a handful of RTTs by trilateration.
"""

import numpy as np

from oak.coords import RttSample, dist_euc, trilaterate
from oak.sim.latency import PlantedLatency

workers = [f"w{i:02d}" for i in range(40)]
# pings carry 5% multiplicative jitter
model = PlantedLatency(workers, ["alice"], seed=1, jitter=0.05)

# embedding quality improves with rounds; the error is relative on random pairs
for rounds in (20, 100, 600):
    coords = model.embed(rounds, seed=1)
    print(f"{rounds:>4} rounds  median prediction error {model.prediction_error(coords, seed=1):.3f}")

# locate alice from eight anchors, as an S2U check would
anchors = workers[:8]
samples = [RttSample(coords[w], model.ping(w, "alice"), peer_id=w) for w in anchors]
alice = trilaterate(samples)

# compare predicted and true RTT to workers that were not probed
print("\nworker   true ms   predicted ms")
for w in workers[30:36]:
    print(f"{w}    {model.rtt(w, 'alice'):7.2f}   {dist_euc(coords[w], alice):7.2f}")

errs = [abs(dist_euc(coords[w], alice) - model.rtt(w, "alice")) / model.rtt(w, "alice") for w in workers[8:]]
print(f"\nmedian relative error to unprobed workers: {np.median(errs):.3f}")
