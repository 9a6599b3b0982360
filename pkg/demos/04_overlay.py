"""
Service addresses and live migration
====================================

Every service gets one address per balancing policy.  A client keeps
resolving the round-robin address while the instance moves around; the
old copy is drained only after the new one is reachable.
"""

from collections import Counter

from oak.lifecycle import State
from oak.system import OakSystem, parse_topology

topo = {"clusters": [{"id": "edge", "workers": [{"id": w, "cpu": 4, "memory": 4096} for w in ("a", "b", "c")]}]}
system = OakSystem(parse_topology(topo))
system.start()

svc = {"service_id": "cam", "constraints": [{"microservice_id": 1, "properties": [{"vcpus": 1, "memory": 128, "virtualization": "container"}]}]}
print(system.root.service_status(system.deploy(svc))["service_ips"])

rr = system.root.registry.resolve_name("cam.round_robin")
client = system.workers["c"]
answers = []


def probe():
    def seen(ip, node):
        alive = node is not None and any(
            i.instance_ip == ip and i.state is State.RUNNING for i, _ in system.workers[node].engine.instances.values()
        )
        answers.append((node, alive))

    client.resolve(rr, seen)
    system.runtime.call_later(5, probe)


probe()
iid = system.instances_of("cam")[0]
for _ in range(10):
    iid = system.migrate(iid)

print(f"{len(answers)} resolutions during 10 migrations, {sum(not ok for _, ok in answers)} pointed at a dead instance")
print("answers per worker:", dict(Counter(node for node, _ in answers)))
