"""Acceptance criteria, one test each; every test prints a PASS or FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines show up even when
pytest captures output.
"""

import itertools
import random
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest

from oak.actors import ROOT
from oak.coords import RttSample, VivaldiCoordinate, dist_euc, trilaterate, vivaldi_update
from oak.errors import ExhaustedError, IllegalTransitionError, NoFeasibleWorkerError
from oak.lifecycle import ABSORBING, Event, ServiceInstance, State, transition
from oak.model import Placement
from oak.overlay import Binding, ConversionTable, Policy, ServiceRegistry, TunnelSet, resolve
from oak.scheduler import DelegationTrace, ScheduleRequest, SchedulingContext, delegate, ldp_select, rom_select
from oak.sim.harness import run, sweep
from oak.sim.scenario import load_scenario
from oak.system import OakSystem, parse_topology

from conftest import make_task
from oracles import euc_ms, ldp_oracle, random_ldp_instance, random_task, random_workers, rom_oracle
from test_scheduler import random_deep_tree

pytestmark = pytest.mark.acceptance

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
SERVICE = {
    "service_id": "svc",
    "constraints": [{"microservice_id": 1, "properties": [{"vcpus": 1, "memory": 100, "virtualization": "container"}]}],
}


@pytest.fixture
def verdict(capsys):
    def say(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")

    return say


# 1 ---------------------------------------------------------------------------------
def test_01_rom_matches_exhaustive_scan(verdict):
    rnd = random.Random(2024)
    t0 = time.perf_counter()
    agree = 0
    for _ in range(1000):
        ws = random_workers(rnd, rnd.randint(1, 20))
        task = random_task(rnd)
        same = True
        for strategy in ("best_slack", "first_fit"):
            expected = rom_oracle(ws, task, strategy)
            try:
                got = rom_select(ws, task, strategy)
            except NoFeasibleWorkerError:
                got = None
            same &= got == expected
        agree += same
    elapsed = time.perf_counter() - t0
    ok = agree == 1000 and elapsed < 10
    verdict(1, "ROM oracle equivalence", ok, f"{agree}/1000 instances agree in both strategies, {elapsed:.2f} s (< 10 s)")
    assert ok


# 2 ---------------------------------------------------------------------------------
def test_02_ldp_matches_exhaustive_filter(verdict):
    rnd = random.Random(4048)
    t0 = time.perf_counter()
    agree = 0
    for i in range(500):
        workers, task, placed, users, ping = random_ldp_instance(rnd)
        expected = ldp_oracle(workers, task, placed, users)
        try:
            got = ldp_select(workers, task, placed, SchedulingContext(ping=ping, rng=random.Random(i)))
        except NoFeasibleWorkerError:
            got = set()
        agree += got == expected
    elapsed = time.perf_counter() - t0
    ok = agree == 500 and elapsed < 60
    verdict(2, "LDP oracle equivalence", ok, f"{agree}/500 survivor sets equal the exhaustive filter, {elapsed:.2f} s (< 60 s)")
    assert ok


# 3 ---------------------------------------------------------------------------------
def test_03_trilateration_recovers_planted_users(verdict):
    rng = np.random.default_rng(3)
    anchors_per_user = 8
    recovered, errors = 0, []
    for _ in range(100):
        anchors = rng.uniform(0, 100, (anchors_per_user, 3))
        user = rng.uniform(0, 100, 3)
        rtt = np.linalg.norm(anchors - user, axis=1)
        exact = trilaterate([RttSample(VivaldiCoordinate(tuple(a)), float(r)) for a, r in zip(anchors, rtt)])
        recovered += float(np.linalg.norm(np.array(exact.position) - user)) <= 1e-3
        noisy = rtt * (1 + rng.uniform(-0.05, 0.05, anchors_per_user))
        est = np.array(trilaterate([RttSample(VivaldiCoordinate(tuple(a)), float(r)) for a, r in zip(anchors, noisy)]).position)
        probes = rng.uniform(0, 100, (20, 3))
        true = np.linalg.norm(probes - user, axis=1)
        errors.extend(np.abs(np.linalg.norm(probes - est, axis=1) - true) / true)
    p95 = float(np.percentile(errors, 95))
    ok = recovered >= 99 and p95 <= 0.10
    verdict(3, "Trilateration recovery", ok, f"{recovered}/100 exact within 1e-3 (>= 99); p95 latency error at +-5% noise {p95:.3f} (<= 0.10), {anchors_per_user} anchors")
    assert ok


# 4 ---------------------------------------------------------------------------------
def test_04_vivaldi_converges_on_planted_network(verdict):
    rng = np.random.default_rng(4)
    pos = rng.uniform(0, 150, (50, 3))
    rnd = random.Random(4)
    coords = [VivaldiCoordinate() for _ in range(50)]
    for _ in range(200):
        for i in range(50):
            j = rnd.randrange(49)
            j += j >= i
            rtt = float(np.linalg.norm(pos[i] - pos[j]))
            coords[i] = vivaldi_update(coords[i], RttSample(coords[j], rtt, peer_id=str(j)), self_id=str(i))
    errs = [
        abs(dist_euc(coords[i], coords[j]) - np.linalg.norm(pos[i] - pos[j])) / np.linalg.norm(pos[i] - pos[j])
        for i, j in itertools.combinations(range(50), 2)
    ]
    med = float(np.median(errs))
    ok = med <= 0.15
    verdict(4, "Vivaldi convergence", ok, f"median relative error {med:.4f} after 200 rounds on 50 nodes (<= 0.15)")
    assert ok


# 5 ---------------------------------------------------------------------------------
def test_05_cluster_worker_ratio_has_interior_minimum(verdict):
    splits = ["1x45", "3x15", "9x5", "15x3", "45x1"]
    rows = sweep(load_scenario(SCENARIOS / "split45.yaml"), "split", splits)
    totals = [r["total_schedule_ms_median"] for r in rows]
    interior = min(totals[1:-1])
    ok = interior < totals[0] and interior < totals[-1]
    best = splits[totals.index(min(totals))]
    shape = ", ".join(f"{s}={t * 1000:.0f}us" for s, t in zip(splits, totals))
    verdict(5, "Cluster-worker ratio trend", ok, f"median total schedule time {shape}; minimum at {best}")
    assert ok


# 6 ---------------------------------------------------------------------------------
def test_06_rom_and_ldp_scaling(verdict):
    base = load_scenario(SCENARIOS / "scale_ldp.yaml")
    sizes = [10, 50, 100, 250, 500]
    rom, ldp, sat = [], [], None
    for n in sizes:
        # both schedulers back to back on the same infrastructure, so machine load hits them alike
        r, l = sweep(base.with_param("workers", n), "scheduler", ["rom", "ldp"])
        rom.append(r["cluster_calc_ms_median"])
        ldp.append(l["cluster_calc_ms_median"])
        sat = l
    a = all(r < l for r, l in zip(rom, ldp))
    b = all(x <= y for x, y in zip(ldp, ldp[1:])) and ldp[-1] < 1000
    c = sat["satisfied_rate"] >= 0.95
    ok = a and b and c
    table = ", ".join(f"{n}: rom {r:.3f} / ldp {l:.3f}" for n, r, l in zip(sizes, rom, ldp))
    verdict(6, "Scheduler scaling", ok,
            f"(a) {'ok' if a else 'violated'} (b) {'ok' if b else 'violated'} (c) {sat['satisfied_rate']:.3f} of {sat['placed']} LDP placements at 500 workers meet 20 ms and 120 km; median calc ms {table}")
    assert ok


# 7 ---------------------------------------------------------------------------------
LEGAL = {
    ("requested", "placed"): "scheduled",
    ("requested", "errored"): "failed",
    ("scheduled", "started"): "running",
    ("scheduled", "errored"): "failed",
    ("running", "stopped"): "terminated",
    ("running", "errored"): "failed",
}


def test_07_lifecycle_safety(verdict):
    cells = list(itertools.product(State, Event))
    mismatches = 0
    for state, event in cells:
        expected = LEGAL.get((state.value, event.value))
        try:
            got = transition(state, event).value
        except IllegalTransitionError:
            got = None
        mismatches += got != expected
    rnd = random.Random(7)
    illegal_taken = absorbing_exits = 0
    inst = ServiceInstance("i", "s", 1)
    for k in range(10_000):
        if inst.state in ABSORBING and rnd.random() < 0.2:
            inst = ServiceInstance(f"i{k}", "s", 1)
        before = inst.state
        event = rnd.choice(list(Event))
        try:
            inst.fire(event, Placement("w", ("c",)))
        except IllegalTransitionError:
            if inst.state is not before:
                illegal_taken += 1
            continue
        if (before.value, event.value) not in LEGAL:
            illegal_taken += 1
        if before in ABSORBING:
            absorbing_exits += 1
    ok = mismatches == 0 and illegal_taken == 0 and absorbing_exits == 0
    verdict(7, "State-machine safety", ok, f"{len(cells) - mismatches}/{len(cells)} table cells match; fuzz of 10000 events: {illegal_taken} illegal transitions, {absorbing_exits} absorbing exits")
    assert ok


# 8 ---------------------------------------------------------------------------------
def _three_clusters(a_workers):
    spec = {"clusters": [
        {"id": "a", "workers": [{"id": w, "cpu": c, "memory": 4096} for w, c in a_workers]},
        {"id": "b", "workers": [{"id": "wb", "cpu": 4, "memory": 4096}]},
        {"id": "c", "workers": [{"id": "wc", "cpu": 4, "memory": 4096}]},
    ]}
    s = OakSystem(parse_topology(spec))
    s.start()
    return s


def _crash_and_watch(s, host):
    on_host = [i for i, r in s.root.instances.items() if r.worker_id == host and r.state == "running"]
    s.run(500)
    crash_at, mark = s.now, len(s.runtime.trace)
    s.crash_worker(host)
    s.run(3 * s.config.staleness_timeout_ms)
    cluster = s.clusters["a"]
    within = all(i in cluster.failed_at and cluster.failed_at[i] - crash_at <= s.config.staleness_timeout_ms for i in on_host)
    return on_host, within, s.runtime.trace[mark:]


def test_08_failures_reschedule_locally_then_escalate(verdict):
    # local case: a has room on a second worker
    s = _three_clusters([("wa1", 4), ("wa2", 4)])
    for k in range(3):
        s.deploy({**SERVICE, "service_id": f"svc{k}"})
    host = max({"wa1", "wa2"}, key=lambda w: sum(r.worker_id == w for r in s.root.instances.values()))
    lost, within_local, trace = _crash_and_watch(s, host)
    root_msgs = [e for e in trace if ROOT in (e.src, e.dst) and e.kind not in ("AggregatePush", "TableUpdate")]
    moved_local = all(s.root.instances[s.root.successor[i]].cluster == "a" for i in lost)
    local_ok = bool(lost) and within_local and moved_local and not root_msgs

    # escalation case: a's only worker dies
    s = _three_clusters([("wa", 4)])
    s.deploy(SERVICE)
    lost2, within_esc, trace = _crash_and_watch(s, "wa")
    alarms = [e for e in trace if e.src == "a" and e.dst == ROOT and e.kind == "Alarm"]
    moved_out = all(s.root.instances[s.root.successor[i]].cluster in ("b", "c") for i in lost2)
    esc_ok = bool(lost2) and within_esc and len(alarms) == len(lost2) and moved_out

    ok = local_ok and esc_ok
    verdict(8, "Failure handling", ok,
            f"local: {len(lost)} instances failed within timeout={within_local}, replaced in a={moved_local}, root control messages={len(root_msgs)}; "
            f"escalation: failed within timeout={within_esc}, {len(alarms)} alarm(s) to root, moved to another cluster={moved_out}")
    assert ok


# 9 ---------------------------------------------------------------------------------
def test_09_overlay_properties(verdict):
    # (a) LRU against a reference
    rnd = random.Random(9)
    k = 4
    ts, ref, lru_ok = TunnelSet("me", k=k), OrderedDict(), True
    for t in range(10_000):
        peer = f"p{rnd.randrange(12)}"
        victim = ref.popitem(last=False)[0] if peer not in ref and len(ref) >= k else None
        ref[peer] = None
        ref.move_to_end(peer)
        before = len(ts.evictions)
        ts.open_link(peer, t)
        lru_ok &= len(ts.active) <= k and ts.evictions[before:] == ([victim] if victim else []) and ts.active == set(ref)

    # (b) round robin fairness
    reg = ServiceRegistry(name="root")
    addrs = reg.register_service("rr")
    reg.set_bindings("rr", [Binding(f"10.2.0.{i + 1}", f"w{i}", VivaldiCoordinate(), f"i{i}") for i in range(3)])
    table = ConversionTable("client")
    counts = {}
    for _ in range(300):
        ip, _ = resolve(table, addrs[Policy.ROUND_ROBIN], reg)
        counts[ip] = counts.get(ip, 0) + 1
    rr_ok = sorted(counts.values()) == [100, 100, 100]

    # (c) closest equals the embedded-distance argmin
    closest_ok = 0
    for n in range(1000):
        reg = ServiceRegistry(name="root")
        addrs = reg.register_service(f"s{n}")
        bindings = [
            Binding(f"10.2.{n % 200}.{i + 1}", f"w{i}", VivaldiCoordinate(tuple(rnd.uniform(0, 100) for _ in range(3)), rnd.uniform(0, 2)), f"i{i}")
            for i in range(rnd.randint(1, 12))
        ]
        reg.set_bindings(f"s{n}", bindings)
        me = VivaldiCoordinate(tuple(rnd.uniform(0, 100) for _ in range(3)))
        ip, _ = resolve(ConversionTable("me"), addrs[Policy.CLOSEST], reg, me)
        best = min(euc_ms(b.vivaldi, me) for b in bindings)
        closest_ok += euc_ms(next(b for b in bindings if b.instance_ip == ip).vivaldi, me) == best

    # (d) make-before-break across 50 migrations
    s = OakSystem(parse_topology({"clusters": [{"id": "c1", "workers": [{"id": w, "cpu": 4, "memory": 4096} for w in ("w1", "w2", "w3")]}]}))
    s.start()
    s.deploy(SERVICE)
    rr = s.root.registry.resolve_name("svc.round_robin")
    client, outcomes = s.workers["w3"], []

    def probe():
        def check(ip, node):
            outcomes.append(node is not None and any(
                inst.instance_ip == ip and inst.state is State.RUNNING for inst, _ in s.workers[node].engine.instances.values()))
        client.resolve(rr, check)
        s.runtime.call_later(5, probe)

    probe()
    iid = s.instances_of("svc")[0]
    for _ in range(50):
        iid = s.migrate(iid)
    failed_resolutions = outcomes.count(False)
    mbb_ok = failed_resolutions == 0 and len(outcomes) > 0

    ok = lru_ok and rr_ok and closest_ok == 1000 and mbb_ok
    verdict(9, "Overlay properties", ok,
            f"(a) LRU fuzz {'ok' if lru_ok else 'diverged'}; (b) RR counts {sorted(counts.values())}; (c) closest argmin {closest_ok}/1000; "
            f"(d) {failed_resolutions} failed of {len(outcomes)} resolutions over 50 migrations")
    assert ok


# 10 --------------------------------------------------------------------------------
def _random_system(rnd):
    clusters, n = [], itertools.count()

    def grow(parent, depth):
        for _ in range(rnd.randint(1, 2)):
            cid = f"k{next(n)}"
            workers = [{"id": f"{cid}w{i}", "cpu": rnd.choice([1, 2, 4]), "memory": 4096} for i in range(rnd.randint(0, 2))]
            clusters.append({"id": cid, "parent": parent, "workers": workers})
            if depth < 4 and rnd.random() < 0.6:
                grow(cid, depth + 1)
            elif not workers:
                clusters[-1]["workers"] = [{"id": f"{cid}w0", "cpu": rnd.choice([1, 4]), "memory": 4096}]

    grow(ROOT, 1)
    return parse_topology({"clusters": clusters})


def test_10_delegation_message_bound(verdict):
    rnd = random.Random(10)
    model_checked = model_bad = 0
    for _ in range(300):
        tree = random_deep_tree(rnd)
        task = make_task(cpu=rnd.choice([0.5, 1, 2, 3]), mem=rnd.choice([0, 100]), virt=rnd.choice(["container", "mock"]))
        trace = DelegationTrace()
        try:
            delegate(ScheduleRequest(task, "s"), tree, trace=trace)
        except ExhaustedError:
            continue
        model_checked += 1
        model_bad += len(trace.messages) > tree.depth() + len(trace.tried) - 1

    live_checked = live_bad = 0
    for k in range(30):
        specs = _random_system(rnd)
        depth = {}
        for sp in specs:
            depth[sp.id] = 1 if sp.parent == ROOT else depth[sp.parent] + 1
        s = OakSystem(specs, seed=k)
        s.start()
        for j in range(3):
            mark = len(s.runtime.trace)
            rec = s.deploy({**SERVICE, "service_id": f"s{j}"})
            if rec.failed:
                continue
            forwards = [e for e in s.runtime.trace[mark:] if e.kind == "ScheduleRequest"]
            tried = {e.dst for e in forwards}
            live_checked += 1
            live_bad += len(forwards) > max(depth.values()) + len(tried) - 1
    ok = model_bad == 0 and live_bad == 0 and model_checked > 0 and live_checked > 0
    verdict(10, "Delegation complexity", ok,
            f"{model_checked - model_bad}/{model_checked} model trees and {live_checked - live_bad}/{live_checked} simulated deployments within t + tried - 1 forwards")
    assert ok


# 11 --------------------------------------------------------------------------------
def test_11_same_seed_same_csv_bytes(verdict, tmp_path):
    scenario = load_scenario(SCENARIOS / "faults.yaml")
    run(scenario, tmp_path / "a")
    run(scenario, tmp_path / "b")
    families = ["placements", "messages", "resources", "events"]
    same = [f for f in families if (tmp_path / "a" / f"{f}.csv").read_bytes() == (tmp_path / "b" / f"{f}.csv").read_bytes()]
    ok = same == families
    verdict(11, "Determinism", ok, f"{len(same)}/{len(families)} seeded CSV families byte-identical across two runs (timings.csv is wall clock)")
    assert ok
