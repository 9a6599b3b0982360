import itertools
import random

import pytest

from oak.errors import IllegalTransitionError, WorkerRejectedError
from oak.lifecycle import (
    PLACED_STATES,
    Event,
    MockWorkload,
    NodeEngine,
    ServiceInstance,
    State,
    migration_threshold,
    transition,
)
from oak.model import CapacityVector, Placement

# legal edges written out from the lifecycle prose, independent of the TRANSITIONS table
LEGAL = {
    ("requested", "placed"): "scheduled",
    ("requested", "errored"): "failed",
    ("scheduled", "started"): "running",
    ("scheduled", "errored"): "failed",
    ("running", "stopped"): "terminated",
    ("running", "errored"): "failed",
}


def placed(iid="i1", worker="w1"):
    inst = ServiceInstance(iid, "svc", 1)
    inst.fire(Event.PLACED, Placement(worker, ("c1",)))
    return inst


def test_requested_placed_is_scheduled():
    assert transition(State.REQUESTED, Event.PLACED) is State.SCHEDULED


def test_terminated_started_is_illegal():
    with pytest.raises(IllegalTransitionError):
        transition(State.TERMINATED, Event.STARTED)


@pytest.mark.parametrize("state,event", list(itertools.product(State, Event)))
def test_transition_table_matches_oracle(state, event):
    expected = LEGAL.get((state.value, event.value))
    if expected is None:
        with pytest.raises(IllegalTransitionError):
            transition(state, event)
    else:
        assert transition(state, event).value == expected


def test_placement_present_exactly_in_placed_states():
    rnd = random.Random(7)
    for _ in range(500):
        inst = ServiceInstance("i", "s", 1)
        for _ in range(6):
            event = rnd.choice(list(Event))
            try:
                inst.fire(event, Placement("w", ("c",)) if event is Event.PLACED else None)
            except IllegalTransitionError:
                pass
            assert (inst.placement is not None) == (inst.state in PLACED_STATES)


@pytest.mark.parametrize("rigidness,expected", [(1.0, 1), (0.95, 1), (0.5, 5), (0.0, 10), (0.31, 7)])
def test_migration_threshold(rigidness, expected):
    assert migration_threshold(rigidness) == expected


def test_started_resets_violation_streak():
    inst = placed()
    inst.report(True)
    inst.report(True)
    inst.fire(Event.STARTED)
    assert inst.violation_streak == 0
    assert inst.report(True) == 1
    assert inst.report(False) == 0


def test_deploy_happy_path():
    engine = NodeEngine("w1", CapacityVector(4, 4096), "10.2.0.0/26")
    inst = placed()
    ip = engine.deploy(inst, MockWorkload(), CapacityVector(1, 100))
    assert ip == "10.2.0.1"
    assert inst.state is State.RUNNING
    assert engine.used == CapacityVector(1, 100)
    assert engine.runtime.probe("i1")


def test_oversubscribing_deploy_is_rejected():
    engine = NodeEngine("w1", CapacityVector(2, 1024), "10.2.0.0/26")
    engine.deploy(placed("a"), MockWorkload(), CapacityVector(1.5, 100))
    late = placed("b")
    with pytest.raises(WorkerRejectedError):
        engine.deploy(late, MockWorkload(), CapacityVector(1.0, 100))
    assert late.state is State.SCHEDULED
    assert engine.used == CapacityVector(1.5, 100)


def test_crash_fails_everything_and_empties_ledger():
    engine = NodeEngine("w1", CapacityVector(4, 4096), "10.2.0.0/26")
    insts = [placed(f"i{k}") for k in range(3)]
    for inst in insts:
        engine.deploy(inst, MockWorkload(), CapacityVector(1, 100))
    assert engine.crash() == ["i0", "i1", "i2"]
    assert all(inst.state is State.FAILED for inst in insts)
    assert engine.used == CapacityVector()
    with pytest.raises(WorkerRejectedError):
        engine.deploy(placed("late"), MockWorkload(), CapacityVector(1, 1))


def test_ledger_conservation_under_fuzz():
    rnd = random.Random(3)
    engine = NodeEngine("w1", CapacityVector(8, 8192), "10.2.0.0/26")
    live = []
    for step in range(2000):
        op = rnd.random()
        if op < 0.5 or not live:
            inst = placed(f"i{step}")
            try:
                engine.deploy(inst, MockWorkload(), CapacityVector(rnd.choice([0.5, 1, 2]), rnd.choice([64, 256])))
                live.append(inst.instance_id)
            except WorkerRejectedError:
                pass
        else:
            iid = live.pop(rnd.randrange(len(live)))
            (engine.stop if op < 0.8 else engine.fail)(iid)
        assert engine.ledger_consistent()
        assert engine.running_ids() == sorted(live)


def test_released_addresses_come_back_only_after_fresh_ones_run_out():
    engine = NodeEngine("w1", CapacityVector(64, 8192), "10.2.0.0/26")
    first = placed("first")
    engine.deploy(first, MockWorkload(), CapacityVector(0.1, 1))
    engine.stop("first")
    ips = []
    for k in range(62):
        inst = placed(f"n{k}")
        ips.append(engine.deploy(inst, MockWorkload(), CapacityVector(0.1, 1)))
    assert first.instance_ip not in ips
    assert engine.deploy(placed("last"), MockWorkload(), CapacityVector(0.1, 1)) == first.instance_ip
