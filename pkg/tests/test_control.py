import asyncio
import json
import random

import pytest

from oak.control import (
    AsyncioRuntime,
    Broker,
    ControlMessage,
    Deduper,
    Endpoint,
    FrameBuffer,
    GoBackNSender,
    Kind,
    LivenessMonitor,
    SequenceCounter,
    SimRuntime,
    decode,
    encode,
)
from oak.errors import MalformedMessageError, PeerDownError, TopicClosedError


def test_codec_round_trip_every_kind():
    for i, kind in enumerate(Kind):
        msg = ControlMessage(kind, "a", i + 1, {"x": [1, 2.5, "s"], "n": None}, "b", reply_to=i or None)
        assert decode(encode(msg)) == msg


def test_frame_is_length_prefixed_json():
    frame = encode(ControlMessage(Kind.ALARM, "a", 1, {}, "b"))
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert json.loads(frame[4:])["kind"] == "Alarm"


def test_unknown_kind_is_malformed():
    payload = json.dumps({"kind": "Gossip", "sender": "a", "seq": 1}).encode()
    with pytest.raises(MalformedMessageError):
        decode(len(payload).to_bytes(4, "big") + payload)


def test_frame_buffer_handles_arbitrary_splits():
    msgs = [ControlMessage(Kind.TELEMETRY, "w", i, {"i": i}, "c") for i in range(1, 30)]
    stream = b"".join(encode(m) for m in msgs)
    rnd = random.Random(3)
    buf, out, pos = FrameBuffer(), [], 0
    while pos < len(stream):
        step = rnd.randint(1, 40)
        out += buf.feed(stream[pos : pos + step])
        pos += step
    assert out == msgs


def test_sequence_numbers_are_per_kind_and_destination():
    c = SequenceCounter()
    assert [c.next(Kind.TELEMETRY, "x"), c.next(Kind.TELEMETRY, "x"), c.next(Kind.TELEMETRY, "y"), c.next(Kind.ALARM, "x")] == [1, 2, 1, 1]


class Recorder(Endpoint):
    def __init__(self, name, runtime):
        super().__init__(name, runtime)
        self.got = []

    def on_any(self, msg):
        self.got.append(msg)


def test_broker_fans_out_to_every_subscriber():
    rt = SimRuntime()
    a, b = Recorder("a", rt), Recorder("b", rt)
    broker = Broker("broker", rt)
    broker.subscribe("t", "a")
    broker.subscribe("t", "b")
    assert broker.publish("t", ControlMessage(Kind.ALARM, "src", 1, {"v": 1})) == 2
    rt.run()
    assert [m.body for m in a.got] == [m.body for m in b.got] == [{"v": 1}]


def test_closed_topic_refuses_publish():
    broker = Broker("broker", SimRuntime())
    broker.close("t")
    with pytest.raises(TopicClosedError):
        broker.publish("t", ControlMessage(Kind.ALARM, "src", 1))


def test_stale_sequence_is_dropped_and_counted():
    rt = SimRuntime()
    r = Recorder("r", rt)
    for seq in (1, 3, 2, 3, 4):
        r.handle(ControlMessage(Kind.TELEMETRY, "w", seq, {}, "r"))
    assert [m.seq for m in r.got] == [1, 3, 4]
    assert r.dedup.dropped == 2


def test_contiguous_mode_needs_the_next_seq():
    d = Deduper("contiguous")
    seqs = [1, 3, 2, 2, 3]
    assert [d.accept(ControlMessage(Kind.TELEMETRY, "w", s)) for s in seqs] == [True, False, True, False, True]


class GbnSource(Endpoint):
    def __init__(self, name, runtime, dst):
        super().__init__(name, runtime)
        self.gbn = GoBackNSender(self, dst, Kind.TELEMETRY, rto_ms=20, window=32)

    def on_telemetry(self, msg):
        if msg.reply_to is not None:
            self.gbn.ack(msg.reply_to)


class GbnSink(Endpoint):
    def __init__(self, name, runtime):
        super().__init__(name, runtime)
        self.dedup = Deduper("contiguous")
        self.applied = []

    def _ack(self, sender):
        self.send(sender, Kind.TELEMETRY, {}, reply_to=self.dedup.last.get((sender, Kind.TELEMETRY), 0))

    def on_telemetry(self, msg):
        self.applied.append(msg.body["i"])
        self._ack(msg.sender)

    def on_duplicate(self, msg):
        self._ack(msg.sender)


def test_ten_thousand_messages_survive_one_percent_loss():
    rt = SimRuntime(seed=11, latency=2.0, loss=0.01, record=False)
    sink = GbnSink("sink", rt)
    src = GbnSource("src", rt, "sink")
    for i in range(10_000):
        src.gbn.submit({"i": i})
    rt.run(max_events=5_000_000)
    assert src.gbn.idle
    assert sink.applied == list(range(10_000))
    assert src.gbn.sent_total > 10_000


class Client(Endpoint):
    rpc_timeout_ms = 100

    def __init__(self, name, runtime):
        super().__init__(name, runtime)
        self.timeouts = []

    def on_peer_timeout(self, peer):
        self.timeouts.append(peer)


class Echo(Endpoint):
    def on_alarm(self, msg):
        self.reply(msg, Kind.ALARM, {"echo": msg.body["v"]})

    def on_schedulerequest(self, msg):
        self.reply(msg, Kind.SCHEDULE_RESPONSE, {"ok": msg.body["v"]})


def test_replies_reach_their_own_continuation():
    rt = SimRuntime(latency=lambda s, d: 3.0)
    client, _ = Client("c", rt), Echo("e", rt)
    got = []
    for v in range(5):
        client.request("e", Kind.ALARM, {"v": v}, lambda m, v=v: got.append((v, m.body["echo"])))
    client.request("e", Kind.SCHEDULE_REQUEST, {"v": 9}, lambda m: got.append(("s", m.body["ok"])))
    rt.run()
    assert sorted(got, key=str) == sorted([(v, v) for v in range(5)] + [("s", 9)], key=str)
    assert not client.pending


def test_silent_peer_times_out_with_peer_down():
    rt = SimRuntime()
    client = Client("c", rt)
    rt.register("ghost", lambda m: None)
    errors = []
    client.request("ghost", Kind.ALARM, {}, lambda m: errors.append("reply"), errors.append)
    rt.run()
    assert len(errors) == 1 and isinstance(errors[0], PeerDownError)
    assert rt.now() == pytest.approx(100)
    assert client.timeouts == ["ghost"]


def test_partition_drops_traffic_until_healed():
    rt = SimRuntime()
    r = Recorder("r", rt)
    s = Endpoint("s", rt)
    rt.partition("r")
    s.send("r", Kind.ALARM)
    rt.run()
    rt.heal("r")
    s.send("r", Kind.ALARM)
    rt.run()
    assert [m.seq for m in r.got] == [2]
    assert [e.delivered for e in rt.trace] == [False, True]


def test_liveness_marks_down_after_three_missed_intervals():
    down = []
    mon = LivenessMonitor(1000, down.append)
    mon.seen("c", 0)
    assert mon.check(3000) == []
    assert mon.check(3001) == ["c"] and down == ["c"]
    assert mon.seen("c", 4000) is True
    assert "c" not in mon.down


def _ping_pong(rt_a, rt_b):
    """Three request/reply rounds from a to b; returns the reply bodies."""
    a, b = Client("a", rt_a), Echo("b", rt_b)
    out = []

    def go(v):
        if v == 3:
            return
        a.request("b", Kind.ALARM, {"v": v}, lambda m: (out.append(m.body), go(v + 1)))

    go(0)
    return a, b, out


def test_socket_transport_round_trip_and_trace_matches_sim():
    async def live():
        rb = AsyncioRuntime()
        host, port = await rb.start()
        ra = AsyncioRuntime(peers={"b": (host, port)})
        await ra.start()
        _, _, out = _ping_pong(ra, rb)
        for _ in range(200):
            if len(out) == 3:
                break
            await asyncio.sleep(0.01)
        await ra.close()
        await rb.close()
        return out, ra.trace + rb.trace

    out, trace = asyncio.run(live())
    assert out == [{"echo": 0}, {"echo": 1}, {"echo": 2}]

    sim = SimRuntime()
    _, _, sim_out = _ping_pong(sim, sim)
    sim.run()
    assert sim_out == out

    def shape(entries):
        return sorted((e.src, e.dst, e.kind, e.seq, e.reply_to) for e in entries)

    assert shape(trace) == shape(sim.trace)
