"""Control-plane messages and the runtimes that carry them.

Every actor talks through a :class:`Runtime`: ``now()``, ``call_later()``,
``send()`` and ``register()``.  :class:`SimRuntime` is a single-threaded
virtual-time event loop; :class:`AsyncioRuntime` moves the same messages over
TCP as 4-byte length-prefixed JSON frames.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import json
import logging
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Protocol

from oak.errors import MalformedMessageError, PeerDownError, PeerUnreachableError, TopicClosedError

log = logging.getLogger(__name__)

FRAME_HEADER = struct.Struct("!I")
MAX_FRAME = 16 * 1024 * 1024


class Kind(str, Enum):
    REGISTER_WORKER = "RegisterWorker"
    TELEMETRY = "Telemetry"
    AGGREGATE_PUSH = "AggregatePush"
    SCHEDULE_REQUEST = "ScheduleRequest"
    SCHEDULE_RESPONSE = "ScheduleResponse"
    DEPLOY = "Deploy"
    INSTANCE_STATUS = "InstanceStatus"
    RESOLVE_QUERY = "ResolveQuery"
    RESOLVE_REPLY = "ResolveReply"
    TABLE_UPDATE = "TableUpdate"
    ALARM = "Alarm"


# kind a request is answered with; unlisted kinds answer in kind
REPLY_KIND = {
    Kind.SCHEDULE_REQUEST: Kind.SCHEDULE_RESPONSE,
    Kind.DEPLOY: Kind.INSTANCE_STATUS,
    Kind.RESOLVE_QUERY: Kind.RESOLVE_REPLY,
}


@dataclass(frozen=True)
class ControlMessage:
    kind: Kind
    sender: str
    seq: int
    body: dict = field(default_factory=dict, hash=False)
    dst: str = ""
    reply_to: int | None = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "sender": self.sender, "seq": self.seq, "dst": self.dst, "body": self.body}
        if self.reply_to is not None:
            out["reply_to"] = self.reply_to
        return out

    @classmethod
    def from_dict(cls, data: Any) -> ControlMessage:
        if not isinstance(data, dict):
            raise MalformedMessageError("control message must be a mapping")
        try:
            kind = Kind(data["kind"])
        except (KeyError, ValueError):
            raise MalformedMessageError(f"unknown message kind {data.get('kind')!r}") from None
        try:
            seq = int(data["seq"])
            sender = str(data["sender"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedMessageError(f"bad header: {exc}") from None
        body = data.get("body", {})
        if not isinstance(body, dict):
            raise MalformedMessageError("body must be a mapping")
        reply_to = data.get("reply_to")
        return cls(kind, sender, seq, body, str(data.get("dst", "")), None if reply_to is None else int(reply_to))


def encode(msg: ControlMessage) -> bytes:
    payload = json.dumps(msg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return FRAME_HEADER.pack(len(payload)) + payload


def decode(frame: bytes) -> ControlMessage:
    """Decode one complete frame (header included)."""
    if len(frame) < FRAME_HEADER.size:
        raise MalformedMessageError("truncated frame header")
    (size,) = FRAME_HEADER.unpack_from(frame)
    if len(frame) != FRAME_HEADER.size + size:
        raise MalformedMessageError(f"frame says {size} bytes, got {len(frame) - FRAME_HEADER.size}")
    return decode_payload(frame[FRAME_HEADER.size :])


def decode_payload(payload: bytes) -> ControlMessage:
    try:
        data = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessageError(f"undecodable payload: {exc}") from None
    return ControlMessage.from_dict(data)


class FrameBuffer:
    """Reassembles frames from an arbitrary byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[ControlMessage]:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= FRAME_HEADER.size:
            (size,) = FRAME_HEADER.unpack_from(self._buf)
            if size > MAX_FRAME:
                raise MalformedMessageError(f"frame of {size} bytes exceeds the limit")
            end = FRAME_HEADER.size + size
            if len(self._buf) < end:
                break
            out.append(decode_payload(bytes(self._buf[FRAME_HEADER.size : end])))
            del self._buf[:end]
        return out


# sequencing -----------------------------------------------------------------


class SequenceCounter:
    """Per-(kind, destination) sequence numbers of one sender, starting at 1."""

    def __init__(self):
        self._next: dict[tuple[Kind, str], int] = {}

    def next(self, kind: Kind, dst: str) -> int:
        key = (kind, dst)
        self._next[key] = self._next.get(key, 0) + 1
        return self._next[key]


class Deduper:
    """Receiver-side filter over (sender, kind) streams.

    ``monotone`` drops anything at or below the last accepted seq.
    ``contiguous`` accepts only the next expected seq (go-back-N receivers).
    """

    def __init__(self, mode: str = "monotone"):
        if mode not in ("monotone", "contiguous"):
            raise ValueError(f"unknown dedup mode {mode!r}")
        self.mode = mode
        self.last: dict[tuple[str, Kind], int] = {}
        self.dropped = 0

    def accept(self, msg: ControlMessage) -> bool:
        key = (msg.sender, msg.kind)
        last = self.last.get(key, 0)
        ok = msg.seq == last + 1 if self.mode == "contiguous" else msg.seq > last
        if ok:
            self.last[key] = msg.seq
        else:
            self.dropped += 1
        return ok

    def forget(self, sender: str) -> None:
        for key in [k for k in self.last if k[0] == sender]:
            del self.last[key]


# runtimes -------------------------------------------------------------------

Handler = Callable[[ControlMessage], None]


class Timer(Protocol):
    def cancel(self) -> None: ...


class Runtime(Protocol):
    def now(self) -> float: ...

    def call_later(self, delay_ms: float, fn: Callable, *args) -> Timer: ...

    def send(self, src: str, dst: str, msg: ControlMessage) -> None: ...

    def register(self, name: str, handler: Handler) -> None: ...


@dataclass(frozen=True)
class TraceEntry:
    time: float
    src: str
    dst: str
    kind: str
    seq: int
    reply_to: int | None
    delivered: bool


class _SimTimer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimRuntime:
    """Deterministic virtual-time loop.

    Messages are encoded and decoded on the way through, so anything that
    crosses the simulated network would also cross a socket.  ``latency`` is
    a constant in ms or a function ``(src, dst) -> ms``; ``loss`` drops a
    message with the given probability using the runtime's own seeded RNG.
    """

    def __init__(
        self,
        *,
        seed: int = 0,
        latency: float | Callable[[str, str], float] = 1.0,
        loss: float = 0.0,
        record: bool = True,
    ):
        self._time = 0.0
        self._queue: list = []
        self._counter = itertools.count()
        self.handlers: dict[str, Handler] = {}
        self.latency = latency if callable(latency) else (lambda s, d, v=float(latency): v)
        self.loss = loss
        self.rng = random.Random(seed)
        self.trace: list[TraceEntry] = []
        self.record = record
        self.blocked: set[str] = set()
        self.cut_links: set[frozenset] = set()
        self.delivered = 0

    def now(self) -> float:
        return self._time

    def call_later(self, delay_ms: float, fn: Callable, *args) -> _SimTimer:
        timer = _SimTimer()
        heapq.heappush(self._queue, (self._time + max(0.0, delay_ms), next(self._counter), timer, fn, args))
        return timer

    def register(self, name: str, handler: Handler) -> None:
        self.handlers[name] = handler

    def unregister(self, name: str) -> None:
        self.handlers.pop(name, None)

    def partition(self, name: str, peer: str | None = None) -> None:
        """Silently drop all traffic to and from ``name``, or only on its link to ``peer``."""
        if peer is None:
            self.blocked.add(name)
        else:
            self.cut_links.add(frozenset((name, peer)))

    def heal(self, name: str, peer: str | None = None) -> None:
        if peer is None:
            self.blocked.discard(name)
        else:
            self.cut_links.discard(frozenset((name, peer)))

    def send(self, src: str, dst: str, msg: ControlMessage) -> None:
        frame = encode(msg)
        lost = (
            src in self.blocked
            or dst in self.blocked
            or (bool(self.cut_links) and frozenset((src, dst)) in self.cut_links)
            or (self.loss > 0 and self.rng.random() < self.loss)
        )
        if self.record:
            self.trace.append(TraceEntry(self._time, src, dst, msg.kind.value, msg.seq, msg.reply_to, not lost))
        if lost:
            return
        self.call_later(self.latency(src, dst), self._deliver, dst, frame)

    def _deliver(self, dst: str, frame: bytes) -> None:
        handler = self.handlers.get(dst)
        if handler is None or dst in self.blocked:
            return
        self.delivered += 1
        handler(decode(frame))

    def step(self) -> bool:
        while self._queue:
            when, _, timer, fn, args = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self._time = when
            fn(*args)
            return True
        return False

    def run(self, until: float | None = None, max_events: int | None = None) -> None:
        n = 0
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                break
            if not self.step():
                break
            n += 1
            if max_events is not None and n >= max_events:
                break
        if until is not None and until > self._time:
            self._time = until


class AsyncioRuntime:
    """Socket transport: one TCP listener per process, frames addressed by actor name.

    ``peers`` maps remote actor names to ``(host, port)``.  Connections are
    bidirectional: an inbound frame teaches the runtime how to reach its
    sender, so replies need no address-book entry.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, peers: dict[str, tuple[str, int]] | None = None):
        self.host = host
        self.port = port
        self.peers = dict(peers or {})
        self.handlers: dict[str, Handler] = {}
        self.trace: list[TraceEntry] = []
        self._routes: dict[str, asyncio.StreamWriter] = {}
        self._connecting: dict[tuple[str, int], asyncio.Task] = {}
        self._server: asyncio.AbstractServer | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._tasks: set[asyncio.Task] = set()
        self._reading: set[asyncio.StreamWriter] = set()

    @property
    def loop(self) -> asyncio.AbstractEventLoop:
        return self._loop or asyncio.get_running_loop()

    async def start(self) -> tuple[str, int]:
        self._loop = asyncio.get_running_loop()
        self._server = await asyncio.start_server(self._on_connection, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.host, self.port

    async def close(self) -> None:
        for w in set(self._routes.values()):
            w.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for t in list(self._tasks):
            t.cancel()

    def now(self) -> float:
        return self.loop.time() * 1000.0

    def call_later(self, delay_ms: float, fn: Callable, *args) -> asyncio.TimerHandle:
        return self.loop.call_later(max(0.0, delay_ms) / 1000.0, fn, *args)

    def register(self, name: str, handler: Handler) -> None:
        self.handlers[name] = handler

    def unregister(self, name: str) -> None:
        self.handlers.pop(name, None)

    def send(self, src: str, dst: str, msg: ControlMessage) -> None:
        self.trace.append(TraceEntry(self.now(), src, dst, msg.kind.value, msg.seq, msg.reply_to, True))
        frame = encode(msg)
        if dst in self.handlers:
            self.loop.call_soon(self._dispatch, decode(frame))
            return
        writer = self._routes.get(dst)
        if writer is not None and not writer.is_closing():
            writer.write(frame)
            return
        addr = self.peers.get(dst)
        if addr is None:
            log.warning("no route to %s; dropping %s", dst, msg.kind.value)
            return
        self._spawn(self._send_via(addr, dst, frame))

    def _spawn(self, coro) -> None:
        task = self.loop.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _send_via(self, addr: tuple[str, int], dst: str, frame: bytes) -> None:
        key = tuple(addr)
        pending = self._connecting.get(key)
        if pending is None:
            pending = self.loop.create_task(asyncio.open_connection(*addr))
            self._connecting[key] = pending
        try:
            reader, writer = await pending
        except OSError as exc:
            self._connecting.pop(key, None)
            log.warning("cannot reach %s at %s: %s", dst, addr, exc)
            return
        for name, peer in self.peers.items():
            if tuple(peer) == key:
                self._routes.setdefault(name, writer)
        writer.write(frame)
        if writer not in self._reading:
            self._reading.add(writer)
            self._spawn(self._read_loop(reader, writer))

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        await self._read_loop(reader, writer)

    async def _read_loop(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        buf = FrameBuffer()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                for msg in buf.feed(data):
                    # learn the way back to whoever sent this
                    if msg.sender not in self.handlers:
                        self._routes[msg.sender] = writer
                    self._dispatch(msg)
        except (ConnectionError, MalformedMessageError) as exc:
            log.warning("dropping connection: %s", exc)
        finally:
            for name in [n for n, w in self._routes.items() if w is writer]:
                del self._routes[name]
            writer.close()

    def _dispatch(self, msg: ControlMessage) -> None:
        handler = self.handlers.get(msg.dst)
        if handler is None:
            log.warning("no local actor %s for %s", msg.dst, msg.kind.value)
            return
        handler(msg)


# endpoint helpers ------------------------------------------------------------


class LivenessMonitor:
    """Marks a peer down when nothing arrived from it for ``3 * interval_ms``."""

    def __init__(self, interval_ms: float, on_down: Callable[[str], None], misses: int = 3):
        self.interval_ms = interval_ms
        self.misses = misses
        self.on_down = on_down
        self.last_seen: dict[str, float] = {}
        self.down: set[str] = set()

    def seen(self, peer: str, now: float) -> bool:
        """Record traffic; True when the peer was down and is back."""
        self.last_seen[peer] = now
        if peer in self.down:
            self.down.discard(peer)
            return True
        return False

    def check(self, now: float) -> list[str]:
        gone = []
        for peer, t in sorted(self.last_seen.items()):
            if peer not in self.down and now - t > self.misses * self.interval_ms:
                self.down.add(peer)
                gone.append(peer)
        for peer in gone:
            self.on_down(peer)
        return gone

    def forget(self, peer: str) -> None:
        self.last_seen.pop(peer, None)
        self.down.discard(peer)


@dataclass
class _Pending:
    on_reply: Callable[[ControlMessage], None]
    on_error: Callable[[Exception], None]
    timer: Any


class Endpoint:
    """An actor's mailbox: numbering, dedup, request/reply correlation and dispatch.

    Subclasses implement ``on_<kind>`` methods (``on_schedulerequest`` ...).
    Replies carry ``reply_to`` and are routed to the continuation that sent
    the request instead of the kind handler.
    """

    rpc_timeout_ms: float = 5000.0
    resets_on: frozenset = frozenset()

    def __init__(self, name: str, runtime: Runtime):
        self.name = name
        self.runtime = runtime
        self.seqs = SequenceCounter()
        self.dedup = Deduper()
        self.pending: dict[tuple[str, Kind, int], _Pending] = {}
        self.received: dict[str, int] = {}
        self.sent: dict[str, int] = {}
        runtime.register(name, self.handle)

    def send(self, dst: str, kind: Kind, body: dict | None = None, reply_to: int | None = None) -> ControlMessage:
        msg = ControlMessage(kind, self.name, self.seqs.next(kind, dst), body or {}, dst, reply_to)
        self.sent[kind.value] = self.sent.get(kind.value, 0) + 1
        self.runtime.send(self.name, dst, msg)
        return msg

    def reply(self, request: ControlMessage, kind: Kind, body: dict | None = None) -> ControlMessage:
        return self.send(request.sender, kind, body, reply_to=request.seq)

    def request(
        self,
        dst: str,
        kind: Kind,
        body: dict,
        on_reply: Callable[[ControlMessage], None],
        on_error: Callable[[Exception], None] | None = None,
        timeout_ms: float | None = None,
    ) -> ControlMessage:
        """Send and await a reply by continuation; a timeout raises PeerDownError into ``on_error``."""
        msg = self.send(dst, kind, body)
        key = (dst, kind, msg.seq)
        timer = self.runtime.call_later(timeout_ms or self.rpc_timeout_ms, self._expire, key)
        self.pending[key] = _Pending(on_reply, on_error or self._unhandled, timer)
        return msg

    def _expire(self, key) -> None:
        p = self.pending.pop(key, None)
        if p is None:
            return
        err = PeerDownError(f"{key[0]} did not answer {key[1].value} #{key[2]}")
        self.on_peer_timeout(key[0])
        p.on_error(err)

    def _unhandled(self, exc: Exception) -> None:
        log.warning("%s: %s", self.name, exc)

    def on_peer_timeout(self, peer: str) -> None:
        """Liveness hook for RPC timeouts."""

    def fail_pending(self, peer: str) -> None:
        for key in [k for k in self.pending if k[0] == peer]:
            p = self.pending.pop(key)
            p.timer.cancel()
            p.on_error(PeerDownError(f"{peer} is down"))

    def handle(self, msg: ControlMessage) -> None:
        if msg.kind in self.resets_on and msg.reply_to is None:
            # a (re)starting peer numbers from one again
            self.dedup.forget(msg.sender)
        if not self.dedup.accept(msg):
            self.on_duplicate(msg)
            return
        self.received[msg.kind.value] = self.received.get(msg.kind.value, 0) + 1
        self.on_any(msg)
        if msg.reply_to is not None:
            key = self._match(msg)
            if key is not None:
                p = self.pending.pop(key)
                p.timer.cancel()
                p.on_reply(msg)
                return
        handler = getattr(self, "on_" + msg.kind.value.lower(), None)
        if handler is None:
            log.debug("%s ignores %s from %s", self.name, msg.kind.value, msg.sender)
            return
        handler(msg)

    def _match(self, msg: ControlMessage):
        for key in self.pending:
            if key[0] == msg.sender and key[2] == msg.reply_to and REPLY_KIND.get(key[1], key[1]) is msg.kind:
                return key
        return None

    def on_any(self, msg: ControlMessage) -> None:
        """Called for every accepted message before dispatch."""

    def on_duplicate(self, msg: ControlMessage) -> None:
        """Called for messages the deduper dropped."""


class Broker:
    """Topic fan-out embedded in a cluster orchestrator."""

    def __init__(self, name: str, runtime: Runtime):
        self.name = name
        self.runtime = runtime
        self.topics: dict[str, list[str]] = {}
        self.closed: set[str] = set()

    def subscribe(self, topic: str, subscriber: str) -> None:
        subs = self.topics.setdefault(topic, [])
        if subscriber not in subs:
            subs.append(subscriber)

    def unsubscribe(self, topic: str, subscriber: str) -> None:
        if subscriber in self.topics.get(topic, []):
            self.topics[topic].remove(subscriber)

    def close(self, topic: str) -> None:
        self.closed.add(topic)
        self.topics.pop(topic, None)

    def publish(self, topic: str, msg: ControlMessage) -> int:
        if topic in self.closed:
            raise TopicClosedError(topic)
        subs = self.topics.get(topic, [])
        for s in subs:
            self.runtime.send(msg.sender, s, ControlMessage(msg.kind, msg.sender, msg.seq, msg.body, s, msg.reply_to))
        return len(subs)


class GoBackNSender:
    """Retransmits a stream until cumulatively acknowledged.

    Acknowledgements are replies of the same kind whose ``reply_to`` is the
    highest seq received in order.
    """

    def __init__(self, endpoint: Endpoint, dst: str, kind: Kind, rto_ms: float = 50.0, window: int = 64):
        self.endpoint = endpoint
        self.dst = dst
        self.kind = kind
        self.rto_ms = rto_ms
        self.window = window
        self.queue: deque[tuple[int, dict]] = deque()  # contiguous seqs from base
        self.next_seq = 1
        self.base = 1
        self.sent_total = 0
        self._high = 1  # first seq not yet transmitted in this round
        self._timer = None

    def submit(self, body: dict) -> int:
        seq = self.next_seq
        self.next_seq += 1
        self.queue.append((seq, body))
        self._pump()
        return seq

    def _transmit(self, seq: int, body: dict) -> None:
        self.sent_total += 1
        msg = ControlMessage(self.kind, self.endpoint.name, seq, body, self.dst)
        self.endpoint.runtime.send(self.endpoint.name, self.dst, msg)

    def _pump(self) -> None:
        end = min(len(self.queue), self.window)
        for i in range(max(0, self._high - self.base), end):
            seq, body = self.queue[i]
            self._transmit(seq, body)
            self._high = seq + 1
        self._arm()

    def _arm(self) -> None:
        if self._timer is None and self.queue:
            self._timer = self.endpoint.runtime.call_later(self.rto_ms, self._timeout)

    def _timeout(self) -> None:
        self._timer = None
        # resend the whole window
        self._high = self.base
        self._pump()

    def ack(self, upto: int) -> None:
        if upto < self.base:
            return
        while self.queue and self.queue[0][0] <= upto:
            self.queue.popleft()
        self.base = upto + 1
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self._pump()

    @property
    def idle(self) -> bool:
        return not self.queue


class UdpTunnel(asyncio.DatagramProtocol):
    """Datagram carrier for the overlay proxy in live mode.

    ``peers`` maps node endpoints to ``(host, port)``; inbound datagrams go to
    ``on_datagram(bytes)``.
    """

    def __init__(self, on_datagram: Callable[[bytes], None], peers: dict[str, tuple[str, int]] | None = None):
        self.on_datagram = on_datagram
        self.peers = dict(peers or {})
        self.transport: asyncio.DatagramTransport | None = None

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        self.on_datagram(data)

    def send_datagram(self, peer: str, data: bytes) -> None:
        addr = self.peers.get(peer)
        if addr is None or self.transport is None:
            raise PeerUnreachableError(peer)
        self.transport.sendto(data, addr)

    @classmethod
    async def open(cls, on_datagram, host: str = "127.0.0.1", port: int = 0, peers=None) -> UdpTunnel:
        loop = asyncio.get_running_loop()
        _, proto = await loop.create_datagram_endpoint(lambda: cls(on_datagram, peers), local_addr=(host, port))
        return proto

    @property
    def address(self) -> tuple[str, int]:
        return self.transport.get_extra_info("sockname")[:2]
