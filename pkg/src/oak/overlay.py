"""Semantic overlay networking.

Address layout (IPv4):

* instance addresses: ``10.0.0.0/8`` split as 7 bits cluster index, 11 bits
  worker subnet, 6 bits instance suffix, so every worker owns a ``/26``;
* serviceIPs: drawn sequentially from the reserved ``172.30.0.0/16`` prefix.
"""

from __future__ import annotations

import ipaddress
import itertools
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Protocol

from oak.coords import VivaldiCoordinate, dist_euc
from oak.errors import (
    NetworkError,
    PeerUnreachableError,
    SubnetExhaustedError,
    UnknownNameError,
    UnknownPolicyError,
    UnresolvableError,
)

INSTANCE_NETWORK = ipaddress.IPv4Network("10.0.0.0/8")
SERVICE_NETWORK = ipaddress.IPv4Network("172.30.0.0/16")
CLUSTER_BITS = 7
WORKER_BITS = 11
INSTANCE_BITS = 6
WORKER_PREFIXLEN = 32 - INSTANCE_BITS


def cluster_prefix(cluster_index: int) -> ipaddress.IPv4Network:
    if not 0 < cluster_index < 2**CLUSTER_BITS:
        raise ValueError(f"cluster index {cluster_index} out of range")
    base = int(INSTANCE_NETWORK.network_address) | cluster_index << (WORKER_BITS + INSTANCE_BITS)
    return ipaddress.IPv4Network((base, 32 - WORKER_BITS - INSTANCE_BITS))


class SubnetPool:
    """Hands out one worker subnet per registration; never reuses a subnet."""

    def __init__(self, cluster_index: int):
        self.prefix = cluster_prefix(cluster_index)
        self._next = 0

    def allocate(self) -> ipaddress.IPv4Network:
        if self._next >= 2**WORKER_BITS:
            raise SubnetExhaustedError(f"cluster prefix {self.prefix} has no free worker subnet")
        base = int(self.prefix.network_address) | self._next << INSTANCE_BITS
        self._next += 1
        return ipaddress.IPv4Network((base, WORKER_PREFIXLEN))

    @property
    def allocated(self) -> int:
        return self._next


class InstanceAddressPool:
    """Instance addresses inside one worker subnet; suffix 0 is the worker gateway."""

    def __init__(self, subnet: ipaddress.IPv4Network | str):
        self.subnet = ipaddress.IPv4Network(subnet)
        self._fresh = iter(range(1, self.subnet.num_addresses))
        self._released: deque[int] = deque()

    def allocate(self) -> ipaddress.IPv4Address:
        suffix = next(self._fresh, None)
        if suffix is None:
            if not self._released:
                raise SubnetExhaustedError(f"no free address in {self.subnet}")
            suffix = self._released.popleft()
        return self.subnet.network_address + suffix

    def release(self, address: ipaddress.IPv4Address | str) -> None:
        self._released.append(int(ipaddress.IPv4Address(address)) - int(self.subnet.network_address))


class Policy(str, Enum):
    INSTANCE = "instance"
    ROUND_ROBIN = "round_robin"
    CLOSEST = "closest"


NAMEABLE_POLICIES = (Policy.ROUND_ROBIN, Policy.CLOSEST)


@dataclass(frozen=True)
class ServiceIP:
    address: str
    policy: Policy
    service_id: str
    instance_id: str | None = None


@dataclass(frozen=True)
class Binding:
    """One reachable instance of a service."""

    instance_ip: str
    node_endpoint: str
    vivaldi: VivaldiCoordinate = VivaldiCoordinate()
    instance_id: str = ""

    def to_dict(self) -> dict:
        return {
            "instance_ip": self.instance_ip,
            "node_endpoint": self.node_endpoint,
            "vivaldi": self.vivaldi.to_dict(),
            "instance_id": self.instance_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Binding:
        return cls(d["instance_ip"], d["node_endpoint"], VivaldiCoordinate.from_dict(d["vivaldi"]), d.get("instance_id", ""))


@dataclass
class ResolutionEntry:
    service_id: str
    policy: Policy
    instances: list[Binding] = field(default_factory=list)
    rr_cursor: int = 0
    resolved: bool = False
    version: int = 0


class ServiceRegistry:
    """Authoritative serviceIP and binding store held by an orchestrator's service manager.

    A registry may have a ``parent``; queries it cannot answer are forwarded
    upward and the answer cached.  Resolving subscribes the asking node, and
    binding changes are pushed to every subscriber of that service.
    """

    def __init__(self, parent: ServiceRegistry | None = None, name: str = "registry"):
        self.parent = parent
        self.name = name
        self._addresses = _address_allocator() if parent is None else None
        self.service_ips: dict[str, ServiceIP] = {}
        self.by_service: dict[str, dict[Policy, str]] = {}
        self.bindings: dict[str, list[Binding]] = {}
        self.versions: dict[str, int] = {}
        self.subscribers: dict[str, list[Callable[[str, list[Binding], int], None]]] = {}
        self.upward_queries = 0
        self.queries = 0
        self.children: list[ServiceRegistry] = []
        if parent is not None:
            parent.children.append(self)

    @property
    def root(self) -> ServiceRegistry:
        node = self
        while node.parent is not None:
            node = node.parent
        return node

    def register_service(self, service_id: str) -> dict[Policy, str]:
        """Allocate the semantic serviceIPs for ``service_id`` (idempotent)."""
        root = self.root
        if service_id not in root.by_service:
            root.by_service[service_id] = {}
            for policy in NAMEABLE_POLICIES:
                addr = str(next(root._addresses))
                root.service_ips[addr] = ServiceIP(addr, policy, service_id)
                root.by_service[service_id][policy] = addr
            root.bindings.setdefault(service_id, [])
            root.versions.setdefault(service_id, 0)
        return dict(root.by_service[service_id])

    def resolve_name(self, name: str) -> str:
        """Map ``<service>.<policy>`` to the bound serviceIP address."""
        service, sep, policy = name.rpartition(".")
        if not sep or not service:
            raise UnknownNameError(name)
        try:
            pol = Policy(policy)
        except ValueError:
            raise UnknownPolicyError(f"unknown balancing policy {policy!r}") from None
        if pol not in NAMEABLE_POLICIES:
            raise UnknownPolicyError(f"policy {policy!r} is not addressable by name")
        root = self.root
        if service not in root.by_service:
            raise UnknownNameError(name)
        return root.by_service[service][pol]

    def set_bindings(self, service_id: str, bindings: Iterable[Binding]) -> int:
        """Replace the binding set of a service and push it to subscribers everywhere below."""
        root = self.root
        root.register_service(service_id)
        blist = list(bindings)
        root.bindings[service_id] = blist
        root.versions[service_id] = root.versions.get(service_id, 0) + 1
        version = root.versions[service_id]
        for addr in list(root.service_ips):
            sip = root.service_ips[addr]
            if sip.service_id == service_id and sip.policy is Policy.INSTANCE and sip.instance_id not in {
                b.instance_id for b in blist
            }:
                del root.service_ips[addr]
        for b in blist:
            root.service_ips.setdefault(b.instance_ip, ServiceIP(b.instance_ip, Policy.INSTANCE, service_id, b.instance_id))
        root._fan_out(service_id, blist, version)
        return version

    def add_binding(self, service_id: str, binding: Binding) -> int:
        current = [b for b in self.root.bindings.get(service_id, []) if b.instance_ip != binding.instance_ip]
        return self.set_bindings(service_id, current + [binding])

    def remove_binding(self, service_id: str, instance_ip: str) -> int:
        current = [b for b in self.root.bindings.get(service_id, []) if b.instance_ip != instance_ip]
        return self.set_bindings(service_id, current)

    def _fan_out(self, service_id: str, bindings: list[Binding], version: int) -> None:
        if self.parent is not None and service_id in self.bindings:
            self.bindings[service_id] = list(bindings)
            self.versions[service_id] = version
        for push in list(self.subscribers.get(service_id, [])):
            push(service_id, list(bindings), version)
        for child in self.children:
            child._fan_out(service_id, bindings, version)

    def query(self, address: str, subscriber: Callable[[str, list[Binding], int], None] | None = None) -> tuple[ServiceIP, list[Binding], int]:
        """Resolution query/reply.  Unknown locally -> ask the parent, cache the answer."""
        self.queries += 1
        sip = self.service_ips.get(address)
        if sip is None or sip.service_id not in self.bindings:
            if self.parent is None:
                raise UnresolvableError(f"no service bound to {address}")
            self.upward_queries += 1
            sip, blist, version = self.parent.query(address)
            self.service_ips[address] = sip
            self.bindings[sip.service_id] = list(blist)
            self.versions[sip.service_id] = version
        if subscriber is not None:
            subs = self.subscribers.setdefault(sip.service_id, [])
            if subscriber not in subs:
                subs.append(subscriber)
        return sip, list(self.bindings[sip.service_id]), self.versions[sip.service_id]


def _address_allocator():
    return itertools.islice(SERVICE_NETWORK.hosts(), None)


class ConversionTable:
    """Per-worker serviceIP -> instance mapping, filled lazily and kept fresh by pushes."""

    def __init__(self, node_endpoint: str, local: Iterable[tuple[ServiceIP, Binding]] = ()):
        self.node_endpoint = node_endpoint
        self.entries: dict[str, ResolutionEntry] = {}
        self._aliases: dict[str, list[str]] = {}
        for sip, binding in local:
            self.entries[sip.address] = ResolutionEntry(sip.service_id, sip.policy, [binding], resolved=True)

    def entry(self, address: str) -> ResolutionEntry | None:
        return self.entries.get(address)

    def install(self, sip: ServiceIP, bindings: list[Binding], version: int) -> ResolutionEntry:
        entry = self.entries.get(sip.address)
        if entry is None:
            entry = ResolutionEntry(sip.service_id, sip.policy)
            self.entries[sip.address] = entry
        self._apply(entry, sip, bindings)
        entry.resolved = True
        entry.version = version
        self._aliases.setdefault(sip.service_id, [])
        if sip.address not in self._aliases[sip.service_id]:
            self._aliases[sip.service_id].append(sip.address)
        return entry

    @staticmethod
    def _apply(entry: ResolutionEntry, sip: ServiceIP, bindings: list[Binding]) -> None:
        if sip.policy is Policy.INSTANCE:
            bindings = [b for b in bindings if b.instance_ip == sip.address]
        entry.instances = list(bindings)
        entry.rr_cursor = entry.rr_cursor % len(bindings) if bindings else 0

    def push_update(self, service_id: str, new_bindings: list[Binding], version: int | None = None) -> bool:
        """Atomically replace every entry of a subscribed service; ignored otherwise."""
        addresses = self._aliases.get(service_id)
        if not addresses:
            return False
        for addr in addresses:
            entry = self.entries[addr]
            if version is not None and version < entry.version:
                continue
            self._apply(entry, ServiceIP(addr, entry.policy, service_id), new_bindings)
            if version is not None:
                entry.version = version
        return True

    def invalidate(self, address: str) -> None:
        entry = self.entries.get(address)
        if entry is not None:
            entry.resolved = False


def pick(entry: ResolutionEntry, local_vivaldi: VivaldiCoordinate | None = None) -> Binding:
    """Apply the entry's balancing policy to its current bindings."""
    if not entry.instances:
        raise UnresolvableError(f"no live instance of {entry.service_id}")
    if entry.policy is Policy.ROUND_ROBIN:
        chosen = entry.instances[entry.rr_cursor % len(entry.instances)]
        entry.rr_cursor = (entry.rr_cursor + 1) % len(entry.instances)
        return chosen
    if entry.policy is Policy.CLOSEST:
        if local_vivaldi is None:
            raise ValueError("closest policy needs the local coordinate")
        return min(
            entry.instances,
            key=lambda b: (dist_euc(local_vivaldi, b.vivaldi), int(ipaddress.IPv4Address(b.instance_ip))),
        )
    return entry.instances[0]


class Resolver(Protocol):
    def query(self, address: str, subscriber=None) -> tuple[ServiceIP, list[Binding], int]: ...


def resolve(
    table: ConversionTable,
    address: str,
    authority: Resolver,
    local_vivaldi: VivaldiCoordinate | None = None,
    *,
    force_refresh: bool = False,
) -> tuple[str, str]:
    """Translate ``address`` into ``(instance_ip, node_endpoint)``.

    A miss (or ``force_refresh``) sends one query to ``authority`` and
    subscribes the table to pushed updates of that service.  A NetworkError
    from the authority is retried once as a forced refresh.
    """
    ipaddress.IPv4Address(address)
    entry = table.entry(address)
    if entry is None or not entry.resolved or force_refresh:
        subscriber = table.push_update
        try:
            sip, blist, version = authority.query(address, subscriber)
        except NetworkError:
            sip, blist, version = authority.query(address, subscriber)
        entry = table.install(sip, blist, version)
    chosen = pick(entry, local_vivaldi)
    return chosen.instance_ip, chosen.node_endpoint


class LinkState(str, Enum):
    CONFIGURED = "configured"
    ACTIVE = "active"


@dataclass
class Link:
    peer: str
    state: LinkState
    last_used: float
    touch: int = 0


class TunnelSet:
    """Outbound tunnel ledger of one worker: configured links with at most ``k`` active."""

    def __init__(self, node: str, k: int, n_workers: int | None = None, idle_gc_ms: float = 60_000):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.node = node
        self.k = k
        self.n_workers = n_workers
        self.idle_gc_ms = idle_gc_ms
        self.links: dict[str, Link] = {}
        self._clock = itertools.count(1)
        self.evictions: list[str] = []

    @property
    def active(self) -> set[str]:
        return {p for p, link in self.links.items() if link.state is LinkState.ACTIVE}

    @property
    def configured(self) -> set[str]:
        return {p for p, link in self.links.items() if link.state is LinkState.CONFIGURED}

    def open_link(self, peer: str, now: float) -> Link:
        if peer == self.node:
            raise ValueError("cannot open a tunnel to self")
        link = self.links.get(peer)
        if link is None and self.n_workers is not None and len(self.links) >= self.n_workers - 1:
            raise ValueError(f"{self.node} already has {len(self.links)} links for {self.n_workers} workers")
        if link is None or link.state is not LinkState.ACTIVE:
            active = [l for l in self.links.values() if l.state is LinkState.ACTIVE]
            if len(active) >= self.k:
                victim = min(active, key=lambda l: l.touch)
                victim.state = LinkState.CONFIGURED
                self.evictions.append(victim.peer)
        if link is None:
            link = Link(peer, LinkState.ACTIVE, now)
            self.links[peer] = link
        link.state = LinkState.ACTIVE
        link.last_used = now
        link.touch = next(self._clock)
        return link

    def collect_garbage(self, now: float) -> list[str]:
        stale = [
            p for p, l in self.links.items() if l.state is LinkState.CONFIGURED and now - l.last_used >= self.idle_gc_ms
        ]
        for p in stale:
            del self.links[p]
        return stale


# tunnel datagram: source instance IPv4, destination instance IPv4, uint32 sequence
TUNNEL_HEADER = struct.Struct("!4s4sI")


def pack_datagram(src_instance_ip: str, dst_instance_ip: str, seq: int, payload: bytes) -> bytes:
    return (
        TUNNEL_HEADER.pack(
            ipaddress.IPv4Address(src_instance_ip).packed,
            ipaddress.IPv4Address(dst_instance_ip).packed,
            seq & 0xFFFFFFFF,
        )
        + payload
    )


def unpack_datagram(data: bytes) -> tuple[str, str, int, bytes]:
    if len(data) < TUNNEL_HEADER.size:
        raise ValueError("datagram shorter than the tunnel header")
    src, dst, seq = TUNNEL_HEADER.unpack_from(data)
    return str(ipaddress.IPv4Address(src)), str(ipaddress.IPv4Address(dst)), seq, data[TUNNEL_HEADER.size :]


class NullCodec:
    """Encryption boundary; the identity transform."""

    def seal(self, data: bytes) -> bytes:
        return data

    def open(self, data: bytes) -> bytes:
        return data


@dataclass(frozen=True)
class Delivery:
    src_instance_ip: str
    dst_address: str
    instance_ip: str
    node_endpoint: str
    tunneled: bool
    seq: int


class ProxyTun:
    """Data-plane proxy of one worker.

    ``send_datagram(peer, bytes)`` is the outbound transport; it raises
    PeerUnreachableError when the peer cannot be reached.  Inbound datagrams go
    through :meth:`receive`, which hands payloads to ``deliver``.
    """

    def __init__(
        self,
        node_endpoint: str,
        authority: Resolver,
        send_datagram: Callable[[str, bytes], None],
        *,
        k: int = 8,
        n_workers: int | None = None,
        vivaldi: VivaldiCoordinate | None = None,
        clock: Callable[[], float] = lambda: 0.0,
        codec: NullCodec | None = None,
    ):
        self.node_endpoint = node_endpoint
        self.authority = authority
        self.table = ConversionTable(node_endpoint)
        self.tunnels = TunnelSet(node_endpoint, k, n_workers)
        self.send_datagram = send_datagram
        self.vivaldi = vivaldi or VivaldiCoordinate()
        self.clock = clock
        self.codec = codec or NullCodec()
        self.local_instances: set[str] = set()
        self.inbox: dict[str, list[bytes]] = {}
        self._seq = itertools.count(1)

    def attach(self, instance_ip: str) -> None:
        self.local_instances.add(instance_ip)
        self.inbox.setdefault(instance_ip, [])

    def detach(self, instance_ip: str) -> None:
        self.local_instances.discard(instance_ip)

    def forward(self, src_instance_ip: str, dst_address: str, payload: bytes) -> Delivery:
        if src_instance_ip not in self.local_instances:
            raise ValueError(f"{src_instance_ip} is not a local instance")
        seq = next(self._seq)
        instance_ip, node = resolve(self.table, dst_address, self.authority, self.vivaldi)
        if node == self.node_endpoint:
            self._hand_over(instance_ip, payload)
            return Delivery(src_instance_ip, dst_address, instance_ip, node, False, seq)
        try:
            self._tunnel(node, src_instance_ip, instance_ip, seq, payload)
        except PeerUnreachableError:
            instance_ip, node = resolve(self.table, dst_address, self.authority, self.vivaldi, force_refresh=True)
            if node == self.node_endpoint:
                self._hand_over(instance_ip, payload)
                return Delivery(src_instance_ip, dst_address, instance_ip, node, False, seq)
            self._tunnel(node, src_instance_ip, instance_ip, seq, payload)
        return Delivery(src_instance_ip, dst_address, instance_ip, node, True, seq)

    def _tunnel(self, node: str, src: str, dst: str, seq: int, payload: bytes) -> None:
        self.tunnels.open_link(node, self.clock())
        self.send_datagram(node, self.codec.seal(pack_datagram(src, dst, seq, payload)))

    def receive(self, data: bytes) -> tuple[str, str, int]:
        src, dst, seq, payload = unpack_datagram(self.codec.open(data))
        self._hand_over(dst, payload)
        return src, dst, seq

    def _hand_over(self, instance_ip: str, payload: bytes) -> None:
        if instance_ip not in self.local_instances:
            raise PeerUnreachableError(f"{instance_ip} is not running on {self.node_endpoint}")
        self.inbox[instance_ip].append(payload)
