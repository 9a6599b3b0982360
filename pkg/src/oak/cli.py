"""Command line: ``oak sim``, ``oak deploy``, ``oak status``, ``oak topology`` and ``oak daemon``.

Live commands talk to the root over TCP when ``OAK_TRANSPORT=socket``
(the default), reaching it at ``OAK_ROOT_ADDR`` (``host:port``).  With
``OAK_TRANSPORT=memory`` they boot the ``--topology`` file in-process on
virtual time instead, which needs no daemons.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from oak.actors import ROOT, ClusterActor, RootActor, WorkerActor
from oak.control import AsyncioRuntime, Endpoint, Kind
from oak.errors import OakError, PeerDownError
from oak.system import OakSystem, load_topology, render_tree

DEFAULT_ROOT_ADDR = "127.0.0.1:7400"


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _transport() -> str:
    mode = os.environ.get("OAK_TRANSPORT", "socket")
    if mode not in ("memory", "socket"):
        raise SystemExit(f"OAK_TRANSPORT must be memory or socket, got {mode!r}")
    return mode


def _root_addr() -> tuple[str, int]:
    return _addr(os.environ.get("OAK_ROOT_ADDR", DEFAULT_ROOT_ADDR))


# simulation ------------------------------------------------------------------------
def cmd_sim_run(args) -> int:
    from oak.sim.harness import format_summary, run
    from oak.sim.scenario import load_scenario

    scenario = load_scenario(args.scenario)
    out = Path(args.out or Path("results") / scenario.name)
    result = run(scenario, out)
    print(format_summary(scenario.name, result.summary))
    print(f"csv written to {out}/")
    return 0


def _values(text: str) -> list:
    out = []
    for v in (x.strip() for x in text.split(",")):
        if not v:
            continue
        try:
            out.append(int(v))
        except ValueError:
            try:
                out.append(float(v))
            except ValueError:
                out.append(v)
    return out


def cmd_sim_sweep(args) -> int:
    from oak.sim.harness import sweep
    from oak.sim.scenario import load_scenario

    scenario = load_scenario(args.scenario)
    out = Path(args.out or Path("results") / f"{scenario.name}-sweep-{args.param}")
    rows = sweep(scenario, args.param, _values(args.values), out)
    cols = [args.param, "placed", "satisfied_rate", "cluster_calc_ms_median", "total_schedule_ms_median", "achieved_rtt_ms_median"]
    print("  ".join(f"{c:>24}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>24.4f}" if isinstance(r[c], float) else f"{r[c]!s:>24}" for c in cols))
    print(f"sweep table written to {out / 'sweep.csv'}")
    return 0


# live ------------------------------------------------------------------------------
class _Client(Endpoint):
    rpc_timeout_ms = 30_000.0


async def _ask_root(body: dict) -> dict:
    addr = _root_addr()
    # fail fast when nothing listens instead of waiting out the RPC timeout
    try:
        _, probe = await asyncio.open_connection(*addr)
    except OSError as exc:
        raise PeerDownError(str(exc)) from None
    probe.close()
    runtime = AsyncioRuntime(peers={ROOT: addr})
    await runtime.start()
    client = _Client(f"cli-{os.getpid()}", runtime)
    done: asyncio.Future = runtime.loop.create_future()
    client.request(ROOT, Kind.ALARM, body, lambda m: done.set_result(m.body), lambda e: done.set_exception(e))
    try:
        return await done
    finally:
        await runtime.close()


def _memory_system(args) -> OakSystem:
    if not args.topology:
        raise SystemExit("OAK_TRANSPORT=memory needs --topology")
    system = OakSystem(load_topology(args.topology))
    system.start()
    return system


def cmd_deploy(args) -> int:
    with open(args.sla) as fh:
        doc = yaml.safe_load(fh)
    if _transport() == "memory":
        system = _memory_system(args)
        rec = system.deploy(doc)
        result = system.root.service_status(rec)
    else:
        result = asyncio.run(_ask_root({"type": "deploy", "sla": doc}))
        result.pop("type", None)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0 if not result.get("failed") else 3


def cmd_status(args) -> int:
    if _transport() == "memory":
        result = _memory_system(args).status()
    else:
        result = asyncio.run(_ask_root({"type": "status"}))
        result.pop("type", None)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_topology(args) -> int:
    print(render_tree(load_topology(args.config)))
    return 0


async def _serve(build) -> None:
    runtime = await build()
    host, port = runtime.host, runtime.port
    logging.getLogger("oak").info("listening on %s:%d", host, port)
    print(f"listening on {host}:{port}", flush=True)
    try:
        await asyncio.Event().wait()
    finally:
        await runtime.close()


def cmd_daemon(args) -> int:
    host, port = args.listen

    async def build():
        if args.role == "root":
            runtime = AsyncioRuntime(host, port)
            await runtime.start()
            RootActor(runtime).start()
            return runtime
        cluster_id = args.id or os.environ.get("OAK_CLUSTER_ID")
        if not cluster_id:
            raise SystemExit("cluster daemon needs --id or OAK_CLUSTER_ID")
        spec = None
        if args.topology:
            spec = next((s for s in load_topology(args.topology) if s.id == cluster_id), None)
            if spec is None:
                raise SystemExit(f"{cluster_id!r} is not in {args.topology}")
        runtime = AsyncioRuntime(host, port, peers={ROOT: _root_addr()})
        await runtime.start()
        cluster = ClusterActor(cluster_id, runtime, index=args.index, scheduler=spec.scheduler if spec else "rom_best_slack")
        cluster.start()
        # workers of a topology file run in this process and reach the cluster directly
        for w in spec.workers if spec else []:
            WorkerActor(w.id, runtime, cluster_id, w.capacity, geo=w.geo, virtualizations=w.virtualizations).start()
        return runtime

    try:
        asyncio.run(_serve(build))
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oak", description="Hierarchical edge orchestration and its simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run scenarios on virtual time").add_subparsers(dest="sim_command", required=True)
    r = sim.add_parser("run", help="run one scenario and write its CSVs")
    r.add_argument("scenario")
    r.add_argument("--out", help="output directory (default results/<name>)")
    r.set_defaults(func=cmd_sim_run)
    s = sim.add_parser("sweep", help="run a scenario once per parameter value")
    s.add_argument("scenario")
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, help="comma separated, e.g. 50,100,250,500")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sim_sweep)

    d = sub.add_parser("deploy", help="submit an SLA to the root")
    d.add_argument("sla")
    d.add_argument("--topology", help="topology file for OAK_TRANSPORT=memory")
    d.set_defaults(func=cmd_deploy)

    st = sub.add_parser("status", help="clusters and instances known to the root")
    st.add_argument("--topology", help="topology file for OAK_TRANSPORT=memory")
    st.set_defaults(func=cmd_status)

    t = sub.add_parser("topology", help="validate and print a topology file")
    t.add_argument("config")
    t.set_defaults(func=cmd_topology)

    dm = sub.add_parser("daemon", help="run a root or cluster orchestrator over TCP")
    dm.add_argument("role", choices=["root", "cluster"])
    dm.add_argument("--listen", type=_addr, default=None, help="host:port (root default: OAK_ROOT_ADDR)")
    dm.add_argument("--id", help="cluster id (default OAK_CLUSTER_ID)")
    dm.add_argument("--index", type=int, default=1, help="cluster index for overlay addressing")
    dm.add_argument("--topology", help="host this cluster's workers from a topology file")
    dm.set_defaults(func=cmd_daemon)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "daemon" and args.listen is None:
        args.listen = _root_addr() if args.role == "root" else ("127.0.0.1", 0)
    try:
        return args.func(args)
    except PeerDownError:
        print(f"oak: root at {os.environ.get('OAK_ROOT_ADDR', DEFAULT_ROOT_ADDR)} did not answer", file=sys.stderr)
        return 2
    except (OakError, OSError) as exc:
        print(f"oak: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
