import json
import os
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from oak.cli import main

ROOT_DIR = Path(__file__).resolve().parent.parent
TOPOLOGY = ROOT_DIR / "configs" / "topology.yaml"
SLA = ROOT_DIR / "configs" / "detector.yaml"

SCENARIO = """\
version: 1
name: tiny
seed: 2
duration_ms: 3000
topology: {clusters: 2, workers: 4, scheduler: rom}
latency_model: {vivaldi_rounds: 20}
workload: {requests: 3, interval_ms: 50, s2u: false}
"""


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(SCENARIO)
    return p


def test_topology_prints_the_tree(capsys):
    assert main(["topology", str(TOPOLOGY)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("root\n") and "    berlin-east" in out


def test_topology_rejects_bad_files(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("clusters:\n  - {id: a, parent: nowhere}\n")
    assert main(["topology", str(bad)]) == 2
    assert "nowhere" in capsys.readouterr().err


def test_sim_run_writes_csvs(scenario, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["sim", "run", str(scenario), "--out", str(out)]) == 0
    assert "placed" in capsys.readouterr().out
    assert (out / "placements.csv").read_text().count("\n") == 4


def test_sim_sweep_writes_table(scenario, tmp_path, capsys):
    out = tmp_path / "sw"
    assert main(["sim", "sweep", str(scenario), "--param", "workers", "--values", "4,6", "--out", str(out)]) == 0
    assert (out / "sweep.csv").read_text().count("\n") == 3
    assert (out / "workers=6").is_dir()


def test_sim_sweep_unknown_parameter(scenario, capsys):
    assert main(["sim", "sweep", str(scenario), "--param", "colour", "--values", "1"]) == 2
    assert "colour" in capsys.readouterr().err


def test_memory_deploy_and_status(monkeypatch, capsys):
    monkeypatch.setenv("OAK_TRANSPORT", "memory")
    assert main(["deploy", str(SLA), "--topology", str(TOPOLOGY)]) == 0
    deployed = json.loads(capsys.readouterr().out)
    assert not deployed.get("failed")
    assert main(["status", "--topology", str(TOPOLOGY)]) == 0
    status = json.loads(capsys.readouterr().out)
    assert {"munich", "berlin"} <= set(status["clusters"])


def test_bad_transport(monkeypatch):
    monkeypatch.setenv("OAK_TRANSPORT", "pigeon")
    with pytest.raises(SystemExit, match="pigeon"):
        main(["status"])


def test_unreachable_root(monkeypatch, capsys):
    monkeypatch.setenv("OAK_TRANSPORT", "socket")
    monkeypatch.setenv("OAK_ROOT_ADDR", f"127.0.0.1:{_free_port()}")
    assert main(["status"]) == 2
    assert "did not answer" in capsys.readouterr().err


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _oak(*args, env):
    return subprocess.Popen([sys.executable, "-m", "oak.cli", *args], env=env, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)


def test_socket_daemons_serve_deploy_and_status(tmp_path):
    env = {**os.environ, "OAK_TRANSPORT": "socket", "OAK_ROOT_ADDR": f"127.0.0.1:{_free_port()}"}
    root = _oak("daemon", "root", env=env)
    clusters = []
    try:
        assert "listening" in root.stdout.readline()
        for i, cid in enumerate(["munich", "berlin"], start=1):
            c = _oak("daemon", "cluster", "--id", cid, "--index", str(i), "--topology", str(TOPOLOGY), env=env)
            assert "listening" in c.stdout.readline()
            clusters.append(c)
        deadline = time.time() + 30
        while True:
            status = subprocess.run([sys.executable, "-m", "oak.cli", "status"], env=env, capture_output=True, text=True)
            if status.returncode == 0 and {"munich", "berlin"} <= set(json.loads(status.stdout)["clusters"]):
                break
            assert time.time() < deadline, status.stderr
            time.sleep(0.5)
        deployed = subprocess.run([sys.executable, "-m", "oak.cli", "deploy", str(SLA)], env=env, capture_output=True, text=True, timeout=60)
        assert deployed.returncode == 0, deployed.stdout + deployed.stderr
        assert not json.loads(deployed.stdout).get("failed")
    finally:
        for p in [*clusters, root]:
            p.terminate()
            p.wait(timeout=10)
