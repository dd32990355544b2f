import json
import os
import signal
import socket
import subprocess
import sys
import time
import urllib.request

import pytest
from click.testing import CliRunner

from hhmon import data
from hhmon.cli import main
from hhmon.ingest import IngestService
from hhmon.ingest.http import IngestHttpServer
from hhmon.telemetry.broker import MiniBroker
from hhmon.telemetry.wire import decode, encode_text

DEV = "hh-device-1"


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def ingest(tmp_path):
    svc = IngestService(tmp_path / "ingest", fsync=False)
    with IngestHttpServer(svc) as srv:
        yield srv


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


# -- simulate --------------------------------------------------------------------------


def test_simulate_table2_matches_bundle(runner, tmp_path):
    out = tmp_path / "t2.jsonl"
    res = invoke(runner, "simulate", "--scenario", "table2.scn", "--out", out)
    assert res.exit_code == 0
    assert out.read_text() == data.read_text("table2.jsonl")


def test_simulate_fig7_matches_bundle(runner, tmp_path):
    out = tmp_path / "f7.jsonl"
    invoke(runner, "simulate", "--scenario", data.path("fig7.scn"), "--out", out)
    assert out.read_text() == data.read_text("fig7.jsonl")


def test_simulate_is_byte_deterministic(runner, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        invoke(runner, "simulate", "--scenario", "table2.scn", "--seed", 42, "--out", out)
    assert a.read_bytes() == b.read_bytes()


def test_simulate_empty_scenario(runner, tmp_path):
    sc = tmp_path / "empty.scn"
    sc.write_text("duration_ms: 1000\n")
    out = tmp_path / "out.jsonl"
    res = invoke(runner, "simulate", "--scenario", sc, "--out", out)
    assert res.exit_code == 0
    assert out.read_text() == ""


def test_simulate_scenario_error(runner, tmp_path):
    sc = tmp_path / "bad.scn"
    sc.write_text("persons:\n  - {person_id: a, enter_ts: 0, speed_mps: 1.0, washes: [{start_ts: 10, behavior: {abort_at_step: 12}}]}\nduration_ms: 100000\n")
    res = invoke(runner, "simulate", "--scenario", sc, "--out", tmp_path / "o.jsonl")
    assert res.exit_code == 2
    assert "persons[0].washes[0]" in res.stderr


def test_simulate_missing_scenario(runner, tmp_path):
    res = invoke(runner, "simulate", "--scenario", tmp_path / "nope.scn", "--out", tmp_path / "o")
    assert res.exit_code == 2


def test_simulate_device_override(runner, tmp_path):
    out = tmp_path / "o.jsonl"
    invoke(runner, "simulate", "--scenario", "fig7.scn", "--out", out, "--device-id", "ward-7")
    assert {decode(line).device_id for line in out.read_text().splitlines()} == {"ward-7"}


def test_simulate_publish(runner, tmp_path):
    with MiniBroker() as broker:
        res = invoke(runner, "simulate", "--scenario", "table2.scn", "--out", tmp_path / "o.jsonl",
                     "--publish", broker.url, "--data-dir", tmp_path / "dev")
        assert res.exit_code == 0
        states = [m for m in broker.received if m.topic == f"hh/v1/{DEV}/state"]
        assert [decode(m.payload).seq for m in states] == list(range(1, 24))
        assert decode(broker.retained[f"hh/v1/{DEV}/last"].payload).seq == 23


# -- replay ------------------------------------------------------------------------------


def test_replay_is_idempotent(runner, ingest):
    trace = data.path("table2.jsonl")
    assert invoke(runner, "replay", "--trace", trace, "--target", ingest.url).exit_code == 0
    log = ingest.service.data_dir / "devices" / DEV / "gen-0001.jsonl"
    first = log.read_bytes()
    res = invoke(runner, "replay", "--trace", trace, "--target", ingest.url)
    assert res.exit_code == 0 and "duplicate=23" in res.stderr
    assert log.read_bytes() == first == data.read_text("table2.jsonl").encode()


def test_replay_undecodable_line(runner, ingest, tmp_path):
    trace = tmp_path / "t.jsonl"
    lines = data.read_text("table2.jsonl").splitlines()
    lines[2] = '{"seq": "three"}'
    trace.write_text("\n".join(lines) + "\n")
    res = invoke(runner, "replay", "--trace", trace, "--target", ingest.url)
    assert res.exit_code == 2 and ":3:" in res.stderr
    assert ingest.service.devices() == []


def test_replay_empty_trace(runner, tmp_path):
    trace = tmp_path / "empty.jsonl"
    trace.write_text("")
    assert invoke(runner, "replay", "--trace", trace, "--target", "http://127.0.0.1:9").exit_code == 0


def test_replay_unreachable(runner):
    res = invoke(runner, "replay", "--trace", data.path("fig7.jsonl"), "--target", "http://127.0.0.1:9")
    assert res.exit_code == 1


def test_replay_rejections_fail(runner, ingest, tmp_path):
    lines = data.read_text("table2.jsonl").splitlines()
    trace = tmp_path / "gap.jsonl"
    trace.write_text("\n".join(lines[:3] + lines[4:]) + "\n")
    res = invoke(runner, "replay", "--trace", trace, "--target", ingest.url)
    assert res.exit_code == 1 and "rejected=" in res.stderr


def test_replay_to_broker(runner, tmp_path):
    with MiniBroker() as broker:
        res = invoke(runner, "replay", "--trace", data.path("fig7.jsonl"), "--target", broker.url)
        assert res.exit_code == 0
        assert len([m for m in broker.received if m.topic.endswith("/state")]) == 36


def test_replay_throughput(runner, ingest, tmp_path):
    from hhmon.core import CounterState, DataPoint, EventKind, compute_rate

    trace = tmp_path / "big.jsonl"
    with open(trace, "w") as fh:
        for i in range(1, 10_001):
            c = CounterState(accesses=i, occupancy=i, opportunities=2 * i)
            fh.write(encode_text(DataPoint(i, "bulk", i * 1000, EventKind.ACCESS, c, compute_rate(c))) + "\n")
    start = time.monotonic()
    res = invoke(runner, "replay", "--trace", trace, "--target", ingest.url, "--rate", 1000)
    elapsed = time.monotonic() - start
    assert res.exit_code == 0 and "accepted=10000" in res.stderr
    assert elapsed < 60
    assert ingest.service.summary("bulk").accesses == 10_000


# -- report -------------------------------------------------------------------------------


def test_report_fig7_table(runner):
    res = invoke(runner, "report", "--source", data.path("fig7.jsonl"))
    assert res.exit_code == 0
    out = res.stdout
    for label, value in [("Accesses", "12"), ("Exits", "10"), ("HH opportunities", "24"),
                         ("Complete HH", "13"), ("Occupants", "2"), ("Current HH rate", "54.17%")]:
        assert any(label in line and line.rstrip().endswith(value) for line in out.splitlines())


def test_report_table2_rows(runner):
    res = invoke(runner, "report", "--source", data.path("table2.jsonl"), "--locale", "br")
    lines = res.stdout.splitlines()
    row = next(line for line in lines if line.startswith("21/11/2023 09:44:40"))
    assert row.split()[2:8] == ["100,00%", "2", "2", "1", "0", "1"]
    assert any(line.startswith("21/11/2023 10:32:43") and "38,89%" in line for line in lines)


def test_report_unknown_device(runner):
    res = invoke(runner, "report", "--source", data.path("fig7.jsonl"), "--device", "ghost")
    assert res.exit_code == 3


def test_report_missing_source(runner, tmp_path):
    assert invoke(runner, "report", "--source", tmp_path / "nope").exit_code == 1


def test_report_empty_device(runner, tmp_path):
    d = tmp_path / "dd" / "devices" / "idle-1"
    d.mkdir(parents=True)
    (d / "gen-0001.jsonl").write_text("")
    res = invoke(runner, "report", "--source", tmp_path / "dd", "--device", "idle-1")
    assert res.exit_code == 0
    assert "Current HH rate    -" in res.stdout
    assert "Accesses           0" in res.stdout


def test_report_json_matches_http_summary(runner, ingest):
    invoke(runner, "replay", "--trace", data.path("fig7.jsonl"), "--target", ingest.url)
    res = invoke(runner, "report", "--source", ingest.url, "--device", DEV, "--format", "json")
    with urllib.request.urlopen(f"{ingest.url}/api/v1/devices/{DEV}/summary") as r:
        assert json.loads(res.stdout) == json.load(r)
    table = invoke(runner, "report", "--source", ingest.url).stdout
    assert len([line for line in table.splitlines() if line.startswith("21/11/2023 ")]) == 36


def test_unknown_flag(runner):
    assert runner.invoke(main, ["report", "--colour"]).exit_code == 2


# -- serve (real process) ----------------------------------------------------------------------


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def start_serve(data_dir, port, *extra):
    proc = subprocess.Popen(
        [sys.executable, "-m", "hhmon.cli", "serve", "--data-dir", str(data_dir), "--http", f"127.0.0.1:{port}", *extra],
        stderr=subprocess.PIPE, text=True,
    )
    deadline = time.monotonic() + 15
    while time.monotonic() < deadline:
        try:
            with urllib.request.urlopen(f"http://127.0.0.1:{port}/healthz", timeout=1) as r:
                if r.status == 200:
                    return proc
        except OSError:
            if proc.poll() is not None:
                break
            time.sleep(0.1)
    proc.kill()
    raise RuntimeError(proc.stderr.read())


def stop_serve(proc):
    proc.send_signal(signal.SIGTERM)
    assert proc.wait(10) == 0


def test_serve_restart_keeps_summary(tmp_path):
    port = free_port()
    url = f"http://127.0.0.1:{port}"
    proc = start_serve(tmp_path, port)
    try:
        line = data.read_text("fig7.jsonl").splitlines()[0].encode()
        req = urllib.request.Request(url + "/api/v1/ingest", data=line, method="POST")
        with urllib.request.urlopen(req) as r:
            assert json.load(r) == {"status": "accepted"}
        with urllib.request.urlopen(f"{url}/api/v1/devices/{DEV}/summary") as r:
            before = json.load(r)
        assert before["accesses"] == 1
    finally:
        stop_serve(proc)
    proc = start_serve(tmp_path, port)
    try:
        with urllib.request.urlopen(f"{url}/api/v1/devices/{DEV}/summary") as r:
            assert json.load(r) == before
    finally:
        stop_serve(proc)


def test_serve_bind_failure(tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        port = s.getsockname()[1]
        res = subprocess.run(
            [sys.executable, "-m", "hhmon.cli", "serve", "--data-dir", str(tmp_path), "--http", f"127.0.0.1:{port}"],
            capture_output=True, text=True, timeout=20,
        )
    assert res.returncode == 1 and "cannot listen" in res.stderr


def test_serve_with_mqtt(tmp_path):
    port = free_port()
    with MiniBroker() as broker:
        env_proc = start_serve(tmp_path, port, "--mqtt", broker.url)
        try:
            deadline = time.monotonic() + 10
            while not any(s.subs for s in list(broker._sessions)) and time.monotonic() < deadline:
                time.sleep(0.05)
            runner = CliRunner()
            assert invoke(runner, "replay", "--trace", data.path("table2.jsonl"), "--target", broker.url).exit_code == 0
            url = f"http://127.0.0.1:{port}/api/v1/devices/{DEV}/summary"
            while time.monotonic() < deadline + 10:
                try:
                    with urllib.request.urlopen(url) as r:
                        if json.load(r)["sanitizations"] == 7:
                            break
                except OSError:
                    pass
                time.sleep(0.1)
            with urllib.request.urlopen(url) as r:
                assert json.load(r)["current_rate_percent"] == 38.89
        finally:
            stop_serve(env_proc)


def test_serve_corrupt_log(tmp_path):
    d = tmp_path / "devices" / DEV
    d.mkdir(parents=True)
    lines = data.read_text("table2.jsonl").splitlines()
    lines[1] = "{broken"
    (d / "gen-0001.jsonl").write_text("\n".join(lines) + "\n")
    res = subprocess.run(
        [sys.executable, "-m", "hhmon.cli", "serve", "--data-dir", str(tmp_path), "--http", f"127.0.0.1:{free_port()}"],
        capture_output=True, text=True, timeout=20, env={**os.environ},
    )
    assert res.returncode == 1 and "gen-0001.jsonl" in res.stderr
