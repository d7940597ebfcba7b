"""CLI surface: argument wiring, in-process status/bench/manifest paths,
and one subprocess round trip of the long-running daemons."""

import signal
import subprocess
import sys
import time

import pytest

from hubstream.cli import build_parser, main
from hubstream.server import MiddlewareServer
from hubstream.wrapper import Strategy

MANIFEST = """\
const  name=temp   type=double period_ms=50 mean=20.0
ticker name=status type=string period_ms=200
"""


@pytest.fixture
def manifest(tmp_path):
    path = tmp_path / "manifest.txt"
    path.write_text(MANIFEST)
    return path


class TestParser:
    def test_requires_a_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_server_defaults(self):
        args = build_parser().parse_args(["server"])
        assert args.control_port == 7001
        assert args.data_ports == "7100-7199"
        assert args.strategy == "dgcw"

    def test_hub_run_wiring(self):
        args = build_parser().parse_args(
            ["hub", "run", "--server", "10.0.0.5:7001", "--manifest", "m.txt",
             "--filter", "delta:0.5", "--grace-ms", "5000"]
        )
        assert args.server == ("10.0.0.5", 7001)
        assert args.filter == "delta:0.5"
        assert args.grace_ms == 5000

    def test_bad_hostport_rejected(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["hub", "run", "--server", "nocolon", "--manifest", "m"])

    @pytest.mark.parametrize(
        "scenario", ["decode", "config", "storage", "plugin-storage", "energy", "e2e"]
    )
    def test_every_bench_scenario_exists_and_wants_out(self, scenario):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["bench", scenario])
        args = build_parser().parse_args(["bench", scenario, "--out", "x.csv"])
        assert args.scenario == scenario


class TestPluginsList:
    def test_lists_manifest_contents(self, manifest, capsys):
        assert main(["hub", "plugins", "list", "--manifest", str(manifest)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "name\tkind\ttype\tperiod_ms"
        assert out[1] == "temp\tconst\tdouble\t50"
        assert out[2] == "status\tticker\tstring\t200"

    def test_bad_manifest_reports_error(self, tmp_path, capsys):
        path = tmp_path / "bad.txt"
        path.write_text("teleport name=x period_ms=1\n")
        assert main(["hub", "plugins", "list", "--manifest", str(path)]) == 1
        assert "unknown plugin kind" in capsys.readouterr().err


class TestBenchCommand:
    def test_energy_writes_csv_and_prints_footnotes(self, tmp_path, capsys):
        out = tmp_path / "energy.csv"
        code = main(
            ["bench", "energy", "--rates", "1,2", "--policies", "none",
             "--duration", "10", "--out", str(out)]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "scenario,metric,unit,x,median,min,max,reps"
        assert len(lines) == 5  # header + (bytes, records) x 2 rates
        printed = capsys.readouterr().out
        assert "# environment:" in printed
        assert str(out) in printed

    def test_decode_small_run(self, tmp_path):
        out = tmp_path / "decode.csv"
        code = main(
            ["bench", "decode", "--fields", "4", "--records", "1000",
             "--reps", "2", "--out", str(out)]
        )
        assert code == 0
        assert "dgcw_decode" in out.read_text()


class TestStatusCommand:
    def test_queries_live_server(self, tmp_path, capsys):
        srv = MiddlewareServer(
            tmp_path, Strategy.DGCW, control_port=0, port_range=(17400, 17410)
        ).start()
        try:
            code = main(
                ["server", "status", "--control-port", str(srv.control_port)]
            )
        finally:
            srv.stop()
        assert code == 0
        assert capsys.readouterr().out.startswith("hub_id,state,records_decoded")

    def test_unknown_hub_reports_refusal(self, tmp_path, capsys):
        srv = MiddlewareServer(
            tmp_path, Strategy.DGCW, control_port=0, port_range=(17400, 17410)
        ).start()
        try:
            code = main(
                ["server", "status", "--control-port", str(srv.control_port),
                 "--hub", "ghost"]
            )
        finally:
            srv.stop()
        assert code == 1
        assert "refused" in capsys.readouterr().err

    def test_dead_server_is_an_error(self, capsys):
        assert main(["server", "status", "--control-port", "1"]) == 1
        assert "cannot query" in capsys.readouterr().err

    def test_window_needs_hub(self, capsys):
        assert main(["server", "status", "--window"]) == 2


class TestDaemonRoundTrip:
    def test_server_and_hub_processes_stream_and_shut_down(self, tmp_path, manifest):
        store = tmp_path / "store"
        server_proc = subprocess.Popen(
            [sys.executable, "-m", "hubstream.cli", "server", "--store", str(store),
             "--control-port", "17501", "--data-ports", "17510-17540"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
        )
        hub_proc = None
        try:
            time.sleep(0.8)
            assert server_proc.poll() is None, server_proc.stdout.read()
            hub_proc = subprocess.Popen(
                [sys.executable, "-m", "hubstream.cli", "hub", "run",
                 "--server", "127.0.0.1:17501", "--manifest", str(manifest),
                 "--hub-id", "proc_hub"],
                stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
            )
            time.sleep(2.0)
            assert hub_proc.poll() is None, hub_proc.stdout.read()
            status = subprocess.run(
                [sys.executable, "-m", "hubstream.cli", "server", "status",
                 "--control-port", "17501", "--hub", "proc_hub"],
                capture_output=True, text=True, timeout=10,
            )
            assert status.returncode == 0, status.stderr
            header = status.stdout.splitlines()[0]
            assert header == "hub_id,sequence,timestamp_ms,temp,status"
        finally:
            for proc in (hub_proc, server_proc):
                if proc is None:
                    continue
                proc.send_signal(signal.SIGINT)
                try:
                    proc.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    proc.kill()
        assert "frames_sent=" in hub_proc.stdout.read()
