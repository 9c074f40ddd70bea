import socket
import threading
from pathlib import Path

import pytest

from trctee import cli

SCENARIOS = Path(__file__).parent.parent / "scenarios"


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture
def store(tmp_path):
    return str(tmp_path / "store")


class TestEnrollmentCommands:
    def test_enroll_provision_flow(self, store, capsys):
        assert run_cli("--store", store, "--seed", "3", "enroll-device", "--id", "dev1") == 0
        assert run_cli("--store", store, "--seed", "3", "enroll-vtpm", "--user", "alice") == 0
        assert run_cli("--store", store, "provision", "--user", "alice", "--device", "dev1") == 0
        out = capsys.readouterr().out
        assert "enrolled" in out and "provisioned" in out
        root = Path(store)
        assert (root / "registry.txt").exists()
        assert (root / "device_dev1.txt").exists()
        assert (root / "user_alice.txt").exists()
        assert (root / "crps_user_alice.txt").exists()

    def test_duplicate_device_enrollment_fails(self, store):
        run_cli("--store", store, "enroll-device", "--id", "dev1")
        from trctee import ttp

        with pytest.raises(ttp.DuplicateDevice):
            run_cli("--store", store, "enroll-device", "--id", "dev1")


class TestRunCommand:
    def test_baseline_scenario(self, store, capsys):
        rc = run_cli("--seed", "5", "run", str(SCENARIOS / "baseline.txt"))
        assert rc == 0
        out = capsys.readouterr().out
        assert "all 24 registers verified" in out
        assert "overall: VERIFIED" in out

    def test_adversary_scenario(self, store):
        rc = run_cli("--seed", "5", "run", str(SCENARIOS / "adversary_swap_cert.txt"))
        assert rc == 0

    def test_parse_error_exit_2(self, store, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("not a scenario\n")
        assert run_cli("run", str(bad)) == 2

    def test_tcp_transport_flag(self, store):
        rc = run_cli("--seed", "5", "run", str(SCENARIOS / "baseline.txt"), "--transport", "tcp")
        assert rc == 0


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestTransportErrors:
    def test_connect_to_closed_port(self):
        from trctee import transport

        with pytest.raises(transport.ConnectError):
            transport.connect("127.0.0.1", free_port(), timeout=0.5)


class TestServeConnectVerify:
    def test_two_endpoint_session_over_tcp(self, store, capsys):
        run_cli("--store", store, "--seed", "3", "enroll-device", "--id", "dev1")
        run_cli("--store", store, "--seed", "3", "enroll-vtpm", "--user", "alice")
        run_cli("--store", store, "provision", "--user", "alice", "--device", "dev1")

        port = free_port()
        results = {}

        def serve():
            results["serve"] = run_cli(
                "--store", store, "--seed", "3",
                "serve", "--listen", f"127.0.0.1:{port}", "--device", "dev1",
                "--timeout", "10",
            )

        server = threading.Thread(target=serve, daemon=True)
        server.start()

        import time

        deadline = time.time() + 5
        rc = None
        while time.time() < deadline:
            try:
                rc = run_cli(
                    "--store", store, "--seed", "4",
                    "connect", "--addr", f"127.0.0.1:{port}", "--user", "alice",
                )
                break
            except Exception:
                time.sleep(0.1)
        server.join(timeout=10)
        assert rc == 0
        out = capsys.readouterr().out
        assert "xor round-trip ok" in out
        assert "overall: VERIFIED" in out

        # The exported log verifies offline through the verify subcommand.
        log_path = Path(store) / "eventlog_alice.txt"
        assert log_path.exists()
        assert run_cli("--store", store, "verify", str(log_path), "--user", "alice") == 0

    def test_verify_detects_forged_log(self, store, capsys):
        run_cli("--store", store, "--seed", "3", "enroll-device", "--id", "dev1")
        run_cli("--store", store, "--seed", "3", "enroll-vtpm", "--user", "alice")
        run_cli("--store", store, "provision", "--user", "alice", "--device", "dev1")
        # Hand-build a log that disagrees with the golden manifest.
        log_path = Path(store) / "forged.txt"
        log_path.write_text("0, 0, BootComponent, fsbl, " + "ab" * 48 + "\n")
        rc = run_cli("--store", store, "verify", str(log_path), "--user", "alice")
        assert rc == 1
        assert "Mismatch" in capsys.readouterr().out
