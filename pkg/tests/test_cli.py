import json
import signal
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from emgtrack.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_predictions, main
from emgtrack.handsim import SessionRecording

TRAIN_ARGS = ["--max-steps", "2", "--eval-every", "1", "--batch-size", "8", "--lstm-hidden", "4"]


def _files(d: Path):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One small recording set, a two-step checkpoint and its predictions."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "data"), "--task", "ii", "--speed", "fast",
                 "--condition", "occluded", "--sessions", "1", "--repetitions", "12"]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "m.json"), *TRAIN_ARGS]) == EXIT_OK
    assert main(["infer", "--checkpoint", str(root / "m.json"), "--data", str(root / "data"),
                 "--out", str(root / "pred")]) == EXIT_OK
    return root


def test_generate_default_count(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--repetitions", "1"]) == EXIT_OK
    assert len(list(tmp_path.glob("*.csv"))) == 108
    assert len(list(tmp_path.glob("*.json"))) == 108


def test_generate_filtered_count_and_bytes(tmp_path):
    args = ["generate", "--task", "ii", "--condition", "occluded", "--repetitions", "2"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    a = _files(tmp_path / "a")
    assert len([n for n in a if n.endswith(".csv")]) == 9
    assert a == _files(tmp_path / "b")


def test_train_writes_checkpoint_and_is_reproducible(work, tmp_path, capsys):
    assert main(["train", "--data", str(work / "data"), "--out", str(tmp_path / "m.json"), *TRAIN_ARGS]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 2 and summary["train_windows"] > 0
    assert (tmp_path / "m.json").read_bytes() == (work / "m.json").read_bytes()
    doc = json.loads((work / "m.json").read_text())
    assert doc["training"]["steps"] == 2


def test_infer_row_count(work):
    rec_path = next((work / "data").glob("*.csv"))
    rec = SessionRecording.load(rec_path)
    times, angles = load_predictions(work / "pred" / f"{rec_path.stem}.pred.csv")
    assert len(times) == len(rec) - 150 + 1
    assert angles.shape == (len(times), 8)
    np.testing.assert_array_equal(times, rec.timestamps[149:])
    header = (work / "pred" / f"{rec_path.stem}.pred.csv").read_text().splitlines()[0]
    assert header == "t_ms," + ",".join(f"angle_{j}" for j in range(8))


def test_infer_and_eval_are_byte_identical(work, tmp_path, capsys):
    assert main(["infer", "--checkpoint", str(work / "m.json"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "pred")]) == EXIT_OK
    assert _files(tmp_path / "pred") == _files(work / "pred")
    for out in ("r1", "r2"):
        assert main(["eval", "--data", str(work / "data"), "--predictions", str(work / "pred"),
                     "--out", str(tmp_path / out), "--task", "ii", "--condition", "occluded", "--plot"]) == EXIT_OK
    assert _files(tmp_path / "r1") == _files(tmp_path / "r2")
    assert set(_files(tmp_path / "r1")) == {"results.csv", "summary.txt", "deviations.png"}
    rows = (tmp_path / "r1" / "results.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("ii,occluded,")
    assert "P-values" in capsys.readouterr().out


def test_eval_marks_missing_tasks(work, tmp_path):
    assert main(["eval", "--data", str(work / "data"), "--predictions", str(work / "pred"),
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 12
    assert sum(r.endswith(",NA,NA,NA,NA,NA,NA,NA,NA") for r in rows) == 11


def test_eval_rejects_misaligned_predictions(work, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for p in (work / "pred").iterdir():
        lines = p.read_text().splitlines()
        (pred / p.name).write_text("\n".join([lines[0], *lines[2:]]) + "\n")
        lines[1] = "1," + lines[1].split(",", 1)[1]
        (pred / p.name).write_text("\n".join(lines) + "\n")
    assert main(["eval", "--data", str(work / "data"), "--predictions", str(pred),
                 "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_exit_codes(work, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["generate", "--out", str(tmp_path), "--task", "ix"]) == EXIT_USAGE
    assert main(["infer", "--checkpoint", str(tmp_path / "missing.json"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "p")]) == EXIT_DATA
    (tmp_path / "bad.json").write_text("{")
    assert main(["infer", "--checkpoint", str(tmp_path / "bad.json"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "p")]) == EXIT_DATA
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "m.json")]) == EXIT_DATA


def _cli(*args, **kw):
    return subprocess.Popen([sys.executable, "-m", "emgtrack", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True, **kw)


def test_serve_replay_and_sigterm(work, tmp_path):
    # a deep queue keeps this check independent of CPU load at the accelerated replay rate
    server = _cli("serve", "--checkpoint", str(work / "m.json"), "--emg-port", "0", "--vision-port", "0",
                  "--out-port", "0", "--queue", "4096")
    try:
        ports = json.loads(server.stdout.readline())["ports"]
        rec = next((work / "data").glob("*.csv"))
        replay = subprocess.run([sys.executable, "-m", "emgtrack", "replay", "--recording", str(rec),
                                 "--emg-port", str(ports["emg"]), "--vision-port", str(ports["vision"]),
                                 "--out-port", str(ports["out"]), "--rate", "200",
                                 "--out", str(tmp_path / "fused.ndjson")], capture_output=True, timeout=120)
        assert replay.returncode == EXIT_OK, replay.stderr
        server.send_signal(signal.SIGTERM)
        out, _ = server.communicate(timeout=30)
    finally:
        if server.poll() is None:
            server.kill()
    assert server.returncode == EXIT_OK
    counters = json.loads(out.strip().splitlines()[-1])
    assert {"ticks", "pairs", "skips", "drops", "p50_ms", "p99_ms"} <= set(counters)
    fused = (tmp_path / "fused.ndjson").read_text().splitlines()
    assert counters["pairs"] == len(fused) == len(SessionRecording.load(rec)) - 149
    pred = load_predictions(work / "pred" / f"{rec.stem}.pred.csv")[1]
    np.testing.assert_array_equal(np.array([json.loads(ln)["angles"] for ln in fused]), pred)


def test_serve_port_in_use_is_data_error(work):
    import socket
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    try:
        proc = _cli("serve", "--checkpoint", str(work / "m.json"), "--emg-port", str(blocker.getsockname()[1]),
                    "--vision-port", "0", "--out-port", "0")
        proc.communicate(timeout=60)
    finally:
        blocker.close()
    assert proc.returncode == EXIT_DATA


def test_selftest_exit_zero():
    proc = _cli("selftest")
    out, err = proc.communicate(timeout=600)
    assert proc.returncode == EXIT_OK, out + err
    assert "10/10 checks passed" in out


def test_module_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "emgtrack", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
