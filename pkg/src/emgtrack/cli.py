"""Command-line pipeline: generate -> train -> infer -> eval, plus serve, replay and selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import InvalidInputError, __version__
from .features import sliding_windows
from .fusion import ProtocolError, StreamPairing, _num
from .handsim import CONDITIONS, SPEEDS, TASKS, SessionRecording, TaskScript, generate_session
from .model import (CheckpointError, ConfigError, ModelConfig, WindowDataset, build_model,
                    load_checkpoint, save_checkpoint, train)
from .neuralcore import NonFiniteError

log = logging.getLogger("emgtrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

# documented default seeds
DEFAULT_SESSION_SEED = 0
DEFAULT_TRAIN_SEED = 0
DEFAULT_MODEL_SEED = 0
DEFAULT_STATS_SEED = 0

PRED_HEADER = ["t_ms"] + [f"angle_{i}" for i in range(8)]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers ---------------------------------------------------------------------------

def _recording_paths(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.glob("*.csv") if not q.name.endswith(".pred.csv")))
        elif p.is_file():
            out.append(p)
        else:
            raise InvalidInputError(f"no such file or directory: {p}")
    if not out:
        raise InvalidInputError("no recordings found")
    return out


def _writable_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create output directory {p}: {exc}") from exc
    return p


def predictions_csv(timestamps, angles) -> str:
    """Prediction table; numbers are shortest round-trip decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PRED_HEADER)
    for t, row in zip(timestamps, angles):
        writer.writerow([str(int(t))] + [_num(v) for v in row])
    return buf.getvalue()


def load_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise InvalidInputError(f"cannot read predictions {path}: {exc}") from exc
    if header != PRED_HEADER:
        raise InvalidInputError(f"{path}: unexpected header")
    data = np.array(rows, dtype=np.float64).reshape(len(rows), 9)
    return data[:, 0].astype(np.int64), data[:, 1:]


def infer_recording(model, recording: SessionRecording) -> tuple[np.ndarray, np.ndarray]:
    """Angles for every complete window, stamped with the window's last sample time."""
    n = model.config.n
    if len(recording) < n:
        return recording.timestamps[:0], np.empty((0, 8))
    windows = sliding_windows(recording.emg, n)
    return recording.timestamps[n - 1:], model.predict(windows)


# -- subcommands ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = _writable_dir(args.out)
    tasks = args.task or list(TASKS)
    speeds = args.speed or list(SPEEDS)
    conditions = args.condition or list(CONDITIONS)
    count = 0
    for task in tasks:
        for speed in speeds:
            for cond in conditions:
                for s in range(args.sessions):
                    script = TaskScript(task, speed, args.repetitions, cond, args.seed + s)
                    generate_session(script).save(out / f"{script.name}.csv")
                    count += 1
    print(f"wrote {count} recordings to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    paths = _recording_paths(args.data)
    dataset = WindowDataset()
    for p in paths:
        rec = SessionRecording.load(p)
        dataset.add(rec.emg, rec.truth)
    config = ModelConfig(lstm_hidden=args.lstm_hidden, seed=args.model_seed)
    model = build_model(config)
    out = Path(args.out)
    _writable_dir(out.parent)
    state = Path(args.state) if args.state else out.with_name(out.name + ".state")
    report = train(model, dataset, max_steps=args.max_steps, target_deg=args.target_deg,
                   batch_size=args.batch_size, eval_every=args.eval_every, seed=args.seed,
                   state_path=state)
    save_checkpoint(model, out, {"steps": report.steps, "val_error_deg": report.final_val_deg})
    summary = {
        "steps": report.steps, "val_error_deg": report.final_val_deg,
        "reached_target": report.reached_target, "train_windows": report.train_windows,
        "val_windows": report.val_windows, "val_history": report.val_history,
    }
    print(json.dumps(summary))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = _writable_dir(args.out)
    for p in _recording_paths(args.data):
        times, angles = infer_recording(model, SessionRecording.load(p))
        (out / f"{p.stem}.pred.csv").write_text(predictions_csv(times, angles))
        log.info("%s: %d windows", p.name, len(times))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .stats import EvalItem, render_report, summarize
    pred_dir = Path(args.predictions)
    items = []
    for p in _recording_paths(args.data):
        rec = SessionRecording.load(p)
        pred_path = pred_dir / f"{p.stem}.pred.csv"
        if not pred_path.exists():
            log.warning("no predictions for %s; its task/condition may show as missing", p.name)
            continue
        times, angles = load_predictions(pred_path)
        k = len(times)
        if k and not np.array_equal(times, rec.timestamps[-k:]):
            raise InvalidInputError(f"{pred_path.name} is not aligned with {p.name}")
        task, cond = rec.meta.get("task"), rec.meta.get("condition")
        if task not in TASKS or cond not in CONDITIONS:
            raise InvalidInputError(f"{p.name}: sidecar lacks task/condition metadata")
        items.append(EvalItem(task, cond, rec.truth, rec.vision, angles, rec.occluded))
    rows = summarize(items, args.task or list(TASKS), args.condition or list(CONDITIONS), seed=args.seed)
    paths = render_report(rows, _writable_dir(args.out))
    if args.plot:
        from .plotting import plot_deviations
        paths.append(plot_deviations(rows, Path(args.out) / "deviations.png"))
    sys.stdout.write(Path(paths[1]).read_text())
    return EXIT_OK


def cmd_serve(args) -> int:
    from .fusion import FusionServer
    model = load_checkpoint(args.checkpoint)
    pairing = StreamPairing(args.tolerance_ms, args.queue)
    try:
        server = FusionServer(model, args.emg_port, args.vision_port, args.out_port, pairing, host=args.host)
    except OSError as exc:
        raise InvalidInputError(f"cannot bind ports: {exc}") from exc
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    server.start()
    ports = server.ports
    log.info("serving: emg %d, vision %d, out %d", ports["emg"], ports["vision"], ports["out"])
    print(json.dumps({"ports": ports}), flush=True)
    while not done.wait(0.2):
        pass
    print(json.dumps(server.stop()), flush=True)
    return EXIT_OK


def cmd_replay(args) -> int:
    from .fusion import encode_pose, replay
    rec = SessionRecording.load(args.recording)
    ports = {"emg": args.emg_port, "vision": args.vision_port, "out": args.out_port}
    try:
        fused = replay(rec, ports, host=args.host, rate_hz=args.rate)
    except OSError as exc:
        raise InvalidInputError(f"cannot reach server: {exc}") from exc
    text = "".join(encode_pose(s) for s in fused)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("received %d fused frames", len(fused))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    results = run_selftest()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_INTERNAL


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emgtrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write simulated recordings")
    g.add_argument("--out", required=True)
    g.add_argument("--task", action="append", choices=TASKS)
    g.add_argument("--speed", action="append", choices=list(SPEEDS))
    g.add_argument("--condition", action="append", choices=CONDITIONS)
    g.add_argument("--sessions", type=int, default=3)
    g.add_argument("--seed", type=int, default=DEFAULT_SESSION_SEED, help="first session seed")
    g.add_argument("--repetitions", type=int, default=8)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the angle model")
    t.add_argument("--data", nargs="+", required=True, help="recording files or directories")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--max-steps", type=int, default=50_000)
    t.add_argument("--target-deg", type=float, default=1.0)
    t.add_argument("--eval-every", type=int, default=500)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--lstm-hidden", type=int, default=128)
    t.add_argument("--seed", type=int, default=DEFAULT_TRAIN_SEED, help="batch sampling seed")
    t.add_argument("--model-seed", type=int, default=DEFAULT_MODEL_SEED, help="initialization seed")
    t.add_argument("--state", help="periodic training state, resumed if present (default: <out>.state)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict angles for every window of each recording")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", nargs="+", required=True)
    i.add_argument("--out", required=True, help="directory for <recording>.pred.csv files")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="compare vision and multimodal deviation")
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--task", action="append", choices=TASKS)
    e.add_argument("--condition", action="append", choices=CONDITIONS)
    e.add_argument("--seed", type=int, default=DEFAULT_STATS_SEED, help="Shapiro-Wilk subsampling seed")
    e.add_argument("--plot", action="store_true", help="also write deviations.png")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="run the fusion server until SIGINT/SIGTERM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--emg-port", type=int, default=5001)
    s.add_argument("--vision-port", type=int, default=5002)
    s.add_argument("--out-port", type=int, default=5003)
    s.add_argument("--tolerance-ms", type=int, default=10)
    s.add_argument("--queue", type=int, default=64)
    s.add_argument("--host", default="127.0.0.1")
    s.set_defaults(func=cmd_serve)

    r = sub.add_parser("replay", help="stream a recording to a running server")
    r.add_argument("--recording", required=True)
    r.add_argument("--emg-port", type=int, default=5001)
    r.add_argument("--vision-port", type=int, default=5002)
    r.add_argument("--out-port", type=int, default=5003)
    r.add_argument("--host", default="127.0.0.1")
    r.add_argument("--rate", type=float, default=50.0)
    r.add_argument("--out", help="file for received fused frames (default stdout)")
    r.set_defaults(func=cmd_replay)

    st = sub.add_parser("selftest", help="run the oracle battery")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"emgtrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, ConfigError) as exc:
        # InvalidInputError, ProtocolError and ConfigError are ValueErrors
        print(f"emgtrack: error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, (InvalidInputError, ProtocolError)) else EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        print(f"emgtrack: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"emgtrack: training diverged: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"emgtrack: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
