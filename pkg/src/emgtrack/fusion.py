"""Streaming runtime: pairs sEMG ticks with vision poses and emits fused hand poses.

Wire protocol: one JSON object per line over TCP, keys in fixed order,
numbers in plain decimal notation.

    {"t": 20, "kind": "emg", "ch": [c0, ..., c7]}
    {"t": 20, "kind": "pose", "root_p": [x, y, z], "root_q": [w, x, y, z], "angles": [a0, ..., a7]}
    {"t": 20, "kind": "fused", "root_p": [...], "root_q": [...], "angles": [...]}

Two ingest threads parse lines into bounded drop-oldest queues; a single
fusion thread pairs, runs inference and writes to every connected output
client. Ingest never waits on fusion.
"""
from __future__ import annotations

import bisect
import collections
import json
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import TICK_MS

log = logging.getLogger(__name__)

SOURCES = ("truth", "vision", "multimodal")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class PoseSample:
    t: int
    source: str
    root_position: tuple
    root_orientation: tuple
    angles: tuple

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if len(self.root_position) != 3 or len(self.root_orientation) != 4 or len(self.angles) != 8:
            raise ValueError("pose sample needs 3 position, 4 quaternion and 8 angle values")
        norm = math.sqrt(sum(q * q for q in self.root_orientation))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"root orientation is not a unit quaternion (norm {norm})")


@dataclass(frozen=True)
class EmgFrame:
    t: int
    ch: tuple


@dataclass(frozen=True)
class StreamPairing:
    tolerance_ms: int = 10
    queue_capacity: int = 64

    def __post_init__(self):
        if self.tolerance_ms < 0 or self.queue_capacity < 1:
            raise ValueError("tolerance must be >= 0 and queue capacity >= 1")


# -- encoding ------------------------------------------------------------------

def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ProtocolError("non-finite number")
    return np.format_float_positional(x, unique=True, trim="0")


def _arr(values) -> str:
    return "[" + ", ".join(_num(v) for v in values) + "]"


def encode_emg(frame: EmgFrame) -> str:
    return f'{{"t": {int(frame.t)}, "kind": "emg", "ch": {_arr(frame.ch)}}}\n'


def encode_pose(sample: PoseSample, kind: str | None = None) -> str:
    kind = kind or ("fused" if sample.source == "multimodal" else "pose")
    return (f'{{"t": {int(sample.t)}, "kind": "{kind}", "root_p": {_arr(sample.root_position)}, '
            f'"root_q": {_arr(sample.root_orientation)}, "angles": {_arr(sample.angles)}}}\n')


_KEYS = {
    "emg": ["t", "kind", "ch"],
    "pose": ["t", "kind", "root_p", "root_q", "angles"],
    "fused": ["t", "kind", "root_p", "root_q", "angles"],
}
_LENGTHS = {"ch": 8, "root_p": 3, "root_q": 4, "angles": 8}


def _reject_constant(name):
    raise ProtocolError(f"non-decimal number {name}")


def decode(line: str | bytes):
    """Parse one frame into an :class:`EmgFrame` or :class:`PoseSample`."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("frame is not UTF-8") from exc
    try:
        doc = json.loads(line, parse_constant=_reject_constant)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("frame must be an object")
    kind = doc.get("kind")
    if kind not in _KEYS:
        raise ProtocolError(f"unknown frame kind {kind!r}")
    if list(doc) != _KEYS[kind]:
        raise ProtocolError(f"{kind} frame keys must be exactly {_KEYS[kind]} in order")
    t = doc["t"]
    if not isinstance(t, int) or isinstance(t, bool):
        raise ProtocolError("t must be an integer")
    arrays = {}
    for key in _KEYS[kind][2:]:
        vals = doc[key]
        if (not isinstance(vals, list) or len(vals) != _LENGTHS[key]
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals)):
            raise ProtocolError(f"{key} must be a list of {_LENGTHS[key]} numbers")
        arrays[key] = tuple(float(v) for v in vals)
    if kind == "emg":
        return EmgFrame(t, arrays["ch"])
    try:
        return PoseSample(t, "vision" if kind == "pose" else "multimodal",
                          arrays["root_p"], arrays["root_q"], arrays["angles"])
    except ValueError as exc:
        raise ProtocolError(str(exc)) from exc


# -- fusion ---------------------------------------------------------------------

def fuse(vision: PoseSample, model_angles, t: int) -> PoseSample:
    """Root pose from vision, fingers from the model; vision finger angles are ignored."""
    return PoseSample(int(t), "multimodal", tuple(vision.root_position), tuple(vision.root_orientation),
                      tuple(float(a) for a in model_angles))


def nearest_within(times: Sequence[int], t: int, tolerance: int) -> int | None:
    """Index of the timestamp nearest ``t`` within tolerance (earlier wins ties)."""
    i = bisect.bisect_left(times, t)
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(times) and abs(times[j] - t) <= tolerance:
            if best is None or abs(times[j] - t) < abs(times[best] - t):
                best = j
    return best


@dataclass
class PairingResult:
    pairs: list  # (window N x C array, emg t, vision PoseSample)
    skipped: int = 0
    warmup: int = 0


def pair_streams(emg: Iterable[EmgFrame], vision: Sequence[PoseSample], n: int,
                 pairing: StreamPairing = StreamPairing()) -> PairingResult:
    """Offline pairing on a shared clock.

    Every emg tick with at least ``n`` samples accumulated pairs with the
    nearest vision sample within tolerance; ticks without one are skipped.
    """
    vision = sorted(vision, key=lambda s: s.t)
    times = [s.t for s in vision]
    buf: collections.deque = collections.deque(maxlen=n)
    out = PairingResult([])
    for frame in emg:
        buf.append(frame.ch)
        if len(buf) < n:
            out.warmup += 1
            continue
        j = nearest_within(times, frame.t, pairing.tolerance_ms)
        if j is None:
            out.skipped += 1
            continue
        out.pairs.append((np.array(buf, dtype=np.float64), frame.t, vision[j]))
    return out


class DropOldestQueue:
    """Bounded FIFO; a full queue discards its oldest item instead of blocking."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self.dropped = 0

    def put(self, item):
        with self._cond:
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: float | None = None):
        with self._cond:
            if not self._items and not self._cond.wait_for(lambda: self._items, timeout):
                return None
            return self._items.popleft()

    def __len__(self):
        with self._cond:
            return len(self._items)


@dataclass
class Counters:
    received: int = 0   # valid emg frames plus malformed lines on either port
    vision_received: int = 0
    ticks: int = 0      # emg frames taken off the queue
    pairs: int = 0
    skips: int = 0      # warm-up, unpaired, out-of-order and malformed
    drops: int = 0      # emg frames evicted from a full queue
    vision_drops: int = 0
    malformed: int = 0
    unpaired: int = 0
    warmup: int = 0
    processing_ms: list = field(default_factory=list)

    def summary(self) -> dict:
        ms = np.array(self.processing_ms) if self.processing_ms else np.zeros(1)
        return {
            "received": self.received, "vision_received": self.vision_received, "ticks": self.ticks,
            "pairs": self.pairs, "skips": self.skips, "drops": self.drops,
            "vision_drops": self.vision_drops, "malformed": self.malformed,
            "unpaired": self.unpaired, "warmup": self.warmup,
            "p50_ms": round(float(np.percentile(ms, 50)), 4),
            "p99_ms": round(float(np.percentile(ms, 99)), 4),
            "max_ms": round(float(ms.max()), 4),
        }


class FusionEngine:
    """Pairing, inference and fusion for one stream; no I/O, no threads."""

    def __init__(self, model, pairing: StreamPairing = StreamPairing(), history: int = 256):
        self.model = model
        self.pairing = pairing
        self.n = model.config.n
        self.buffer: collections.deque = collections.deque(maxlen=self.n)
        self.vision: collections.deque = collections.deque(maxlen=history)
        self.last_t: int | None = None
        self.counters = Counters()

    def add_vision(self, sample: PoseSample):
        if self.vision and sample.t <= self.vision[-1].t:
            return
        self.vision.append(sample)

    def latest_vision_t(self) -> int | None:
        return self.vision[-1].t if self.vision else None

    def ready(self, frame: EmgFrame) -> bool:
        """True once the nearest vision sample for ``frame`` is known to have arrived."""
        latest = self.latest_vision_t()
        return latest is not None and latest >= frame.t

    def process(self, frame: EmgFrame) -> PoseSample | None:
        c = self.counters
        c.ticks += 1
        if self.last_t is not None and frame.t <= self.last_t:
            c.skips += 1
            return None
        self.last_t = frame.t
        start = time.perf_counter()
        self.buffer.append(frame.ch)
        if len(self.buffer) < self.n:
            c.warmup += 1
            c.skips += 1
            return None
        times = [s.t for s in self.vision]
        j = nearest_within(times, frame.t, self.pairing.tolerance_ms)
        if j is None:
            c.unpaired += 1
            c.skips += 1
            return None
        window = np.array(self.buffer, dtype=np.float64)
        angles = self.model.predict(window[None])[0]
        fused = fuse(self.vision[j], angles, frame.t)
        c.processing_ms.append((time.perf_counter() - start) * 1000.0)
        c.pairs += 1
        return fused


class FusionServer:
    """TCP front end around :class:`FusionEngine`."""

    def __init__(self, model, emg_port: int = 0, vision_port: int = 0, out_port: int = 0,
                 pairing: StreamPairing = StreamPairing(), host: str = "127.0.0.1",
                 vision_wait_s: float | None = None):
        self.engine = FusionEngine(model, pairing)
        self.pairing = pairing
        self.emg_queue = DropOldestQueue(pairing.queue_capacity)
        self.vision_queue = DropOldestQueue(pairing.queue_capacity)
        self.vision_wait_s = (TICK_MS / 1000.0) if vision_wait_s is None else vision_wait_s
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._clients: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._listeners = {}
        for name, port in (("emg", emg_port), ("vision", vision_port), ("out", out_port)):
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                sock.bind((host, port))
            except OSError:
                for s in self._listeners.values():
                    s.close()
                sock.close()
                raise
            sock.listen(4)
            sock.settimeout(0.2)
            self._listeners[name] = sock

    @property
    def ports(self) -> dict[str, int]:
        return {name: s.getsockname()[1] for name, s in self._listeners.items()}

    @property
    def counters(self) -> Counters:
        return self.engine.counters

    def start(self):
        targets = [
            (self._accept_loop, ("emg", self._ingest_emg)),
            (self._accept_loop, ("vision", self._ingest_vision)),
            (self._accept_out, ()),
            (self._fusion_loop, ()),
        ]
        for fn, args in targets:
            th = threading.Thread(target=fn, args=args, daemon=True)
            th.start()
            self._threads.append(th)
        return self

    def stop(self) -> dict:
        self._stop.set()
        for th in self._threads:
            th.join(timeout=5.0)
        for s in self._listeners.values():
            s.close()
        with self._lock:
            for c in self._clients:
                try:
                    c.close()
                except OSError:
                    pass
            self._clients.clear()
        c = self.engine.counters
        c.drops = self.emg_queue.dropped
        c.vision_drops = self.vision_queue.dropped
        return c.summary()

    # -- threads --------------------------------------------------------------------

    def _accept_loop(self, name: str, handler):
        listener = self._listeners[name]
        while not self._stop.is_set():
            try:
                conn, _ = listener.accept()
            except (socket.timeout, OSError):
                continue
            th = threading.Thread(target=self._read_lines, args=(conn, handler), daemon=True)
            th.start()

    def _read_lines(self, conn: socket.socket, handler):
        conn.settimeout(0.2)
        pending = b""
        with conn:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not chunk:
                    break
                pending += chunk
                *lines, pending = pending.split(b"\n")
                for line in lines:
                    if line.strip():
                        handler(line)

    def _malformed(self, line: bytes, exc: Exception):
        with self._lock:
            c = self.engine.counters
            c.malformed += 1
            c.skips += 1
            c.received += 1
        log.warning("skipping malformed frame %r: %s", line[:80], exc)

    def _ingest_emg(self, line: bytes):
        try:
            frame = decode(line)
            if not isinstance(frame, EmgFrame):
                raise ProtocolError("pose frame on the emg port")
        except ProtocolError as exc:
            self._malformed(line, exc)
            return
        with self._lock:
            self.engine.counters.received += 1
        self.emg_queue.put((frame, time.monotonic()))

    def _ingest_vision(self, line: bytes):
        try:
            sample = decode(line)
            if not isinstance(sample, PoseSample) or sample.source != "vision":
                raise ProtocolError("expected a pose frame on the vision port")
        except ProtocolError as exc:
            self._malformed(line, exc)
            return
        with self._lock:
            self.engine.counters.vision_received += 1
        self.vision_queue.put(sample)

    def _accept_out(self):
        listener = self._listeners["out"]
        while not self._stop.is_set():
            try:
                conn, _ = listener.accept()
            except (socket.timeout, OSError):
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._clients.append(conn)

    def _drain_vision(self):
        while True:
            sample = self.vision_queue.get(timeout=0)
            if sample is None:
                return
            self.engine.add_vision(sample)

    def _fusion_loop(self):
        while True:
            item = self.emg_queue.get(timeout=0.05)
            if item is None:
                if self._stop.is_set():
                    return
                continue
            frame, arrived = item
            self._drain_vision()
            # wait briefly for the matching vision sample, never past the deadline
            deadline = arrived + self.vision_wait_s
            while not self.engine.ready(frame) and time.monotonic() < deadline and not self._stop.is_set():
                sample = self.vision_queue.get(timeout=max(0.0, deadline - time.monotonic()))
                if sample is not None:
                    self.engine.add_vision(sample)
            with self._lock:
                fused = self.engine.process(frame)
            if fused is not None:
                self._emit(encode_pose(fused).encode())

    def _emit(self, data: bytes):
        with self._lock:
            clients = list(self._clients)
        dead = []
        for c in clients:
            try:
                c.sendall(data)
            except OSError:
                dead.append(c)
        if dead:
            with self._lock:
                self._clients = [c for c in self._clients if c not in dead]


# -- replay client ----------------------------------------------------------------------

def recording_frames(recording) -> Iterator[tuple[str, str]]:
    """(emg line, pose line) per tick of a SessionRecording, vision angles included."""
    pos = tuple(float(v) for v in recording.root.position)
    quat = tuple(float(v) for v in recording.root.orientation)
    for i, t in enumerate(recording.timestamps):
        yield (encode_emg(EmgFrame(int(t), tuple(recording.emg[i]))),
               encode_pose(PoseSample(int(t), "vision", pos, quat, tuple(recording.vision[i]))))


def replay(recording, ports: dict[str, int], host: str = "127.0.0.1", rate_hz: float = 50.0,
           vision_offset_ms: int = 0, inject: dict[int, str] | None = None,
           settle_s: float = 1.0) -> list[PoseSample]:
    """Stream a recording to a running server at ``rate_hz`` and collect fused output.

    ``inject`` maps tick index to an extra raw line sent on the emg port
    before that tick (fault injection).
    """
    out = socket.create_connection((host, ports["out"]))
    emg = socket.create_connection((host, ports["emg"]))
    vis = socket.create_connection((host, ports["vision"]))
    for s in (emg, vis):
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    time.sleep(0.3)  # let the server register the output client
    received: list[PoseSample] = []
    stop = threading.Event()

    def reader():
        out.settimeout(0.2)
        pending = b""
        while True:
            try:
                chunk = out.recv(65536)
            except socket.timeout:
                if stop.is_set():
                    break
                continue
            except OSError:
                break
            if not chunk:
                break
            pending += chunk
            *lines, pending = pending.split(b"\n")
            received.extend(decode(line) for line in lines if line.strip())

    th = threading.Thread(target=reader, daemon=True)
    th.start()
    period = 1.0 / rate_hz
    start = time.perf_counter()
    for i, (emg_line, pose_line) in enumerate(recording_frames(recording)):
        target = start + i * period
        delay = target - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        if inject and i in inject:
            emg.sendall(inject[i].encode())
        if vision_offset_ms:
            pose = decode(pose_line)
            pose_line = encode_pose(PoseSample(pose.t + vision_offset_ms, "vision", pose.root_position,
                                               pose.root_orientation, pose.angles))
        vis.sendall(pose_line.encode())
        emg.sendall(emg_line.encode())
    time.sleep(settle_s)
    stop.set()
    th.join(timeout=5.0)
    for s in (emg, vis, out):
        s.close()
    return received
