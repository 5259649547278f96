"""Kinematic hand simulator standing in for the armband, headset and ground-truth sensor.

Generates ground-truth flexion trajectories for the six hand-pose tasks,
synthesizes eight rectified sEMG channels from them, and degrades the truth
into a vision-tracker stream according to per-bone ray-cast occlusion.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import TICK_MS, InvalidInputError
from .occlusion import (
    HandGeometry, HandSkeleton, RootPose, camera_position, look_at_quat, occlusion_flags,
)

TASKS = ("i", "ii", "iii", "iv", "v", "vi")
SPEEDS = {"slow": 2.0, "moderate": 1.0, "fast": 0.5}
CONDITIONS = ("full_view", "occluded")
REST_S = 0.5
DT = TICK_MS / 1000.0

MCP_MAX, PIP_MAX = 90.0, 100.0
JOINT_MAX = np.array([MCP_MAX, PIP_MAX] * 4)
TREMOR_DEG = 1.0
TREMOR_BAND_HZ = (8.0, 12.0)

EMG_FULL_SCALE = 255.0
EMG_NOISE_SD = 0.05
EMG_FLOOR_SD = 0.01  # baseline as a fraction of full scale
EMG_SMOOTHING = 0.5
VELOCITY_SCALE = 300.0  # deg/s giving full velocity activation
SUBJECT_SEED = 7

VISION_SD = 2.0
OCCLUDED_BIAS = 20.0
OCCLUDED_JITTER_SD = 8.0

CAMERA_DISTANCE = 50.0
# (elevation, azimuth) in degrees; azimuth 0 = fingertip side, 180 = behind the wrist
CAMERA_POSES = {"full_view": (45.0, 0.0), "occluded": (5.0, 180.0)}

# task -> fingers driven (0 index .. 3 pinky)
_TASK_FINGERS = {"i": (0, 1, 2, 3), "ii": (0,), "iii": (1,), "iv": (2,), "v": (3,), "vi": (3, 2, 1, 0)}
_STAGGER = 0.25


@dataclass(frozen=True)
class TaskScript:
    task_id: str = "i"
    speed: str = "moderate"
    repetitions: int = 8
    condition: str = "full_view"
    seed: int = 0

    def __post_init__(self):
        if self.task_id not in TASKS:
            raise InvalidInputError(f"unknown task {self.task_id!r}")
        if self.speed not in SPEEDS:
            raise InvalidInputError(f"unknown speed {self.speed!r}")
        if self.condition not in CONDITIONS:
            raise InvalidInputError(f"unknown condition {self.condition!r}")
        if self.repetitions < 1:
            raise InvalidInputError("repetitions must be >= 1")

    @property
    def gesture_s(self) -> float:
        return SPEEDS[self.speed]

    @property
    def ticks(self) -> int:
        return int(round(self.repetitions * (self.gesture_s + REST_S) / DT))

    def stream_seed(self, stream: str) -> np.random.SeedSequence:
        keys = ["trajectory", "emg", "vision"]
        return np.random.SeedSequence([
            self.seed, TASKS.index(self.task_id), list(SPEEDS).index(self.speed),
            CONDITIONS.index(self.condition), keys.index(stream),
        ])

    @property
    def name(self) -> str:
        return f"task-{self.task_id}_{self.speed}_{self.condition}_s{self.seed}"


def _raised_cosine(tau: np.ndarray, period: float) -> np.ndarray:
    """0 -> 1 -> 0 over ``period``; zero outside."""
    inside = (tau >= 0) & (tau <= period)
    return np.where(inside, 0.5 * (1.0 - np.cos(2.0 * np.pi * tau / period)), 0.0)


def _tremor(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    """T x 8 smooth tremor bounded by +-TREMOR_DEG (three sinusoids per joint)."""
    freqs = rng.uniform(*TREMOR_BAND_HZ, size=(3, 8))
    phases = rng.uniform(0, 2 * np.pi, size=(3, 8))
    waves = np.sin(2 * np.pi * freqs[None] * t[:, None, None] + phases[None])
    return TREMOR_DEG / 3.0 * waves.sum(axis=1)


def task_trajectory(script: TaskScript) -> np.ndarray:
    """T x 8 ground-truth flexion angles (degrees) at 20 ms ticks."""
    t = np.arange(script.ticks) * DT
    gesture = script.gesture_s
    cycle = gesture + REST_S
    tau = np.mod(t, cycle)
    profile = np.zeros((len(t), 4))
    fingers = _TASK_FINGERS[script.task_id]
    if script.task_id == "vi":
        # each finger's flexion lasts P, starts staggered by P/4; the sweep fills the gesture slot
        period = gesture / (1.0 + _STAGGER * (len(fingers) - 1))
        for order, f in enumerate(fingers):
            profile[:, f] = _raised_cosine(tau - order * _STAGGER * period, period)
    else:
        for f in fingers:
            profile[:, f] = _raised_cosine(tau, gesture)
    angles = np.repeat(profile, 2, axis=1) * JOINT_MAX
    rng = np.random.default_rng(script.stream_seed("trajectory"))
    return angles + _tremor(rng, t)


def mixing_matrix(subject_seed: int = SUBJECT_SEED) -> np.ndarray:
    """8 x 8 non-negative channel/joint mixing with a dominant diagonal."""
    rng = np.random.default_rng(subject_seed)
    w = rng.uniform(0.0, 0.25, size=(8, 8))
    np.fill_diagonal(w, rng.uniform(0.8, 1.2, size=8))
    return w


def muscle_activation(truth: np.ndarray) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.float64)
    velocity = np.gradient(truth, DT, axis=0) if len(truth) > 1 else np.zeros_like(truth)
    return (0.6 * np.clip(truth / JOINT_MAX, 0.0, 1.0)
            + 0.4 * np.clip(np.abs(velocity) / VELOCITY_SCALE, 0.0, 1.0))


def synth_emg(truth, seed, subject_seed: int = SUBJECT_SEED) -> np.ndarray:
    """T x 8 rectified, smoothed sEMG amplitudes in [0, 255].

    ``seed`` drives the session noise; ``subject_seed`` fixes the mixing
    matrix (the wearer), so recordings of one subject share it.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim != 2 or truth.shape[1] != 8:
        raise InvalidInputError("truth must be T x 8")
    w = mixing_matrix(subject_seed)
    full = w.sum(axis=1).max()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, EMG_NOISE_SD, size=truth.shape)
    floor = np.abs(rng.normal(0.0, EMG_FLOOR_SD * full, size=truth.shape))
    raw = (muscle_activation(truth) @ w.T) * (1.0 + noise) + floor
    raw = np.maximum(raw, 0.0)
    smooth = np.empty_like(raw)
    acc = raw[0] if len(raw) else None
    for i in range(len(raw)):
        acc = EMG_SMOOTHING * raw[i] + (1.0 - EMG_SMOOTHING) * acc
        smooth[i] = acc
    return np.clip(smooth * (EMG_FULL_SCALE / full), 0.0, EMG_FULL_SCALE)


def _episodes(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) runs of True."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def simulate_vision(truth, occluded, seed) -> np.ndarray:
    """Vision-tracker angles: noisy truth when visible; when occluded the last
    visible estimate is held, offset by a per-episode bias and jittered."""
    truth = np.asarray(truth, dtype=np.float64)
    occluded = np.asarray(occluded, dtype=bool)
    if truth.shape != occluded.shape or truth.ndim != 2:
        raise InvalidInputError("truth and occlusion flags must have equal T x 8 shape")
    rng = np.random.default_rng(seed)
    out = truth + rng.normal(0.0, VISION_SD, size=truth.shape)
    jitter = rng.normal(0.0, OCCLUDED_JITTER_SD, size=truth.shape)
    for j in range(truth.shape[1]):
        for start, stop in _episodes(occluded[:, j]):
            # before the first sighting the tracker holds its initial-pose estimate
            held = out[start - 1, j] if start > 0 else truth[0, j]
            bias = rng.uniform(-OCCLUDED_BIAS, OCCLUDED_BIAS)
            out[start:stop, j] = held + bias + jitter[start:stop, j]
    return out


@dataclass
class SessionRecording:
    timestamps: np.ndarray      # T, ms
    truth: np.ndarray           # T x 8
    emg: np.ndarray             # T x 8
    vision: np.ndarray          # T x 8
    occluded: np.ndarray        # T x 8 bool
    camera_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    camera_orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    root: RootPose = field(default_factory=RootPose)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("truth", "emg", "vision", "occluded"):
            arr = getattr(self, name)
            if arr.shape != (n, 8):
                raise InvalidInputError(f"{name} must be {n} x 8, got {arr.shape}")

    def __len__(self):
        return len(self.timestamps)

    # -- file format --------------------------------------------------------------

    HEADER = (["t_ms"] + [f"emg_{i}" for i in range(8)] + [f"truth_{i}" for i in range(8)]
              + [f"vision_{i}" for i in range(8)] + [f"occ_{i}" for i in range(8)])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for i in range(len(self)):
            writer.writerow(
                [str(int(self.timestamps[i]))]
                + [f"{v:.6f}" for v in self.emg[i]]
                + [f"{v:.6f}" for v in self.truth[i]]
                + [f"{v:.6f}" for v in self.vision[i]]
                + ["1" if v else "0" for v in self.occluded[i]]
            )
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            **self.meta,
            "camera": {"position": [round(float(v), 9) for v in self.camera_position],
                       "orientation": [round(float(v), 9) for v in self.camera_orientation]},
            "root": {"position": [float(v) for v in self.root.position],
                     "orientation": [float(v) for v in self.root.orientation]},
        }

    def save(self, path) -> tuple[Path, Path]:
        path = Path(path)
        path.write_text(self.to_csv_text())
        meta_path = path.with_suffix(".json")
        meta_path.write_text(json.dumps(self.sidecar(), indent=2) + "\n")
        return path, meta_path

    @classmethod
    def load(cls, path) -> "SessionRecording":
        path = Path(path)
        try:
            with path.open(newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                rows = [r for r in reader if r]
        except (OSError, StopIteration) as exc:
            raise InvalidInputError(f"cannot read recording {path}: {exc}") from exc
        if header != cls.HEADER:
            raise InvalidInputError(f"{path}: unexpected header")
        try:
            data = np.array(rows, dtype=np.float64).reshape(len(rows), len(cls.HEADER))
        except ValueError as exc:
            raise InvalidInputError(f"{path}: malformed row: {exc}") from exc
        meta_path = path.with_suffix(".json")
        side = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        cam = side.pop("camera", {})
        root = side.pop("root", {})
        return cls(
            timestamps=data[:, 0].astype(np.int64),
            emg=data[:, 1:9], truth=data[:, 9:17], vision=data[:, 17:25],
            occluded=data[:, 25:33] > 0.5,
            camera_position=np.array(cam.get("position", [0, 0, 0]), dtype=float),
            camera_orientation=np.array(cam.get("orientation", [1, 0, 0, 0]), dtype=float),
            root=RootPose(np.array(root.get("position", [0, 0, 0]), dtype=float),
                          np.array(root.get("orientation", [1, 0, 0, 0]), dtype=float)),
            meta=side,
        )


def camera_for(condition: str, skeleton: HandSkeleton, root: RootPose | None = None):
    elevation, azimuth = CAMERA_POSES[condition]
    root = root or RootPose()
    pos = camera_position(skeleton, CAMERA_DISTANCE, elevation, azimuth, root)
    return pos, look_at_quat(pos, root.apply(skeleton.palm_center))


def generate_session(script: TaskScript, skeleton: HandSkeleton | None = None,
                     root: RootPose | None = None, subject_seed: int = SUBJECT_SEED) -> SessionRecording:
    skeleton = skeleton or HandSkeleton()
    root = root or RootPose()
    truth = task_trajectory(script)
    cam_pos, cam_q = camera_for(script.condition, skeleton, root)
    flags = occlusion_flags(cam_pos, HandGeometry.build(skeleton, truth, root))
    emg = synth_emg(truth, script.stream_seed("emg"), subject_seed)
    vision = simulate_vision(truth, flags, script.stream_seed("vision"))
    # round-trip through the file precision so in-memory and on-disk sessions agree
    meta = {"task": script.task_id, "speed": script.speed, "condition": script.condition,
            "seed": script.seed, "repetitions": script.repetitions}
    return SessionRecording(
        timestamps=np.arange(script.ticks, dtype=np.int64) * TICK_MS,
        truth=np.round(truth, 6), emg=np.round(emg, 6), vision=np.round(vision, 6),
        occluded=flags, camera_position=cam_pos, camera_orientation=cam_q, root=root, meta=meta,
    )
