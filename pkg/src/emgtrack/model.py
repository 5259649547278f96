"""Finger-joint-angle estimator: four branches over one sEMG window, concatenated.

    angles = final( lstm(recent) ++ feat(time_freq(all)) ++ wav(wavelet(all)) ++ filt(recent) )

``all`` is the full N x C window, ``recent`` its trailing n_hat rows. Windows
are standardized per channel with statistics frozen from the training data
before anything else touches them.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import InvalidInputError
from .features import extract_features_batch, level4_length
from .neuralcore import (
    NonFiniteError, ParamStore, Tensor, adam_step, concat, constant, fc_forward,
    init_uniform, lr_schedule, lstm_forward, mse_loss, no_grad,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ANGLE_MIN, ANGLE_MAX = -20.0, 130.0
BRANCHES = ("lstm", "feat", "wav", "filt")


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n: int = 150
    n_hat: int = 50
    c: int = 8
    m: int = 8
    lstm_hidden: int = 128
    feat_hidden: int = 64
    wav_hidden: int = 64
    filt_hidden: int = 128
    final_hidden: int = 256
    seed: int = 0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{f.name} must be an integer")
            if f.name != "seed" and v < 1:
                raise ConfigError(f"{f.name} must be >= 1")
        if self.n_hat > self.n:
            raise ConfigError("n_hat must not exceed n")
        if self.n < 2:
            raise ConfigError("n must be >= 2 for spectral features")

    @property
    def wavelet_width(self) -> int:
        return self.c * 2 * level4_length(self.n)

    @property
    def concat_width(self) -> int:
        return self.lstm_hidden + self.feat_hidden + self.wav_hidden + self.filt_hidden


@dataclass
class PreparedInputs:
    """Model-ready arrays for a stack of windows (everything before the first parameter)."""

    recent: np.ndarray     # B x n_hat x C, standardized
    time_freq: np.ndarray  # B x 6C
    wavelet: np.ndarray    # B x 2C*L4

    def __len__(self):
        return len(self.recent)

    def take(self, idx) -> "PreparedInputs":
        return PreparedInputs(self.recent[idx], self.time_freq[idx], self.wavelet[idx])

    @staticmethod
    def concatenate(parts: Sequence["PreparedInputs"]) -> "PreparedInputs":
        return PreparedInputs(
            np.concatenate([p.recent for p in parts]),
            np.concatenate([p.time_freq for p in parts]),
            np.concatenate([p.wavelet for p in parts]),
        )


class AngleModel:
    def __init__(self, config: ModelConfig, store: ParamStore,
                 norm_mean: np.ndarray | None = None, norm_std: np.ndarray | None = None):
        self.config = config
        self.store = store
        self.norm_mean = None if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = None if norm_std is None else np.asarray(norm_std, dtype=np.float64)

    # -- normalization -------------------------------------------------------

    def set_normalization(self, mean, std):
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if mean.shape != (self.config.c,) or std.shape != (self.config.c,):
            raise InvalidInputError("normalization arrays must have one entry per channel")
        if np.any(std <= 0) or not np.all(np.isfinite(std)):
            raise InvalidInputError("normalization std must be positive and finite")
        self.norm_mean, self.norm_std = mean, std

    def prepare(self, windows: np.ndarray, chunk: int = 2048) -> PreparedInputs:
        """Standardize raw windows (B x N x C) and compute all non-learned inputs."""
        cfg = self.config
        if self.norm_mean is None:
            raise InvalidInputError("model has no input normalization; train or load a checkpoint first")
        w = np.asarray(windows, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.ndim != 3 or w.shape[1:] != (cfg.n, cfg.c):
            raise InvalidInputError(f"expected windows of shape (*, {cfg.n}, {cfg.c}), got {w.shape}")
        parts = []
        for lo in range(0, len(w), chunk):
            z = (w[lo:lo + chunk] - self.norm_mean) / self.norm_std
            tf, wav = extract_features_batch(z)
            parts.append(PreparedInputs(
                np.ascontiguousarray(z[:, -cfg.n_hat:, :]),
                tf.reshape(len(z), -1),
                wav.reshape(len(z), -1),
            ))
        if not parts:
            return PreparedInputs(np.empty((0, cfg.n_hat, cfg.c)), np.empty((0, 6 * cfg.c)),
                                  np.empty((0, cfg.wavelet_width)))
        return PreparedInputs.concatenate(parts)

    # -- forward ---------------------------------------------------------------

    def _mlp(self, prefix: str, x: Tensor, layers: int, last_activation: str = "relu") -> Tensor:
        for i in range(layers):
            act = last_activation if i == layers - 1 else "relu"
            x = fc_forward(x, self.store[f"{prefix}.{i}.W"], self.store[f"{prefix}.{i}.b"], act)
        return x

    def branch_outputs(self, inputs: PreparedInputs) -> dict[str, Tensor]:
        cfg, s = self.config, self.store
        batch = len(inputs)
        return {
            "lstm": lstm_forward(inputs.recent, s["lstm.W_x"], s["lstm.W_h"], s["lstm.b"], cfg.lstm_hidden),
            "feat": self._mlp("feat", constant(inputs.time_freq), 2),
            "wav": self._mlp("wav", constant(inputs.wavelet), 2),
            "filt": self._mlp("filt", constant(inputs.recent.reshape(batch, -1)), 1),
        }

    def head(self, joined: Tensor) -> Tensor:
        h = fc_forward(joined, self.store["final.0.W"], self.store["final.0.b"], "relu")
        return fc_forward(h, self.store["final.1.W"], self.store["final.1.b"], "identity")

    def forward_prepared(self, inputs: PreparedInputs) -> Tensor:
        """Raw (unclamped) angle estimates [B x M] as a graph node."""
        branches = self.branch_outputs(inputs)
        return self.head(concat([branches[k] for k in BRANCHES]))

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Clamped angles in degrees for raw windows, one window at a time.

        Windows are evaluated singly so that the result for a window never
        depends on what else is in the call; the streaming runtime relies on
        this for bit-identical online/offline output.
        """
        inputs = self.prepare(windows)
        out = np.empty((len(inputs), self.config.m))
        with no_grad():
            for i in range(len(inputs)):
                out[i] = self.forward_prepared(inputs.take(slice(i, i + 1))).data[0]
        return np.clip(out, ANGLE_MIN, ANGLE_MAX)

    def forward(self, window) -> np.ndarray:
        """Eight clamped joint angles for one EmgWindow (or N x C array)."""
        samples = getattr(window, "samples", window)
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape != (self.config.n, self.config.c):
            raise InvalidInputError(
                f"window shape {samples.shape} does not match model ({self.config.n}, {self.config.c})")
        return self.predict(samples[None])[0]


def build_model(config: ModelConfig) -> AngleModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    c, H = config.c, config.lstm_hidden

    def dense(prefix, sizes):
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            store.add(f"{prefix}.{i}.W", init_uniform(rng, (fan_in, fan_out), fan_in))
            store.add(f"{prefix}.{i}.b", init_uniform(rng, (fan_out,), fan_in))

    store.add("lstm.W_x", init_uniform(rng, (c, 4 * H), H))
    store.add("lstm.W_h", init_uniform(rng, (H, 4 * H), H))
    store.add("lstm.b", init_uniform(rng, (4 * H,), H))
    dense("feat", [6 * c, config.feat_hidden, config.feat_hidden])
    dense("wav", [config.wavelet_width, config.wav_hidden, config.wav_hidden])
    dense("filt", [config.n_hat * c, config.filt_hidden])
    dense("final", [config.concat_width, config.final_hidden, config.m])
    return AngleModel(config, store)


# -- training --------------------------------------------------------------------

@dataclass
class WindowDataset:
    """Recordings to be framed into (window, angles-at-last-row) pairs."""

    emg: list[np.ndarray] = field(default_factory=list)    # each T x C
    truth: list[np.ndarray] = field(default_factory=list)  # each T x M

    def add(self, emg: np.ndarray, truth: np.ndarray):
        emg = np.asarray(emg, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        if emg.ndim != 2 or truth.ndim != 2 or len(emg) != len(truth):
            raise InvalidInputError("emg and truth must be T x C and T x M with equal T")
        self.emg.append(emg)
        self.truth.append(truth)

    def window_count(self, n: int) -> int:
        return sum(max(0, len(e) - n + 1) for e in self.emg)


@dataclass
class Split:
    """Per recording: first ``train_end`` windows train, last ``val_start..`` validate."""

    ranges: list[tuple[int, int, int]]  # (train_end, val_start, total_windows)

    def counts(self) -> tuple[int, int]:
        return (sum(r[0] for r in self.ranges), sum(r[2] - r[1] for r in self.ranges))


def block_split(dataset: WindowDataset, n: int, val_fraction: float = 0.1) -> Split:
    """Contiguous per-recording split; ``n - 1`` windows between the blocks are
    dropped so no sample is shared by a training and a validation window."""
    ranges = []
    for e in dataset.emg:
        total = max(0, len(e) - n + 1)
        n_val = int(math.ceil(val_fraction * total)) if total else 0
        val_start = total - n_val
        train_end = max(0, val_start - (n - 1))
        ranges.append((train_end, val_start, total))
    return Split(ranges)


def _materialize(model: AngleModel, dataset: WindowDataset, split: Split, part: str):
    from .features import sliding_windows
    n = model.config.n
    inputs, targets = [], []
    for emg, truth, (train_end, val_start, total) in zip(dataset.emg, dataset.truth, split.ranges):
        lo, hi = (0, train_end) if part == "train" else (val_start, total)
        if hi <= lo:
            continue
        wins = sliding_windows(emg, n)[lo:hi]
        inputs.append(model.prepare(wins))
        targets.append(truth[n - 1 + lo:n - 1 + hi])
    if not inputs:
        return None, None
    return PreparedInputs.concatenate(inputs), np.concatenate(targets)


def normalization_stats(dataset: WindowDataset, split: Split, n: int) -> tuple[np.ndarray, np.ndarray]:
    rows = [e[:r[0] + n - 1] for e, r in zip(dataset.emg, split.ranges) if r[0] > 0]
    if not rows:
        raise InvalidInputError("no training windows available")
    stacked = np.concatenate(rows)
    std = stacked.std(axis=0)
    return stacked.mean(axis=0), np.where(std > 1e-8, std, 1.0)


@dataclass
class TrainReport:
    steps: int = 0
    losses: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    final_val_deg: float = float("nan")
    reached_target: bool = False
    train_windows: int = 0
    val_windows: int = 0
    elapsed_s: float = 0.0

    def smoothed_loss(self, step: int, span: int = 50) -> float:
        """Mean loss over the ``span`` steps ending at ``step`` (1-based step count)."""
        lo = max(0, step - span)
        return float(np.mean(self.losses[lo:step]))


def mean_abs_error(model: AngleModel, inputs: PreparedInputs, targets: np.ndarray, chunk: int = 1024) -> float:
    """Mean |pred - truth| over all windows and joints, unclamped, in degrees."""
    total = 0.0
    with no_grad():
        for lo in range(0, len(inputs), chunk):
            pred = model.forward_prepared(inputs.take(slice(lo, lo + chunk))).data
            total += np.abs(pred - targets[lo:lo + chunk]).sum()
    return float(total / targets.size)


def train(model: AngleModel, dataset: WindowDataset, max_steps: int = 50_000, target_deg: float = 1.0,
          batch_size: int = 256, eval_every: int = 500, seed: int = 0,
          state_path: str | os.PathLike | None = None,
          on_eval: Callable[[int, float], None] | None = None) -> TrainReport:
    """Minimize MSE on angle targets with Adam and the decaying learning rate.

    Validation error is measured every ``eval_every`` steps; training stops
    as soon as it drops below ``target_deg`` or after ``max_steps``. When
    ``state_path`` is given the full training state is written there at every
    evaluation and, if the file already exists, training resumes from it.
    """
    cfg = model.config
    if not dataset.emg or dataset.window_count(cfg.n) == 0:
        raise InvalidInputError("dataset has no complete windows")
    split = block_split(dataset, cfg.n)
    report = TrainReport()
    resumed = False
    if state_path is not None and Path(state_path).exists():
        report = _load_train_state(model, state_path)
        resumed = True
        log.info("resuming from %s at step %d", state_path, report.steps)
    else:
        model.set_normalization(*normalization_stats(dataset, split, cfg.n))
    train_in, train_y = _materialize(model, dataset, split, "train")
    val_in, val_y = _materialize(model, dataset, split, "val")
    if train_in is None or val_in is None:
        raise InvalidInputError("dataset too small for a train/validation split")
    report.train_windows, report.val_windows = len(train_in), len(val_in)
    log.info("training on %d windows, validating on %d", len(train_in), len(val_in))
    if resumed and report.reached_target:
        return report

    started = time.perf_counter() - report.elapsed_s
    batch_size = min(batch_size, len(train_in))
    step = report.steps
    while step < max_steps:
        rng = np.random.default_rng([seed, step])
        idx = np.sort(rng.choice(len(train_in), size=batch_size, replace=False))
        loss = mse_loss(model.forward_prepared(train_in.take(idx)), train_y[idx])
        if not math.isfinite(float(loss.data)):
            raise NonFiniteError(f"non-finite loss at step {step}")
        loss.backward()
        adam_step(model.store, lr_schedule(step))
        step += 1
        report.steps = step
        report.losses.append(float(loss.data))
        if step % eval_every == 0 or step == max_steps:
            err = mean_abs_error(model, val_in, val_y)
            report.val_history.append((step, err))
            report.final_val_deg = err
            report.reached_target = bool(err < target_deg)
            report.elapsed_s = time.perf_counter() - started
            log.info("step %d loss %.4f val %.3f deg", step, report.losses[-1], err)
            if on_eval is not None:
                on_eval(step, err)
            if state_path is not None:
                _save_train_state(model, report, state_path)
            if report.reached_target:
                break
    report.elapsed_s = time.perf_counter() - started
    return report


# -- checkpoints --------------------------------------------------------------------

_TOP_KEYS = ["format_version", "config", "normalization", "parameters", "training"]


def checkpoint_dict(model: AngleModel, training: dict | None = None) -> dict:
    if model.norm_mean is None:
        raise CheckpointError("cannot checkpoint a model without input normalization")
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "normalization": {"mean": model.norm_mean.tolist(), "std": model.norm_std.tolist()},
        "parameters": [
            {"name": name, "shape": list(t.shape), "values": t.data.ravel().tolist()}
            for name, t in model.store.items()
        ],
        "training": dict(training or {"steps": 0, "val_error_deg": None}),
    }


def save_checkpoint(model: AngleModel, path, training: dict | None = None):
    _atomic_write(path, json.dumps(checkpoint_dict(model, training), indent=1))


def model_from_dict(doc: dict) -> AngleModel:
    if not isinstance(doc, dict) or list(doc) != _TOP_KEYS:
        raise CheckpointError(f"checkpoint fields must be exactly {_TOP_KEYS}")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc['format_version']!r}")
    cfg_doc = doc["config"]
    expected = [f.name for f in fields(ModelConfig)]
    if list(cfg_doc) != expected:
        raise CheckpointError(f"config fields must be exactly {expected}")
    try:
        config = ModelConfig(**cfg_doc)
        model = build_model(config)
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config: {exc}") from exc
    norm = doc["normalization"]
    if list(norm) != ["mean", "std"]:
        raise CheckpointError("normalization must hold exactly mean and std")
    try:
        model.set_normalization(norm["mean"], norm["std"])
    except InvalidInputError as exc:
        raise CheckpointError(str(exc)) from exc
    params = doc["parameters"]
    names = [p.get("name") for p in params]
    if names != model.store.names():
        raise CheckpointError("parameter names do not match the configured architecture")
    for p in params:
        if list(p) != ["name", "shape", "values"]:
            raise CheckpointError(f"parameter {p['name']} has unexpected fields")
        t = model.store[p["name"]]
        if list(p["shape"]) != list(t.shape):
            raise CheckpointError(f"parameter {p['name']} has shape {p['shape']}, expected {list(t.shape)}")
        values = np.asarray(p["values"], dtype=np.float64)
        if values.size != t.data.size or not np.all(np.isfinite(values)):
            raise CheckpointError(f"parameter {p['name']} has bad values")
        t.data[...] = values.reshape(t.shape)
    training = doc["training"]
    if not isinstance(training, dict) or list(training) != ["steps", "val_error_deg"]:
        raise CheckpointError("training metadata must hold exactly steps and val_error_deg")
    model.training_meta = training
    return model


def load_checkpoint(path) -> AngleModel:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return model_from_dict(doc)


def _atomic_write(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _save_train_state(model: AngleModel, report: TrainReport, path):
    s = model.store
    doc = {
        "checkpoint": checkpoint_dict(model),
        "adam_step": s.step,
        "adam_m": {k: s.m[k].ravel().tolist() for k in s.names()},
        "adam_v": {k: s.v[k].ravel().tolist() for k in s.names()},
        # wall-clock time stays out so identical runs write identical state files
        "report": {k: v for k, v in asdict(report).items() if k != "elapsed_s"},
    }
    _atomic_write(path, json.dumps(doc))


def _load_train_state(model: AngleModel, path) -> TrainReport:
    doc = json.loads(Path(path).read_text())
    loaded = model_from_dict(doc["checkpoint"])
    if loaded.config != model.config:
        raise CheckpointError("training state was written for a different model config")
    model.store, model.norm_mean, model.norm_std = loaded.store, loaded.norm_mean, loaded.norm_std
    s = model.store
    s.step = doc["adam_step"]
    for k in s.names():
        s.m[k] = np.asarray(doc["adam_m"][k]).reshape(s[k].shape)
        s.v[k] = np.asarray(doc["adam_v"][k]).reshape(s[k].shape)
    rep = doc["report"]
    rep["val_history"] = [tuple(v) for v in rep["val_history"]]
    return TrainReport(**rep)
