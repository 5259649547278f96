"""Oracle battery: every check compares a production routine against an
independent, slower reference computation."""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .features import (DEC_HI, DEC_LO, extract_features_batch, freq_features, power_spectrum,
                       time_features, wavedec_level4)
from .model import ModelConfig, build_model
from .neuralcore import ParamStore, constant, fc_forward, gradient_check, init_uniform, mse_loss
from .occlusion import ray_box_intersect, ray_capsule_intersect
from .stats import wilcoxon_signed_rank

TOY_CONFIG = ModelConfig(n=20, n_hat=8, c=2, m=8, lstm_hidden=8, feat_hidden=8, wav_hidden=8,
                         filt_hidden=8, final_hidden=8, seed=3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} {self.detail}  ({self.seconds:.1f}s)"


# -- gradients ---------------------------------------------------------------------------

def toy_model_loss(config: ModelConfig = TOY_CONFIG, batch: int = 4, seed: int = 0):
    """A small full model with a fixed batch; returns (model, loss closure)."""
    model = build_model(config)
    rng = np.random.default_rng(seed)
    windows = rng.uniform(0, 50, size=(batch, config.n, config.c))
    model.set_normalization(np.full(config.c, 25.0), np.full(config.c, 15.0))
    inputs = model.prepare(windows)
    target = rng.normal(0, 1, size=(batch, config.m))
    return model, lambda: mse_loss(model.forward_prepared(inputs), target)


def check_model_gradients(tol: float = 1e-4) -> tuple[bool, float]:
    model, loss_fn = toy_model_loss()
    report = gradient_check(loss_fn, model.store)
    return report.passed(tol), report.max_rel_error


def check_linear_gradients(tol: float = 1e-6, seed: int = 0) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("W", init_uniform(rng, (5, 3), 5))
    store.add("b", init_uniform(rng, (3,), 5))
    x = rng.normal(size=(7, 5))
    y = rng.normal(size=(7, 3))
    report = gradient_check(lambda: mse_loss(fc_forward(constant(x), store["W"], store["b"]), y), store)
    return report.passed(tol), report.max_rel_error


# -- signal oracles ------------------------------------------------------------------------

def naive_power_spectrum(x: np.ndarray) -> np.ndarray:
    n = len(x)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    re = (x * np.cos(2 * np.pi * k * t / n)).sum(axis=1)
    im = -(x * np.sin(2 * np.pi * k * t / n)).sum(axis=1)
    return re ** 2 + im ** 2


def parseval_energy(spectrum: np.ndarray, n: int) -> float:
    """Time-domain energy recovered from one-sided power bins."""
    inner = spectrum[1:-1] if n % 2 == 0 else spectrum[1:]
    edge = spectrum[0] + (spectrum[-1] if n % 2 == 0 else 0.0)
    return float((edge + 2.0 * inner.sum()) / n)


def direct_dwt_step(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """y[k] = sum_j h[j] x[2k + 1 - j] with zeros outside the signal."""
    length = len(x)
    out_len = (length + 7) // 2
    lo, hi = np.zeros(out_len), np.zeros(out_len)
    for k in range(out_len):
        for j in range(8):
            i = 2 * k + 1 - j
            if 0 <= i < length:
                lo[k] += DEC_LO[j] * x[i]
                hi[k] += DEC_HI[j] * x[i]
    return lo, hi


def direct_level4(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    approx = np.asarray(x, dtype=np.float64)
    for _ in range(4):
        approx, detail = direct_dwt_step(approx)
    return approx, detail


def check_spectrum(trials: int = 50, seed: int = 1) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        n = 150 if i % 2 == 0 else int(rng.integers(2, 200))
        x = rng.normal(size=n) * rng.uniform(0.1, 100)
        p = power_spectrum(x)
        ref = naive_power_spectrum(x)
        worst = max(worst, float(np.max(np.abs(p - ref)) / max(ref.max(), 1e-300)))
    return worst < 1e-9, worst


def check_parseval(trials: int = 50, seed: int = 2) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 300))
        x = rng.normal(size=n)
        energy = float((x * x).sum())
        worst = max(worst, abs(parseval_energy(power_spectrum(x), n) - energy) / energy)
    return worst < 1e-9, worst


def check_dwt(trials: int = 20, seed: int = 3) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        n = 150 if i % 2 == 0 else int(rng.integers(8, 400))
        x = rng.uniform(0, 255, size=n)
        a, d = wavedec_level4(x)
        ra, rd = direct_level4(x)
        scale = max(np.abs(ra).max(), 1.0)
        worst = max(worst, float(max(np.abs(a - ra).max(), np.abs(d - rd).max()) / scale))
    return worst < 1e-9, worst


def check_time_features(trials: int = 1000, seed: int = 4) -> tuple[bool, float]:
    """RMS >= MAV and VAR = RMS^2 - mean^2, on per-channel and batched paths."""
    rng = np.random.default_rng(seed)
    windows = rng.uniform(0, 255, size=(trials, 150, 8)) * rng.uniform(0, 1, size=(trials, 1, 8))
    tf, _ = extract_features_batch(windows)
    mav, rms, var = tf[..., 0], tf[..., 1], tf[..., 2]
    mean = windows.mean(axis=1)
    ok = bool(np.all(rms >= mav - 1e-12))
    worst = float(np.max(np.abs(var - (rms ** 2 - mean ** 2)) / np.maximum(rms ** 2, 1e-12)))
    for w in windows[:20]:
        for ch in w.T:
            m, r, v = time_features(ch)
            ok &= r >= m - 1e-12
            worst = max(worst, abs(v - (r * r - ch.mean() ** 2)) / max(r * r, 1e-12))
    return ok and worst < 1e-9, worst


def check_freq_features(seed: int = 5) -> tuple[bool, float]:
    """A pure tone on an exact bin has median, mean and peak frequency on that bin."""
    n = 150
    worst = 0.0
    for k in (1, 7, 30, 74):
        x = np.cos(2 * np.pi * k * np.arange(n) / n) + 3.0
        got = np.array(freq_features(power_spectrum(x)))
        worst = max(worst, float(np.abs(got - k / (n // 2)).max()))
    return worst < 1e-9, worst


# -- statistics oracles --------------------------------------------------------------------

def brute_force_wilcoxon_less(x, y) -> float:
    """P(W+ <= observed) by enumerating every sign assignment of the ranks."""
    d = np.asarray(x, float) - np.asarray(y, float)
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    a = np.abs(d)
    # O(n^2) mid-ranks: values below, plus the middle of the tie group
    ranks = np.array([(a < v).sum() + ((a == v).sum() + 1) / 2.0 for v in a])
    observed = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        if (ranks * np.array(signs)).sum() <= observed + 1e-9:
            hits += 1
    return hits / 2 ** d.size


def check_wilcoxon_exact(cases: int = 500, seed: int = 6) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        n = 1 + i % 12
        x = rng.normal(size=n)
        y = rng.normal(size=n) + rng.uniform(-1, 1)
        if i % 3 == 0:  # ties and zeros
            x, y = np.round(x, 0), np.round(y, 0)
        p = wilcoxon_signed_rank(x, y, "less").pvalue
        worst = max(worst, abs(p - brute_force_wilcoxon_less(x, y)))
    return worst < 1e-12, worst


def check_wilcoxon_fixed() -> tuple[bool, float]:
    p = wilcoxon_signed_rank(np.arange(5.0), np.arange(5.0) + np.arange(1, 6), "less").pvalue
    return p == 1 / 32, abs(p - 1 / 32)


# -- geometry oracles ------------------------------------------------------------------------

def march_hit(inside: Callable[[np.ndarray], bool], origin, direction, t_max: float, step: float = 1e-3):
    """First t at which a finely stepped point along the ray enters the solid."""
    d = np.asarray(direction, float) / np.linalg.norm(direction)
    o = np.asarray(origin, float)
    for t in np.arange(0.0, t_max, step):
        if inside(o + t * d):
            return float(t)
    return None


def check_geometry(trials: int = 40, seed: int = 7) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    # box: axis aligned at the origin, known analytic distances
    half = np.array([1.0, 2.0, 0.5])
    t = ray_box_intersect([5.0, 0, 0], [-1.0, 0, 0], (np.zeros(3), half))
    worst = max(worst, abs(t - 4.0))
    if ray_box_intersect([5.0, 0, 0], [1.0, 0, 0], (np.zeros(3), half)) is not None:
        return False, math.inf
    # capsule vs ray marching
    a, b, r = np.array([0.0, 0, 0]), np.array([3.0, 0, 0]), 0.8

    def in_capsule(p):
        s = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0, 1)
        return np.linalg.norm(p - (a + s * (b - a))) <= r

    for _ in range(trials):
        origin = rng.uniform(-4, 7, size=3)
        origin[2] = rng.choice([-1, 1]) * rng.uniform(1.5, 4)
        aim = rng.uniform([-1, -1, -1], [4, 1, 1])
        direction = aim - origin
        got = ray_capsule_intersect(origin, direction, (a, b, r))
        ref = march_hit(in_capsule, origin, direction, 12.0)
        if (got is None) != (ref is None):
            # grazing rays may disagree within one march step
            if ref is not None and got is None and not in_capsule(
                    origin + (ref + 2e-3) * direction / np.linalg.norm(direction)):
                continue
            return False, math.inf
        if got is not None:
            worst = max(worst, abs(got - ref))
    return worst < 2e-3, worst


CHECKS: dict[str, Callable[[], tuple[bool, float]]] = {
    "gradient/full-model": check_model_gradients,
    "gradient/linear": check_linear_gradients,
    "signal/dft": check_spectrum,
    "signal/parseval": check_parseval,
    "signal/dwt": check_dwt,
    "signal/time-features": check_time_features,
    "signal/freq-features": check_freq_features,
    "stats/wilcoxon-enumeration": check_wilcoxon_exact,
    "stats/wilcoxon-n5": check_wilcoxon_fixed,
    "geometry/ray-casts": check_geometry,
}


def run_selftest(names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        start = time.perf_counter()
        try:
            ok, err = CHECKS[name]()
            detail = f"max error {err:.3g}"
        except Exception as exc:  # a crashing oracle is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return results
