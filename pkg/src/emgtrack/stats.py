"""Evaluation statistics: difference matrices, Shapiro-Wilk, Wilcoxon signed-rank,
and the per-task/condition results table."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from . import InvalidInputError

SHAPIRO_MAX_N = 5000
EXACT_MAX_N = 25
SIGNIFICANCE = 0.001
_TINY = np.finfo(float).tiny


class DegenerateInputError(InvalidInputError):
    pass


@dataclass
class DifferenceMatrix:
    values: np.ndarray
    task: str = ""
    condition: str = ""
    system: str = ""

    @staticmethod
    def stack(parts: Sequence["DifferenceMatrix"]) -> "DifferenceMatrix":
        """Aggregate sessions by stacking rows."""
        if not parts:
            raise InvalidInputError("nothing to stack")
        first = parts[0]
        return DifferenceMatrix(np.concatenate([p.values for p in parts]), first.task, first.condition, first.system)


def difference_matrix(estimated, truth, **labels) -> DifferenceMatrix:
    est = np.asarray(estimated, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise InvalidInputError(f"shape mismatch: {est.shape} vs {tru.shape}")
    return DifferenceMatrix(np.abs(est - tru), **labels)


# -- Shapiro-Wilk (Royston 1995, AS R94) ---------------------------------------

_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coef, x):
    return sum(c * x ** i for i, c in enumerate(coef))


def _upper_normal(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def shapiro_coefficients(n: int) -> np.ndarray:
    """The n // 2 positive weights applied to (x_(n+1-i) - x_(i))."""
    half = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    inv = NormalDist().inv_cdf
    m = np.array([inv((i - 0.375) / (n + 0.25)) for i in range(1, half + 1)])
    summ2 = 2.0 * float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(half)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2) / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
        a[1] = a2
        first = 2
    else:
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
        first = 1
    a[0] = a1
    a[first:] = -m[first:] / fac
    return a


def shapiro_wilk(sample, seed: int = 0) -> tuple[float, float]:
    """W statistic and p-value. Samples above 5000 are subsampled (seeded)."""
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.size < 3:
        raise InvalidInputError("Shapiro-Wilk needs at least 3 values")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("sample contains non-finite values")
    if x.size > SHAPIRO_MAX_N:
        x = np.random.default_rng(seed).choice(x, SHAPIRO_MAX_N, replace=False)
    x = np.sort(x)
    n = x.size
    if x[-1] - x[0] < 1e-19 * max(1.0, abs(x[-1])):
        raise DegenerateInputError("Shapiro-Wilk is undefined for a constant sample")
    a = shapiro_coefficients(n)
    half = n // 2
    num = float(np.dot(a, x[::-1][:half] - x[:half])) ** 2
    ssq = float(np.sum((x - x.mean()) ** 2))
    w = min(num / ssq, 1.0)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, min(max(p, _TINY), 1.0)
    w1 = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return w, 1e-99
        y = -math.log(gamma - w1)
        mean, sd = _poly(_C3, n), math.exp(_poly(_C4, n))
    else:
        y = w1
        ln = math.log(n)
        mean, sd = _poly(_C5, ln), math.exp(_poly(_C6, ln))
    p = _upper_normal((y - mean) / sd)
    return w, min(max(p, _TINY), 1.0)


# -- Wilcoxon signed-rank -------------------------------------------------------------

@dataclass
class WilcoxonResult:
    statistic: float  # sum of ranks of positive (x - y) differences
    pvalue: float
    n: int            # non-zero differences
    method: str       # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their mean rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.size)
    starts = np.flatnonzero(np.concatenate([[True], sorted_v[1:] != sorted_v[:-1]]))
    stops = np.concatenate([starts[1:], [v.size]])
    for lo, hi in zip(starts, stops):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def signed_rank_counts(doubled_ranks: Iterable[int]) -> np.ndarray:
    """Number of sign assignments reaching each value of 2 * W+ (index = 2W+)."""
    doubled = [int(r) for r in doubled_ranks]
    counts = np.zeros(sum(doubled) + 1)
    counts[0] = 1.0
    top = 0
    for r in doubled:
        counts[r:top + r + 1] += counts[:top + 1].copy()
        top += r
    return counts


def wilcoxon_signed_rank(x, y, alternative: str = "less") -> WilcoxonResult:
    """Paired signed-rank test of x against y.

    ``less`` asks whether x is stochastically smaller than y. Zero
    differences are discarded; ties share their average rank. Exact null
    distribution up to 25 non-zero pairs, normal approximation with tie and
    continuity correction beyond.
    """
    if alternative not in ("less", "two_sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InvalidInputError("x and y must be paired (equal length)")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = signed_rank_counts(doubled)
        total = counts.sum()
        obs = int(round(2 * w_plus))
        p_low = counts[:obs + 1].sum() / total
        if alternative == "less":
            p = p_low
        else:
            p_high = counts[obs:].sum() / total
            p = 2.0 * min(p_low, p_high)
        return WilcoxonResult(w_plus, min(max(p, _TINY), 1.0), n, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    sd = math.sqrt(var)
    if alternative == "less":
        z = (w_plus - mean + 0.5) / sd
        p = 0.5 * math.erfc(-z / math.sqrt(2.0))
    else:
        z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
        p = math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(w_plus, min(max(p, _TINY), 1.0), n, "normal")


# -- report table -----------------------------------------------------------------------

COLUMNS = ("task", "condition", "mean_V", "std_V", "mean_M", "std_M",
           "shapiro_p_V", "shapiro_p_M", "wilcoxon_p", "occlusion_pct")


@dataclass
class ReportRow:
    task: str
    condition: str
    mean_V: float | None = None
    std_V: float | None = None
    mean_M: float | None = None
    std_M: float | None = None
    shapiro_p_V: float | None = None
    shapiro_p_M: float | None = None
    wilcoxon_p: float | None = None
    occlusion_pct: float | None = None
    n_pairs: int = 0

    @property
    def missing(self) -> bool:
        return self.wilcoxon_p is None

    @property
    def significant(self) -> bool:
        return not self.missing and self.wilcoxon_p < SIGNIFICANCE

    @property
    def improvement(self) -> float | None:
        return None if self.missing else self.mean_V - self.mean_M


@dataclass
class EvalItem:
    """One recording with its multimodal predictions aligned to the recording's
    last ``len(predicted)`` ticks."""

    task: str
    condition: str
    truth: np.ndarray
    vision: np.ndarray
    predicted: np.ndarray
    occluded: np.ndarray


def summarize(items: Sequence[EvalItem], tasks: Sequence[str], conditions: Sequence[str],
              seed: int = 0) -> list[ReportRow]:
    """One row per (task, condition); absent data yields a row with empty fields."""
    rows = []
    for task in tasks:
        for cond in conditions:
            group = [it for it in items if it.task == task and it.condition == cond]
            if not group:
                rows.append(ReportRow(task, cond))
                continue
            v_parts, m_parts, occ = [], [], []
            for it in group:
                k = len(it.predicted)
                if k == 0:
                    continue
                v_parts.append(difference_matrix(it.vision[-k:], it.truth[-k:]))
                m_parts.append(difference_matrix(it.predicted, it.truth[-k:]))
                occ.append(it.occluded)
            if not v_parts:
                rows.append(ReportRow(task, cond))
                continue
            dv = DifferenceMatrix.stack(v_parts).values
            dm = DifferenceMatrix.stack(m_parts).values
            occ_pct = 100.0 * float(np.concatenate(occ).mean())
            wil = wilcoxon_signed_rank(dm, dv, "less")
            rows.append(ReportRow(
                task, cond,
                mean_V=float(dv.mean()), std_V=float(dv.std()),
                mean_M=float(dm.mean()), std_M=float(dm.std()),
                shapiro_p_V=_safe_shapiro(dv, seed), shapiro_p_M=_safe_shapiro(dm, seed),
                wilcoxon_p=wil.pvalue, occlusion_pct=occ_pct, n_pairs=dv.size,
            ))
    return rows


def _safe_shapiro(values, seed) -> float | None:
    try:
        return shapiro_wilk(values, seed)[1]
    except DegenerateInputError:
        return None


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, str):
        return v
    return f"{v:.6g}"


def table_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def _p_text(p) -> str:
    if p is None:
        return "NA"
    return "< .001" if p < SIGNIFICANCE else f"{p:.3g}"


def table_text(rows: Sequence[ReportRow]) -> str:
    """Plain-text table: per task, full-view and occluded p-value and occlusion."""
    conds = list(dict.fromkeys(r.condition for r in rows))
    tasks = list(dict.fromkeys(r.task for r in rows))
    by_key = {(r.task, r.condition): r for r in rows}
    head = f"{'Task':<6}" + "".join(f"| {c + ' p':<14}{'occl %':>8} " for c in conds)
    lines = ["P-values (multimodal < vision) and mean occlusion", head, "-" * len(head)]
    for t in tasks:
        cells = []
        for c in conds:
            r = by_key.get((t, c))
            occ = "NA" if r is None or r.occlusion_pct is None else f"{r.occlusion_pct:.2f}"
            cells.append(f"| {_p_text(None if r is None else r.wilcoxon_p):<14}{occ:>8} ")
        lines.append(f"({t})".ljust(6) + "".join(cells))
    lines += ["", "Mean absolute deviation from ground truth, degrees (std)",
              f"{'Task':<6}{'Condition':<11}{'Vision':>16}{'Multimodal':>16}  sig"]
    for r in rows:
        if r.missing:
            lines.append(f"({r.task})".ljust(6) + f"{r.condition:<11}{'NA':>16}{'NA':>16}  missing")
            continue
        v = f"{r.mean_V:.2f} ({r.std_V:.2f})"
        m = f"{r.mean_M:.2f} ({r.std_M:.2f})"
        lines.append(f"({r.task})".ljust(6) + f"{r.condition:<11}{v:>16}{m:>16}  {'***' if r.significant else ''}")
    return "\n".join(lines) + "\n"


def render_report(rows: Sequence[ReportRow], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    txt_path = out / "summary.txt"
    csv_path.write_text(table_csv(rows))
    txt_path.write_text(table_text(rows) if rows else "")
    return [csv_path, txt_path]
