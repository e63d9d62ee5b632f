"""Recovery metrics (NMSE, cosine similarity), runtime benchmarking and reports."""
from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .channel import from_angular_delay, from_planes, pad_delay

log = logging.getLogger(__name__)

DB_FLOOR = -300.0
REPORT_COLUMNS = ("method", "cr", "nmse_db", "rho", "runtime_s", "nmse_t1_db",
                  "nmse_trest_db", "degradation_pct")


def to_db(x: float) -> float:
    if x <= 0:
        return DB_FLOOR
    return max(10.0 * np.log10(x), DB_FLOOR)


def frame_nmse(truth: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Linear per-frame NMSE over ``(..., T, 2, R, C)`` planes; NaN where the truth is zero."""
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if truth.shape != recon.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {recon.shape}")
    err = ((truth - recon) ** 2).sum(axis=(-3, -2, -1))
    ref = (truth ** 2).sum(axis=(-3, -2, -1))
    out = np.full(ref.shape, np.nan)
    ok = ref > 0
    out[ok] = err[ok] / ref[ok]
    n_bad = int((~ok).sum())
    if n_bad:
        log.warning("nmse: skipped %d zero-norm truth frames", n_bad)
    return out


def nmse_linear(truth: np.ndarray, recon: np.ndarray) -> float:
    """Mean over groups of the per-group average frame NMSE (linear)."""
    per = frame_nmse(truth, recon)
    if per.ndim == 1:
        per = per[None]
    return float(np.nanmean(np.nanmean(per, axis=-1)))


def nmse(truth: np.ndarray, recon: np.ndarray) -> float:
    """NMSE in dB of denormalised ``(G, T, 2, R, C)`` groups (or one ``(T, 2, R, C)`` group)."""
    return to_db(nmse_linear(truth, recon))


def nmse_breakdown(truth: np.ndarray, recon: np.ndarray) -> tuple[float, float, float]:
    """Linear NMSE at ``t = 1``, averaged over ``t = 2..T``, and overall.

    overall == (first + (T - 1) * rest) / T.
    """
    per = frame_nmse(truth, recon)
    if per.ndim == 1:
        per = per[None]
    T = per.shape[-1]
    first = float(np.nanmean(per[:, 0]))
    rest = float(np.nanmean(per[:, 1:])) if T > 1 else float("nan")
    overall = float(np.nanmean(np.nanmean(per, axis=-1)))
    return first, rest, overall


def reconstruct_spatial_freq(planes: np.ndarray, n_subcarriers: int) -> np.ndarray:
    """Denormalised ``(..., 2, R, C)`` planes to the complex spatial-frequency channel."""
    return from_angular_delay(pad_delay(from_planes(planes), n_subcarriers))


def rho(truth: np.ndarray, recon: np.ndarray) -> float:
    """Mean normalised |<h_hat, h>| over subcarrier rows of ``(..., N_c, N_t)`` complex frames.

    Averages over rows, then frames, then groups; rows where either vector is
    zero are skipped.
    """
    truth = np.asarray(truth)
    recon = np.asarray(recon)
    if truth.shape != recon.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {recon.shape}")
    inner = np.abs(np.sum(np.conj(recon) * truth, axis=-1))
    norms = np.linalg.norm(recon, axis=-1) * np.linalg.norm(truth, axis=-1)
    ok = norms > 0
    n_bad = int((~ok).sum())
    if n_bad:
        log.warning("rho: skipped %d zero-norm subcarrier vectors", n_bad)
    if not ok.any():
        return float("nan")
    terms = np.where(ok, inner / np.where(ok, norms, 1.0), 0.0)
    count = ok.sum(axis=-1)
    per_frame = terms.sum(axis=-1)[count > 0] / count[count > 0]
    val = float(per_frame.mean())
    return min(max(val, 0.0), 1.0)


def runtime_benchmark(recover_fn: Callable, frames: Sequence, repeats: int = 5) -> float:
    """Median per-frame wall time of ``recover_fn`` over ``frames``, after one warm-up pass."""
    if repeats < 3:
        raise ValueError("runtime_benchmark needs at least 3 repeats")
    frames = list(frames)
    if not frames:
        return 0.0
    for f in frames[:1]:
        recover_fn(f)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for f in frames:
            recover_fn(f)
        times.append((time.perf_counter() - t0) / len(frames))
    return float(np.median(times))


@dataclass
class EvalResult:
    method: str
    cr: float
    nmse_db: float
    rho: float
    runtime_s: float = float("nan")
    nmse_t1_db: float = float("nan")
    nmse_trest_db: float = float("nan")
    degradation_pct: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, EvalResult):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, float) and isinstance(b, float) and np.isnan(a) and np.isnan(b):
                continue
            if a != b:
                return False
        return True


def evaluate(method: str, cr: float, truth: np.ndarray, recon: np.ndarray, n_subcarriers: int,
             runtime_s: float = float("nan"), **extra) -> EvalResult:
    """Score denormalised ``(G, T, 2, R, C)`` recoveries against the truth."""
    first, rest, overall = nmse_breakdown(truth, recon)
    r = rho(reconstruct_spatial_freq(truth, n_subcarriers),
            reconstruct_spatial_freq(recon, n_subcarriers))
    return EvalResult(method, cr, to_db(overall), r, runtime_s, to_db(first),
                      to_db(rest) if np.isfinite(rest) else float("nan"), extra=dict(extra))


def degradation_pct(nmse_best_db: float, nmse_worst_db: float) -> float:
    """Relative NMSE loss in dB from the best CR to the worst, as a percentage."""
    if nmse_best_db == 0:
        return 0.0 if nmse_worst_db == 0 else float("inf")
    return 100.0 * (nmse_worst_db - nmse_best_db) / abs(nmse_best_db)


def with_degradation(results: Sequence[EvalResult]) -> list[EvalResult]:
    """Fill ``degradation_pct`` per method: from its highest CR to its lowest."""
    out = [EvalResult(**{f.name: getattr(r, f.name) for f in fields(r)}) for r in results]
    by_method: dict[str, list[EvalResult]] = {}
    for r in out:
        by_method.setdefault(r.method, []).append(r)
    for rows in by_method.values():
        if len(rows) < 2:
            continue
        best = max(rows, key=lambda r: r.cr)
        worst = min(rows, key=lambda r: r.cr)
        d = degradation_pct(best.nmse_db, worst.nmse_db)
        for r in rows:
            r.degradation_pct = d
    return out


def make_report(results: Sequence[EvalResult], notes: dict | None = None) -> dict:
    """Structured report: results plus the domain conventions used for scoring."""
    return {
        "columns": list(REPORT_COLUMNS),
        "notes": {"nmse_domain": "denormalised truncated angular-delay",
                  "rho_domain": "spatial-frequency after zero-pad and inverse 2D-DFT",
                  **(notes or {})},
        "results": [asdict(r) for r in results],
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=True)


def parse_report(text: str) -> list[EvalResult]:
    return [EvalResult(**r) for r in json.loads(text)["results"]]


def report_table(results: Sequence[EvalResult], sep: str = "\t") -> str:
    """Delimiter-separated table with a fixed column order and a header row."""
    buf = io.StringIO()
    buf.write(sep.join(REPORT_COLUMNS) + "\n")
    for r in results:
        cells = [r.method, f"1/{round(1 / r.cr)}" if 0 < r.cr < 1 else f"{r.cr:g}",
                 f"{r.nmse_db:.2f}", f"{r.rho:.3f}", f"{r.runtime_s:.3g}",
                 f"{r.nmse_t1_db:.2f}", f"{r.nmse_trest_db:.2f}", f"{r.degradation_pct:.1f}"]
        buf.write(sep.join(cells) + "\n")
    return buf.getvalue()


def report_text(results: Sequence[EvalResult]) -> str:
    """Human-readable aligned table."""
    rows = [line.split("\t") for line in report_table(results).splitlines()]
    widths = [max(len(r[k]) for r in rows) for k in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"
