"""Desk-scale comparison: CsiNet-LSTM vs CsiNet vs compressive-sensing baselines."""
from __future__ import annotations

import ast
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import RecoveryConfig, baseline_pipeline, select_reg
from .channel import Dataset, ScenarioConfig, denormalize, generate_dataset, with_seed
from .metrics import EvalResult, evaluate, parse_report, make_report, report_json, runtime_benchmark, with_degradation
from .models import (CsiNetLstmParams, CsiNetParams, codeword_len, csinet_decode, csinet_encode,
                     csinet_forward, forward_batch)
from .training import TrainConfig, TrainHistory, train_csinet, train_csinet_lstm

log = logging.getLogger(__name__)

DESK_COUNTS = (2000, 400, 400)
DESK_CRS = (1 / 16, 1 / 32, 1 / 64)
CR_HIGH = 1 / 4

BASELINES = {
    "lasso": RecoveryConfig("lasso_fista", max_iters=2000),
    "tv": RecoveryConfig("tv_pg", max_iters=300, tol=1e-6),
    "amp": RecoveryConfig("amp", max_iters=50),
}


@dataclass(frozen=True)
class DeskPlan:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    counts: tuple[int, int, int] = DESK_COUNTS
    train: TrainConfig = field(default_factory=TrainConfig)
    cr_high: float = CR_HIGH
    crs: tuple[float, ...] = DESK_CRS
    baselines: tuple[str, ...] = ("lasso",)
    baseline_groups: int | None = None      # test groups scored per baseline; None = all
    reg_groups: int = 10                    # validation groups for the regulariser grid


def baseline_results(ds: Dataset, crs, names, n_groups: int | None = None,
                     reg_groups: int = 10, seed: int = 0) -> list[EvalResult]:
    test = ds.normalized("test")[:n_groups]
    truth = ds.raw("test")[:n_groups]
    val = ds.normalized("val")[:reg_groups]
    n_sub = ds.config.n_subcarriers
    out = []
    for name in names:
        cfg = BASELINES[name]
        for cr in crs:
            if cfg.algorithm != "amp":
                reg, _ = select_reg(val, cr, replace(cfg, max_iters=min(cfg.max_iters, 500)),
                                    ds.stats, seed)
                cfg_cr = replace(cfg, reg=reg)
            else:
                cfg_cr = cfg
            t0 = time.perf_counter()
            res = [baseline_pipeline(g, cr, cfg_cr, ds.stats, seed) for g in test]
            per_frame = (time.perf_counter() - t0) / max(test.shape[0] * test.shape[1], 1)
            rec = np.stack([r.recovered for r in res])
            out.append(evaluate(name, cr, truth, rec, n_sub, per_frame, reg=cfg_cr.reg,
                                diverged=int(sum(r.diverged for r in res))))
            log.info("%s cr=%g nmse %.2f dB", name, cr, out[-1].nmse_db)
    return out


def eval_csinet(params: CsiNetParams, ds: Dataset, cr: float, split: str = "test") -> EvalResult:
    x = ds.normalized(split)
    rec = csinet_forward(x.reshape((-1,) + x.shape[-3:]), params).data.reshape(x.shape)
    return evaluate("csinet", cr, ds.raw(split), denormalize(rec, ds.stats), ds.config.n_subcarriers)


def eval_csinet_lstm(params: CsiNetLstmParams, ds: Dataset, cr: float,
                     split: str = "test") -> EvalResult:
    rec = forward_batch(ds.normalized(split), params).data
    return evaluate("csinet-lstm", cr, ds.raw(split), denormalize(rec, ds.stats),
                    ds.config.n_subcarriers, m_high=params.high.codeword_len)


def dl_frame_runtime(params: CsiNetParams, frames: np.ndarray, repeats: int = 5) -> float:
    """Per-frame encode + decode time, one frame at a time."""
    return runtime_benchmark(lambda f: csinet_decode(csinet_encode(f, params), params).data,
                             frames, repeats)


def lasso_frame_runtime(ds: Dataset, cr: float, n_frames: int = 20, repeats: int = 3,
                        seed: int = 0) -> float:
    """Per-frame time of a fixed 2000-iteration FISTA recovery (no early exit)."""
    cfg = replace(BASELINES["lasso"], tol=0.0, reg=1e-3)
    groups = ds.normalized("test").reshape((-1, 1) + ds.normalized("test").shape[-3:])[:n_frames]
    return runtime_benchmark(lambda g: baseline_pipeline(g, cr, cfg, ds.stats, seed), groups, repeats)


@dataclass
class SeedRun:
    seed: int
    results: list[EvalResult]
    histories: dict[str, TrainHistory]
    csinet: dict[float, CsiNetParams]
    lstm: dict[float, CsiNetLstmParams]
    timings: dict[str, float]


def run_seed(plan: DeskPlan, seed: int) -> SeedRun:
    """Generate, train, and score one seed of the desk comparison."""
    t_start = time.perf_counter()
    ds = generate_dataset(with_seed(plan.scenario, seed), plan.counts)
    tr, va = ds.normalized("train"), ds.normalized("val")
    tcfg = replace(plan.train, seed=seed)
    n_real = plan.scenario.n_real
    m_high = codeword_len(n_real, plan.cr_high)
    hist: dict[str, TrainHistory] = {}
    nets: dict[float, CsiNetParams] = {}
    lstms: dict[float, CsiNetLstmParams] = {}
    nets[plan.cr_high], hist[f"csinet@{plan.cr_high:g}"] = train_csinet(tr, va, m_high, tcfg)
    results = [eval_csinet(nets[plan.cr_high], ds, plan.cr_high)]
    for cr in plan.crs:
        m = codeword_len(n_real, cr)
        nets[cr], hist[f"csinet@{cr:g}"] = train_csinet(tr, va, m, tcfg)
        results.append(eval_csinet(nets[cr], ds, cr))
        lstms[cr], hist[f"csinet-lstm@{cr:g}"] = train_csinet_lstm(
            tr, va, m_high, m, tcfg, preload=(nets[plan.cr_high], nets[cr]))
        results.append(eval_csinet_lstm(lstms[cr], ds, cr))
        log.info("seed %d cr %g: csinet %.2f dB, csinet-lstm %.2f dB", seed, cr,
                 results[-2].nmse_db, results[-1].nmse_db)
    t_train = time.perf_counter() - t_start
    results += baseline_results(ds, plan.crs, plan.baselines, plan.baseline_groups,
                                plan.reg_groups, seed)
    frames = ds.normalized("test")[:20, 0]
    timings = {
        "train_s": t_train,
        "dl_frame_s": dl_frame_runtime(nets[min(plan.crs)], frames),
        "lasso2000_frame_s": lasso_frame_runtime(ds, min(plan.crs), seed=seed),
        "total_s": time.perf_counter() - t_start,
    }
    for r in results:
        if r.method in ("csinet", "csinet-lstm"):
            r.runtime_s = timings["dl_frame_s"]
    return SeedRun(seed, with_degradation([r for r in results if r.cr in plan.crs])
                   + [r for r in results if r.cr not in plan.crs], hist, nets, lstms, timings)


def average_results(runs: list[list[EvalResult]]) -> list[EvalResult]:
    """Mean of every numeric column across seeds, matched on ``(method, cr)``."""
    keyed: dict[tuple[str, float], list[EvalResult]] = {}
    for rs in runs:
        for r in rs:
            keyed.setdefault((r.method, r.cr), []).append(r)
    out = []
    for (method, cr), rows in keyed.items():
        cols = {}
        for name in ("nmse_db", "rho", "runtime_s", "nmse_t1_db", "nmse_trest_db", "degradation_pct"):
            cols[name] = float(np.mean([getattr(r, name) for r in rows]))
        out.append(EvalResult(method, cr, extra={"n_seeds": len(rows)}, **cols))
    return out


RESULT_MODULES = ("autodiff", "channel", "models", "training", "baselines", "metrics", "experiment")


def code_fingerprint() -> str:
    """Hash of the syntax trees of every module that affects desk results.

    Docstrings and comments do not change the fingerprint.
    """
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in RESULT_MODULES:
        tree = ast.parse((here / f"{name}.py").read_text())
        for node in ast.walk(tree):
            body = getattr(node, "body", None)
            if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                    and isinstance(getattr(body[0], "value", None), ast.Constant) \
                    and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def plan_key(plan: DeskPlan, seed: int) -> str:
    blob = json.dumps({"plan": asdict(plan), "seed": seed, "code": code_fingerprint()},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_seed_cached(plan: DeskPlan, seed: int, cache_dir) -> tuple[list[EvalResult], dict]:
    """``run_seed`` results and timings, reusing ``cache_dir`` when plan, seed and code match."""
    path = Path(cache_dir) / f"seed{seed}-{plan_key(plan, seed)}.json"
    if path.exists():
        doc = json.loads(path.read_text())
        return parse_report(doc["report"]), doc["timings"]
    run = run_seed(plan, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    histories = {k: h.records for k, h in run.histories.items()}
    path.write_text(json.dumps({"report": report_json(make_report(run.results, {"seed": seed})),
                                "timings": run.timings, "histories": histories}))
    return run.results, run.timings
