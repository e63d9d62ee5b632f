"""Self-checks: per-op gradient verification and the paper-scale forward-shape check."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import ScenarioConfig
from .models import (codeword_len, csinet_lstm_forward, forward_batch, init_csinet, init_params,
                     refine_block)

GRAD_TOL = 1e-4
BREAKABLE = ("dense", "conv2d", "leaky_relu", "sigmoid", "tanh", "lstm_cell")


@contextlib.contextmanager
def broken_op(name: str | None, factor: float = 1.1):
    """Temporarily scale the backward pass of one autodiff op (harness self-test)."""
    if name is None:
        yield
        return
    if name not in BREAKABLE:
        raise ValueError(f"unknown op {name!r}; choose from {', '.join(BREAKABLE)}")
    orig = getattr(ad, name)

    def wrap(t):
        return ad._make(t.data, (t,), lambda g: (factor * g,))

    def bad(*args, **kw):
        out = orig(*args, **kw)
        return tuple(wrap(o) for o in out) if isinstance(out, tuple) else wrap(out)

    setattr(ad, name, bad)
    try:
        yield
    finally:
        setattr(ad, name, orig)


def _probe(out: ad.Tensor, rng) -> ad.Tensor:
    # random projection keeps every output entry in play
    return ad.total(ad.mul(out, ad.Tensor(rng.standard_normal(out.shape))))


def guarded_grad_check(loss_fn, params, tol: float = GRAD_TOL, h: float = 1e-5,
                       max_entries: int | None = None, seed: int = 0) -> dict:
    """Central-difference check that skips entries finite differences cannot judge.

    Two kinds of entry are excluded from the maximum and counted instead:

    * kinks: central differences at ``h`` and ``h / 4`` disagree by more than
      ``tol``, so the probe straddles a leaky-ReLU corner;
    * unresolved: ``max(|analytic|, |numeric|)`` is below
      ``10 * ulp(loss) / (2 h) / tol``, the smallest gradient a float64
      central difference can resolve to ``tol``.

    ``raw_max`` is the maximum over every probed entry with no exclusions.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss0 = loss_fn()
    ad.backward(loss0)
    floor = 10 * np.spacing(abs(float(loss0.data))) / (2 * h) / tol
    rng = np.random.default_rng(seed)
    out = dict(max=0.0, raw_max=0.0, probed=0, kinks=0, unresolved=0)

    def central(flat, k, step):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(loss_fn().data)
        flat[k] = orig - step
        fm = float(loss_fn().data)
        flat[k] = orig
        return (fp - fm) / (2 * step)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    for p in params:
        flat, analytic = p.data.reshape(-1), p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for k in idx:
            numeric = central(flat, k, h)
            err = rel(analytic[k], numeric)
            out["raw_max"] = max(out["raw_max"], err)
            if max(abs(analytic[k]), abs(numeric)) < floor:
                out["unresolved"] += 1
            elif rel(numeric, central(flat, k, h / 4)) > tol:
                out["kinks"] += 1
            else:
                out["probed"] += 1
                out["max"] = max(out["max"], err)
    return out


@dataclass
class GradCheckRow:
    op: str
    max_rel_err: float
    probed: int = 0
    kinks: int = 0
    unresolved: int = 0
    raw_max: float = 0.0  # with no entries excluded

    @property
    def ok(self) -> bool:
        return self.max_rel_err < GRAD_TOL


def gradcheck_suite(seed: int = 0, break_op: str | None = None,
                    max_entries: int = 40) -> list[GradCheckRow]:
    """Central-difference checks of each layer and of a tiny composite model."""
    rng = np.random.default_rng(seed)

    def T(*shape, scale=1.0):
        return ad.Tensor(scale * rng.standard_normal(shape), requires_grad=True)

    rows = []

    def check(op, loss_fn, params, **kw):
        st = guarded_grad_check(loss_fn, params, **kw)
        rows.append(GradCheckRow(op, st["max"], st["probed"], st["kinks"], st["unresolved"],
                                 st["raw_max"]))

    with broken_op(break_op):
        x, W, b = T(3, 5), T(4, 5), T(4)
        r = np.random.default_rng(seed + 1)
        check("dense", lambda: _probe(ad.dense(x, W, b), np.random.default_rng(1)), [x, W, b])

        xc, wc, bc = T(2, 3, 5, 4), T(4, 3, 3, 3), T(4)
        check("conv2d", lambda: _probe(ad.conv2d(xc, wc, bc), np.random.default_rng(2)),
              [xc, wc, bc], max_entries=max_entries)

        for kind in ("leaky_relu", "sigmoid", "tanh"):
            xa = T(4, 6, scale=2.0)
            check(kind, lambda: _probe(ad.activation(xa, kind), np.random.default_rng(3)), [xa])

        d, n = 3, 4
        xl, hl, cl = T(2, n), T(2, d), T(2, d)
        Wl, bl = T(4 * d, n + d, scale=0.5), T(4 * d)

        def lstm_loss():
            h, c = ad.lstm_cell(xl, hl, cl, Wl, bl)
            pr = np.random.default_rng(4)
            return ad.add(_probe(h, pr), _probe(c, pr))
        check("lstm_cell", lstm_loss, [xl, hl, cl, Wl, bl])

        net = init_csinet(4, 4, 8, r)
        xr = T(2, 2, 4, 4, scale=0.5)
        check("refinenet", lambda: _probe(refine_block(xr, net, 1), np.random.default_rng(5)),
              [xr] + [t for k, t in net.tensors.items() if k.startswith("dec.refine1")],
              max_entries=max_entries)

        # tiny composite: N_c' = N_t = 4, T = 2, M_high = 16, M_low = 4
        p = init_params(4, 4, 16, 4, np.random.default_rng(seed + 2))
        groups = np.random.default_rng(seed + 3).random((2, 2, 2, 4, 4))
        check("csinet_lstm", lambda: ad.mse_loss(forward_batch(groups, p), groups),
              p.parameters(), max_entries=max(4, max_entries // 4))
    return rows


def gradcheck_table(rows: list[GradCheckRow]) -> str:
    w = max(len(r.op) for r in rows)
    lines = [f"{'op'.ljust(w)}  max_rel_err  probed  kinks  unresolved  raw_max    status"]
    lines += [f"{r.op.ljust(w)}  {r.max_rel_err:11.3e}  {r.probed:6d}  {r.kinks:5d}  "
              f"{r.unresolved:10d}  {r.raw_max:9.3e}  {'ok' if r.ok else 'FAIL'}" for r in rows]
    return "\n".join(lines) + "\n"


@dataclass
class ShapeReport:
    m_high: int
    m_low: int
    low_decoder_input: int
    output_shapes: list[tuple[int, ...]]
    n_parameters: int
    seconds: float


def paper_scale_shapes(cr_high: float = 1 / 4, cr_low: float = 1 / 16, seed: int = 0) -> ShapeReport:
    """Untrained forward pass at N_c' = 32, N_t = 32, T = 10."""
    t0 = time.perf_counter()
    cfg = ScenarioConfig.paper_scale()
    mh, ml = codeword_len(cfg.n_real, cr_high), codeword_len(cfg.n_real, cr_low)
    rng = np.random.default_rng(seed)
    p = init_params(cfg.n_delay, cfg.n_antennas, mh, ml, rng)
    group = rng.random((cfg.group_len, 2, cfg.n_delay, cfg.n_antennas))
    out = csinet_lstm_forward(group, p)
    return ShapeReport(p.high.codeword_len, p.low.codeword_len, p.low.decoder_input_len,
                       [o.shape for o in out], p.n_parameters(), time.perf_counter() - t0)
