import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csifb import channel as ch
from csifb import metrics as mt
from csifb.metrics import EvalResult


def groups(seed=0, shape=(3, 4, 2, 8, 8)):
    return np.random.default_rng(seed).standard_normal(shape)


class TestNmse:
    def test_exact(self):
        x = groups()
        assert mt.nmse(x, x) == -300.0

    def test_zero_recon(self):
        x = groups()
        assert mt.nmse(x, np.zeros_like(x)) == pytest.approx(0.0, abs=1e-12)

    def test_double(self):
        x = groups()
        assert mt.nmse(x, 2 * x) == pytest.approx(0.0, abs=1e-12)

    def test_formula_oracle(self):
        x, y = groups(1), groups(2)
        H, Hh = ch.from_planes(x), ch.from_planes(y)
        per = np.sum(np.abs(H - Hh) ** 2, axis=(-2, -1)) / np.sum(np.abs(H) ** 2, axis=(-2, -1))
        assert mt.nmse(x, y) == pytest.approx(10 * np.log10(per.mean(axis=1).mean()), abs=1e-12)

    def test_zero_truth_skipped(self, caplog):
        x = groups()
        x[0, 1] = 0.0
        assert math.isfinite(mt.nmse(x, groups(1)))
        assert "skipped 1" in caplog.text

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_monotone_along_interpolation(self, seed):
        x, y = groups(seed), groups(seed + 1)
        vals = [mt.nmse(x, x + a * (y - x)) for a in (1.0, 0.7, 0.4, 0.1, 0.01)]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert mt.nmse_linear(x, y) >= 0

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_breakdown_reconciles(self, seed):
        x, y = groups(seed), groups(seed + 1)
        first, rest, overall = mt.nmse_breakdown(x, y)
        assert abs(overall - (first + 3 * rest) / 4) < 1e-9
        assert overall == pytest.approx(mt.nmse_linear(x, y), abs=1e-15)


class TestSpatialFreq:
    def test_on_grid_recovers_channel(self):
        cfg = ch.ScenarioConfig(on_grid_delays=True)
        for s in range(10):
            H = ch.channel_at(ch.sample_paths(cfg, np.random.default_rng(s)), 0.0, cfg)
            planes = ch.to_planes(ch.truncate_delay(ch.to_angular_delay(H), cfg.n_delay))
            assert np.abs(mt.reconstruct_spatial_freq(planes, 64) - H).max() < 1e-9

    def test_zero(self):
        assert not mt.reconstruct_spatial_freq(np.zeros((2, 8, 8)), 64).any()

    def test_linear(self):
        a, b = groups(1, (2, 8, 8)), groups(2, (2, 8, 8))
        lhs = mt.reconstruct_spatial_freq(a + b, 64)
        assert np.allclose(lhs, mt.reconstruct_spatial_freq(a, 64) + mt.reconstruct_spatial_freq(b, 64),
                           atol=1e-13)


def cplx(seed, shape=(2, 3, 16, 8)):
    r = np.random.default_rng(seed)
    return r.standard_normal(shape) + 1j * r.standard_normal(shape)


class TestRho:
    def test_identity(self):
        h = cplx(0)
        assert mt.rho(h, h) == pytest.approx(1.0, abs=1e-12)

    def test_scalar_invariance(self):
        h = cplx(0)
        assert mt.rho(h, (0.3 - 2j) * h) == pytest.approx(1.0, abs=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_per_row_scaling_invariance(self, seed):
        h, y = cplx(seed), cplx(seed + 1)
        c = cplx(seed + 2, h.shape[:-1])[..., None]
        assert mt.rho(h, y * c) == pytest.approx(mt.rho(h, y), abs=1e-12)
        assert 0.0 <= mt.rho(h, y) <= 1.0

    def test_orthogonal(self):
        h = np.zeros((1, 4, 2), complex)
        y = np.zeros((1, 4, 2), complex)
        h[..., 0] = 1.0
        y[..., 1] = 1j
        assert mt.rho(h, y) == 0.0

    def test_formula_oracle(self):
        h, y = cplx(3), cplx(4)
        terms = [[np.mean([abs(np.vdot(y[g, t, n], h[g, t, n]))
                           / (np.linalg.norm(y[g, t, n]) * np.linalg.norm(h[g, t, n]))
                           for n in range(16)]) for t in range(3)] for g in range(2)]
        assert mt.rho(h, y) == pytest.approx(np.mean(terms), abs=1e-12)

    def test_zero_rows(self, caplog):
        h, y = cplx(0), cplx(1)
        y[0, 0, 3] = 0
        assert 0 < mt.rho(h, y) < 1 and "skipped 1" in caplog.text
        assert math.isnan(mt.rho(h, np.zeros_like(h)))


class TestRuntime:
    def test_noop(self):
        assert mt.runtime_benchmark(lambda f: None, range(100), 3) < 1e-6

    def test_median(self, monkeypatch):
        # scripted clock: repeats of 1, 20 and 5 ms over two frames each
        ticks = iter([0.0, 0.002, 10.0, 10.040, 20.0, 20.010])
        monkeypatch.setattr(mt, "time", SimpleNamespace(perf_counter=lambda: next(ticks)))
        t = mt.runtime_benchmark(lambda f: None, [0, 1], 3)
        assert t == pytest.approx(0.005, abs=1e-12)

    def test_needs_three(self):
        with pytest.raises(ValueError):
            mt.runtime_benchmark(lambda f: None, [0], 2)


def result(method="csinet", cr=1 / 16, db=-10.0):
    return EvalResult(method, cr, db, 0.9, 1e-3, db + 1, db - 0.3)


class TestReport:
    def test_degradation(self):
        assert mt.degradation_pct(-10.0, -10.0) == 0.0
        assert mt.degradation_pct(-10.0, -8.0) == pytest.approx(20.0)
        rows = mt.with_degradation([result(cr=1 / 16, db=-10), result(cr=1 / 64, db=-9),
                                    result("lasso", 1 / 16, -2), result("lasso", 1 / 64, -0.5)])
        assert [r.degradation_pct for r in rows] == pytest.approx([10, 10, 75, 75])

    def test_table_rows(self):
        assert len(mt.report_table([result()]).splitlines()) == 2
        assert mt.report_table([]).splitlines() == ["\t".join(mt.REPORT_COLUMNS)]
        assert mt.report_table([result()]).splitlines()[1].startswith("csinet\t1/16\t-10.00")

    def test_round_trip(self):
        rs = mt.with_degradation([result(cr=1 / 16), result(cr=1 / 32, db=-8.0),
                                  EvalResult("amp", 1 / 64, 0.0, float("nan"), extra={"diverged": 3})])
        assert mt.parse_report(mt.report_json(mt.make_report(rs))) == rs

    def test_empty(self):
        rep = mt.make_report([])
        assert rep["results"] == [] and rep["columns"] == list(mt.REPORT_COLUMNS)

    def test_evaluate_fields(self):
        x = groups(5)
        r = mt.evaluate("m", 0.25, x, 0.9 * x, 64)
        assert r.nmse_db == pytest.approx(20 * np.log10(0.1), abs=1e-9)
        assert r.rho == pytest.approx(1.0, abs=1e-12)
        assert r.nmse_t1_db == pytest.approx(r.nmse_trest_db, abs=1e-9)

    def test_text_aligned(self):
        lines = mt.report_text([result(), result("csinet-lstm", db=-12.5)]).splitlines()
        assert len({len(l) for l in lines}) == 1
