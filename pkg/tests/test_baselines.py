import numpy as np
import pytest
from hypothesis import given, strategies as st

from csifb import baselines as bl
from csifb.baselines import RecoveryConfig
from csifb.channel import NormStats, ScenarioConfig, generate_dataset


def db(xh, x):
    return 10 * np.log10(np.sum((xh - x) ** 2) / np.sum(x ** 2))


def planted(n, m, k, seed):
    r = np.random.default_rng(seed)
    x = np.zeros(n)
    x[r.choice(n, k, replace=False)] = r.standard_normal(k)
    phi = bl.make_sensing_matrix(m, n // 2, seed).phi
    return x, phi, phi @ x


class TestSensing:
    def test_paper_shape(self):
        s = bl.make_sensing_matrix(128, 1024, 0)
        assert s.phi.shape == (128, 2048) and s.cr == 1 / 16

    def test_deterministic(self):
        assert np.array_equal(bl.make_sensing_matrix(16, 64, 3).phi, bl.make_sensing_matrix(16, 64, 3).phi)
        assert not np.array_equal(bl.make_sensing_matrix(16, 64, 3).phi, bl.make_sensing_matrix(16, 64, 4).phi)

    def test_column_norms(self):
        phi = bl.make_sensing_matrix(200, 200, 0).phi
        assert abs(np.mean(np.linalg.norm(phi[:, :100], axis=0)) - 1) < 0.05

    def test_not_a_compression(self):
        with pytest.raises(ValueError):
            bl.make_sensing_matrix(128, 64, 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RecoveryConfig("bm3d")
        with pytest.raises(ValueError):
            RecoveryConfig(max_iters=0)
        with pytest.raises(ValueError):
            RecoveryConfig(tol=-1e-3)


class TestSoftThreshold:
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.floats(0, 1e3))
    def test_sign_and_magnitude(self, v, theta):
        v = np.array(v)
        out = bl.soft_threshold(v, theta)
        assert np.array_equal(np.abs(out), np.maximum(np.abs(v) - theta, 0.0))
        nz = out != 0
        assert np.array_equal(np.sign(out[nz]), np.sign(v[nz]))


class TestLasso:
    def test_large_lambda_gives_zero(self):
        x, phi, y = planted(64, 20, 3, 0)
        lam = np.abs(phi.T @ y).max()
        assert not bl.lasso_recover(y, phi, RecoveryConfig("lasso_ista", reg=lam)).any()
        assert not bl.lasso_recover(y, phi, RecoveryConfig("lasso_fista", reg=lam)).any()

    def test_planted_sparse(self):
        x, phi, y = planted(128, 64, 4, 1)
        xh = bl.lasso_recover(y, phi, RecoveryConfig("lasso_fista", reg=1e-4, max_iters=2000))
        assert db(xh, x) < -30

    def test_one_ista_step(self):
        phi = np.array([[1.0, 0, 2, 0, -1, 0, 0, 1],
                        [0, 1, 0, 0, 0, 3, 0, 0],
                        [0, 0, 1, -2, 0, 0, 1, 0],
                        [1, 1, 0, 0, 0, 0, -1, 2]])
        y = np.array([1.0, -2.0, 0.5, 3.0])
        lam = 0.3
        L = bl.lipschitz(phi)
        # power iteration oracle: largest squared singular value
        assert L == pytest.approx(1.01 * np.linalg.svd(phi, compute_uv=False)[0] ** 2, rel=1e-9)
        got = bl.lasso_recover(y, phi, RecoveryConfig("lasso_ista", reg=lam, max_iters=1))
        v = phi.T @ y / L
        assert np.allclose(got, np.sign(v) * np.maximum(np.abs(v) - lam / L, 0), atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_ista_monotone(self, seed):
        r = np.random.default_rng(seed)
        phi = r.standard_normal((20, 50)) / np.sqrt(20)
        y = r.standard_normal(20)
        hist = []
        bl.lasso_recover(y, phi, RecoveryConfig("lasso_ista", reg=0.05, max_iters=300, tol=0), hist)
        assert len(hist) == 300
        assert np.all(np.diff(hist) <= 1e-12 * np.abs(hist[:-1]))

    def test_fista_returns_best(self):
        x, phi, y = planted(64, 24, 5, 2)
        hist = []
        cfg = RecoveryConfig("lasso_fista", reg=1e-2, max_iters=200, tol=0)
        xh = bl.lasso_recover(y, phi, cfg, hist)
        assert bl.lasso_objective(xh, y, phi, 1e-2) == pytest.approx(min(hist), rel=0, abs=1e-15)

    def test_deterministic(self):
        x, phi, y = planted(64, 24, 5, 3)
        cfg = RecoveryConfig("lasso_fista", reg=1e-3, max_iters=100)
        assert np.array_equal(bl.lasso_recover(y, phi, cfg), bl.lasso_recover(y, phi, cfg))

    def test_wrong_algorithm(self):
        with pytest.raises(ValueError):
            bl.lasso_recover(np.zeros(2), np.zeros((2, 4)), RecoveryConfig("amp"))


def blocky_image():
    img = np.zeros((2, 16, 16))
    img[0, 3:10, 4:12] = 1.0
    img[1, 8:14, 2:7] = -0.7
    img[1, :4, 10:] = 0.5
    return img


class TestTv:
    def test_mu_zero_residual_decreases(self):
        r = np.random.default_rng(0)
        phi = bl.make_sensing_matrix(32, 64, 0).phi
        y = phi @ r.standard_normal(128)
        hist = []
        xh = bl.tv_recover(y, phi, RecoveryConfig("tv_pg", reg=0.0, max_iters=100, tol=0), (8, 8), hist)
        assert xh.shape == (128,)
        assert np.all(np.diff(hist) <= 1e-12)

    def test_piecewise_constant(self):
        x = blocky_image().reshape(-1)
        phi = bl.make_sensing_matrix(x.size // 4, x.size // 2, 0).phi
        xh = bl.tv_recover(phi @ x, phi, RecoveryConfig("tv_pg", reg=1e-2, max_iters=2000, tol=1e-10), (16, 16))
        assert db(xh, x) < -20

    @pytest.mark.parametrize("iters", [1, 5, 40])
    def test_output_dimension(self, iters):
        phi = bl.make_sensing_matrix(16, 32, 0).phi
        xh = bl.tv_recover(np.ones(16), phi, RecoveryConfig("tv_pg", max_iters=iters), (4, 8))
        assert xh.shape == (64,)

    def test_prox_reduces_objective(self):
        v = blocky_image() + 0.1 * np.random.default_rng(1).standard_normal((2, 16, 16))
        w = 0.05
        u = bl.tv_prox(v, w, 50)
        obj = lambda u_: 0.5 * np.sum((u_ - v) ** 2) + w * bl.tv_aniso(u_)
        assert obj(u) < obj(v)

    def test_adjoint(self):
        r = np.random.default_rng(2)
        u, pr, pc = r.standard_normal((3, 5, 6))
        gr, gc = bl._grad2d(u)
        lhs = np.sum(gr * pr) + np.sum(gc * pc)
        assert lhs == pytest.approx(np.sum(u * bl._grad2d_adjoint(pr, pc)), rel=1e-12)


class TestAmp:
    def test_zero_measurement(self):
        phi = bl.make_sensing_matrix(96, 128, 0).phi
        res = bl.amp_recover(np.zeros(96), phi, RecoveryConfig("amp", max_iters=50))
        assert not res.x.any() and not res.diverged

    def test_planted_sparse(self):
        x, phi, y = planted(256, 96, 8, 0)
        res = bl.amp_recover(y, phi, RecoveryConfig("amp", max_iters=50))
        assert res.iterations <= 50 and db(res.x, x) < -20

    def test_onsager_matters(self):
        with_, without = [], []
        for s in range(10):
            x, phi, y = planted(256, 96, 8, s)
            with_.append(db(bl.amp_recover(y, phi, RecoveryConfig("amp", max_iters=50)).x, x))
            without.append(db(bl.amp_recover(y, phi, RecoveryConfig("amp", max_iters=50, onsager=False)).x, x))
        assert np.mean(with_) < np.mean(without) - 3

    def test_divergence_rate(self):
        flags = 0
        for s in range(100):
            x, phi, y = planted(256, 96, 8, s)
            res = bl.amp_recover(y, phi, RecoveryConfig("amp", max_iters=50))
            flags += res.diverged
            assert np.all(np.isfinite(res.x))
        assert flags < 5

    @pytest.mark.parametrize("seed", range(5))
    def test_divergence_flag_fires(self, seed):
        # dense signal far past the phase transition
        r = np.random.default_rng(seed)
        phi = bl.make_sensing_matrix(8, 64, seed).phi
        res = bl.amp_recover(phi @ r.standard_normal(128), phi, RecoveryConfig("amp", max_iters=50))
        assert res.diverged and res.iterations < 50
        assert np.all(np.isfinite(res.x))


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(ScenarioConfig(), (20, 2, 5))


class TestPipeline:
    def test_identity_sensing(self, ds):
        g = ds.normalized("test")[0]
        res = bl.baseline_pipeline(g, 1.0, RecoveryConfig(), ds.stats)
        assert res.frame_nmse.max() < 1e-8

    def test_deterministic(self, ds):
        g = ds.normalized("test")[0]
        cfg = RecoveryConfig(max_iters=50)
        a = bl.baseline_pipeline(g, 1 / 16, cfg, ds.stats, 0)
        b = bl.baseline_pipeline(g, 1 / 16, cfg, ds.stats, 0)
        assert np.array_equal(a.recovered, b.recovered)

    def test_lasso_cr_monotone(self, ds):
        cfg = RecoveryConfig("lasso_fista", reg=1e-3, max_iters=2000)
        test = ds.normalized("test")
        nm = {cr: np.mean([bl.baseline_pipeline(g, cr, cfg, ds.stats).frame_nmse for g in test])
              for cr in (1 / 16, 1 / 64)}
        assert nm[1 / 16] < nm[1 / 64]

    def test_select_reg_on_grid(self, ds):
        reg, scores = bl.select_reg(ds.normalized("val")[:1], 1 / 16,
                                    RecoveryConfig(max_iters=50), ds.stats)
        assert len(scores) == 4 and reg == min(scores, key=scores.get)

    def test_recover_dispatch(self):
        x, phi, y = planted(64, 24, 3, 5)
        for alg in bl.ALGORITHMS:
            out = bl.recover(y, bl.SensingMatrix(phi, 5), RecoveryConfig(alg, max_iters=5), (4, 8))
            assert out.shape == (64,)

    def test_zero_level_centering(self):
        stats = NormStats(-1.0, 2.0)
        g = np.full((1, 2, 4, 4), stats.zero_level)
        g[0, 0, 1, 2] = 0.9
        res = bl.baseline_pipeline(g, 1 / 4, RecoveryConfig("lasso_fista", reg=1e-5), stats)
        assert res.frame_nmse[0] < 1e-3
