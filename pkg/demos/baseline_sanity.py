"""Compressive-sensing baselines on planted sparse signals and on desk channels.

On a planted sparse vector LASSO (FISTA) and AMP recover almost exactly. On
desk channel frames at CR 1/16 the same solvers do far worse, because the
angular-delay frames are only approximately sparse; AMP in particular sits
past its phase transition and its divergence guard fires.

    python3 demos/baseline_sanity.py
"""
import numpy as np

from csifb import baselines as bl
from csifb.baselines import RecoveryConfig
from csifb.channel import ScenarioConfig, generate_dataset


def db(xh, x):
    return 10 * np.log10(np.sum((xh - x) ** 2) / np.sum(x ** 2))


def main():
    r = np.random.default_rng(0)
    x = np.zeros(256)
    x[r.choice(256, 8, replace=False)] = r.standard_normal(8)
    phi = bl.make_sensing_matrix(96, 128, 0).phi
    y = phi @ x
    print("planted 8-sparse, N=256, M=96")
    print(f"  LASSO (FISTA, 2000 it): {db(bl.lasso_recover(y, phi, RecoveryConfig(reg=1e-4, max_iters=2000)), x):7.1f} dB")
    res = bl.amp_recover(y, phi, RecoveryConfig("amp", max_iters=50))
    print(f"  AMP ({res.iterations} it):          {db(res.x, x):7.1f} dB")
    img = np.zeros((2, 16, 16))
    img[0, 3:10, 4:12] = 1.0
    img[1, 8:14, 2:7] = -0.7
    phi = bl.make_sensing_matrix(128, 256, 0).phi
    xh = bl.tv_recover(phi @ img.ravel(), phi, RecoveryConfig("tv_pg", reg=1e-2, max_iters=2000, tol=1e-10), (16, 16))
    print(f"  TV on a blocky 16x16 pair:  {db(xh, img.ravel()):7.1f} dB")

    ds = generate_dataset(ScenarioConfig(), (1, 10, 5))
    test = ds.normalized("test")
    print("desk channel frames, CR 1/16")
    for name, cfg in [("lasso", RecoveryConfig("lasso_fista", max_iters=2000)),
                      ("amp", RecoveryConfig("amp", max_iters=50))]:
        if name == "lasso":
            reg, _ = bl.select_reg(ds.normalized("val")[:5], 1 / 16, cfg, ds.stats)
            cfg = RecoveryConfig("lasso_fista", reg=reg, max_iters=2000)
        runs = [bl.baseline_pipeline(g, 1 / 16, cfg, ds.stats) for g in test]
        nm = np.mean([r.frame_nmse.mean() for r in runs])
        print(f"  {name:5s}: {10 * np.log10(nm):6.2f} dB, {sum(r.diverged for r in runs)}/{test.shape[0] * test.shape[1]} frames diverged")


if __name__ == "__main__":
    main()
