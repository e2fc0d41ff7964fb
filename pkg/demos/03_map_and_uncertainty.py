"""
MAP reconstruction and posterior spread
=======================================

Reuse the prior from ``02_ellipse_prior.py`` to invert simulated data in
latent space and in image space, then fit a diagonal Gaussian around the
latent MAP estimate and map the pixelwise uncertainty.
"""
from pathlib import Path

import numpy as np

from scatterflow import formats, inversion, physics, posterior, training

out = Path("demo_output")
model = training.load_checkpoint(out / "ellipse_prior.scpr")
cfg = physics.SensingConfig(n=16, snr_db=30.0)

# a fresh ellipse at eps_r = 2, not one the prior was trained on
truth = training.gen_ellipses(training.DatasetSpec(count=1, n=16, seed=99))[0] * model.chi_max
y = physics.add_noise(physics.forward(truth, cfg), cfg.snr_db, seed=3)

runs = {
    "lso": inversion.InversionConfig(method="lso", iters=200),
    "dso": inversion.InversionConfig(method="dso", init="bp", iters=200, lr=0.02),
}
maps = {}
for name, opts in runs.items():
    maps[name] = res = inversion.invert(y, model, cfg, opts)
    print(f"{name}: PSNR {inversion.psnr(res.x_map, truth):.2f} dB, misfit {res.misfit:.3g}, {res.wall_time:.1f} s")
    formats.export_pgm(np.clip(res.x_map, 0, None), out / f"map_{name}.pgm", 0.0, truth.max())
bp = physics.back_projection(y, cfg)
print(f"bp:  PSNR {inversion.psnr(bp, truth):.2f} dB")

# larger beta pulls sigma towards one, so the samples spread out more
for beta in (0.01, 0.05):
    params = posterior.fit_sigma(y, model, cfg, maps["lso"].z_map, beta=beta, k_samples=10, iters=100)
    uq = posterior.sample_posterior(model, params, count=25, seed=4)
    print(f"beta={beta}: mean log sigma {np.mean(np.log(params.sigma_q)):.3f}, mean uq {uq.uq.mean():.4f}")
formats.export_pgm(np.clip(uq.mmse, 0, None), out / "mmse.pgm", 0.0, truth.max())
formats.export_pgm(uq.uq, out / "uq.pgm", 0.0, max(uq.uq.max(), 1e-9))
formats.export_csv(uq.uq, out / "uq.csv")
