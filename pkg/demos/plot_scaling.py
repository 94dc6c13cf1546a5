"""
Inverse power-law fits
======================

Fit ``y = a * x**-b + c`` to loss-versus-size points. The first block uses
synthetic points with known parameters; the second trains the no-replay arm
at four hidden sizes and fits retained loss against parameter count.
"""
import tempfile

import numpy as np

from mercpt.experiment import RunConfig, logs_from_csv, run_experiment
from mercpt.metrics import compute_per_token, fit_power_law, retained_loss
from mercpt import model as lm

# %%
# Known curve, with and without 1% multiplicative noise.
xs = np.array([1, 2, 4, 8, 16, 32], dtype=float)
ys = 2.0 * xs ** -0.5 + 1.0
print("clean:", fit_power_law(xs, ys))
noisy = ys * (1 + 0.01 * np.random.default_rng(0).standard_normal(xs.size))
print("noisy:", fit_power_law(xs, noisy))

# %%
# A small size ladder. Short tasks keep this under a minute; expect a noisy fit.
out = tempfile.mkdtemp()
cfg = RunConfig(task_tokens=40_000, sizes=[16, 32, 64, 128], seeds=[0], arms=["sequential", "replay50"], output_dir=out)
run_experiment(cfg)
logs = logs_from_csv(f"{out}/metrics.csv")
for arm in ("sequential", "replay50"):
    counts = np.array([lm.ModelDims(32, 16, 2, h).param_count for h in cfg.sizes], dtype=float)
    retained = np.array([retained_loss(logs[(h, arm, 0)]) for h in cfg.sizes])
    fit = fit_power_law(counts, retained)
    print(f"{arm}: params {counts.astype(int).tolist()}")
    print(f"  retained {np.round(retained, 3).tolist()}")
    print(f"  fit a={fit.a:.3g} b={fit.b:.3g} c={fit.c:.3g} rmse={fit.residual:.3g}")
    print(f"  compute per token at the largest size: {compute_per_token(int(counts[-1]), 0.5 if arm == 'replay50' else 0.0):.3g}")

print(open(f"{out}/report.txt").read())
