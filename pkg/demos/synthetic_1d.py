"""Train a safe and an unconstrained network on the 1-D problem and compare.

The constraint is x > 0 => F(x) > 0. The safe model has two heads: G_0 is
free, G_1 is pushed through a softplus so it is always positive, and a
proximity function blends them so that only G_1 counts once x enters [0, 2].

    python demos/synthetic_1d.py
"""

import numpy as np

from convex_shield.benchmarks import build_model, generate, get_benchmark
from convex_shield.training import train
from convex_shield.verifier import check_violations, halving_check, r2_score

ds, cons, domain, _ = generate("synthetic1d", seed=0)
cfg = get_benchmark("synthetic1d").train_config()
probes = np.linspace(0.0, 2.0, 100_000)[:, None]

for kind in ("standard", "safe"):
    model = build_model("synthetic1d", kind, cons, domain, seed=0)
    before = check_violations(model, cons, probes).count
    train(model, ds, cfg)
    after = check_violations(model, cons, probes)
    print(f"{kind:>8}: R^2 {r2_score(model, ds):.3f}, violations before {before}, after {after.count}, "
          f"worst margin {after.worst_margin:+.3g}")

# the trained safe model near the boundary
xs = np.linspace(-0.3, 0.3, 7)[:, None]
g0, g1 = model.head_outputs(xs)
w = model.weights(xs)
print("\n     x      G_0      G_1    w_0    w_1        F")
for x, a, b, wi, f in zip(xs[:, 0], g0[:, 0], g1[:, 0], w, model(xs)[:, 0]):
    print(f"{x:+6.2f} {a:+8.4f} {b:+8.4f} {wi[0]:6.3f} {wi[1]:6.3f} {f:+8.4f}")
print("learned proximity:", model.proximity_params())

# continuity: halving the probe spacing halves the largest jump
res = halving_check(model, ([-2.0], [2.0]), 10_000)
print(f"\nmax jump {res.coarse.max_jump:.2e} -> {res.fine.max_jump:.2e} (ratio {res.ratio:.3f})")
