"""Walk through the CAS-lite tables, their unsafeable regions and a short training run.

    python demos/caslite_walkthrough.py [coc|cl1500] [epochs]
"""

import sys
import time

import numpy as np

from convex_shield.benchmarks import ADVISORIES, build_model, caslite_tables, generate, get_benchmark, probe_set
from convex_shield.benchmarks.caslite import CasLiteGrid
from convex_shield.training import split_dataset, train
from convex_shield.verifier import accuracy, check_violations

a_prev = sys.argv[1] if len(sys.argv) > 1 else "coc"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 20

grid = CasLiteGrid()
tables = caslite_tables(grid)
print("grid", grid.describe())
print("cells where no advisory is safeable:", int(tables.safeable_none.sum()))
print("unsafeable cells per advisory:")
for name, mask in zip(ADVISORIES, tables.unsafeable):
    print(f"  {name:>8}: {int(mask.sum()):4d}")

# level flight at co-altitude, one second out: nothing can be done
v0, h0 = list(grid.v_values).index(0.0), list(grid.h_values).index(0.0)
print("tau=1, h=0, vO=0 -> all unsafeable:", bool(tables.safeable_none[v0, h0, 1]))

ds, cons, domain, _ = generate("caslite", a_prev=a_prev)
print(f"\n{a_prev}: {len(ds)} samples, {len(cons)} constraints")
print("label frequencies:", dict(zip(ADVISORIES, np.bincount(ds.strata, minlength=9).tolist())))

tr, te = split_dataset(ds, 0.8, seed=0)
probes, spec = probe_set("caslite", cons, domain, ds, resolution=20_000)
cfg = get_benchmark("caslite").train_config(epochs=epochs)
for kind in ("standard", "safe"):
    model = build_model("caslite", kind, cons, domain, seed=0)
    t = time.perf_counter()
    train(model, tr, cfg)
    rep = check_violations(model, cons, probes, spec)
    print(f"{kind:>8}: test accuracy {accuracy(model, te):6.2f}%, unsafeable selections "
          f"{rep.percentage:.3f}% of {rep.total_probes} probes ({time.perf_counter() - t:.0f}s)")
print("safe model structure:", {k: v for k, v in model.describe().items() if k in ("n_constraints", "k")})
