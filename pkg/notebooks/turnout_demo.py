"""Turnout example on synthetic data: MD-AM with and without reporting error.

Run with ``python3 notebooks/turnout_demo.py``; it takes about a minute.
"""

import numpy as np

from mdam import SamplerControls, pool, run, weighted_proportion, weights_from_design
from mdam.simulate import CPS_PRIORS, cps_spec, synthetic_cps

misreport = tuple(a / (a + b) for a, b in CPS_PRIORS)
syn = synthetic_cps(np.random.default_rng(1), misreport=misreport)
ds = weights_from_design(syn.ds).apply(syn.ds)
print(f"{ds.n} sampled units, {ds.n_unit_nr} unit nonrespondents")
print(f"true turnout {syn.truth['turnout']:.3f}")

ctrl = SamplerControls(2000, 1000, 20)
for me in (False, True):
    mi = run(ds, cps_spec(ctrl, measurement_error=me), syn.margins, np.random.default_rng(2))
    label = "with reporting error" if me else "no reporting error"
    for edu in ("HS-", "Some college", "BS+"):
        est = pool(mi.datasets, lambda d: weighted_proportion(d, {"V": 1}, {"C": edu}))
        print(f"{label:>22}  turnout | {edu:<13} {est.q:.3f}  [{est.ci[0]:.3f}, {est.ci[1]:.3f}]")
    if me:
        theta = np.mean([p["theta"] for p in mi.trace], axis=0)
        print("posterior misreporting rates", np.round(theta, 3), "true", misreport)
