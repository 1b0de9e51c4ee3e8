"""A reduced repeated-sampling comparison of MD-AM and ICIN.

Twenty replicates of the weak-a setting with a short chain, which is enough
to see ICIN's upward bias in the X2 total.  The full study is
``mdam simulate --scenarios all --seed 2024 --out results``.
"""

from dataclasses import replace

from mdam.simulate import SCENARIOS, run_scenario

sc = replace(SCENARIOS["weak-a"], replicates=20, iterations=600, burnin=200, thin=8)
res = run_scenario(sc, seed=2024)
print(f"{'estimand':<12}{'truth':>10}{'MD-AM':>10}{'ICIN':>10}{'cov MD-AM':>11}{'cov ICIN':>10}")
for r in res.rows[:6]:
    print(f"{r['estimand']:<12}{r['truth']:>10.3f}{r['mdam_estimate']:>10.3f}"
          f"{r['icin_estimate']:>10.3f}{r['mdam_coverage']:>11.0f}{r['icin_coverage']:>10.0f}")
