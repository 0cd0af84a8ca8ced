"""Smoke test for the pyecmarket extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import math
import sys

import pyecmarket as em

TINY = """
name = "tiny-res"
hours = 1
[prices]
r_e = 0.06
r_c_sell = 0.003
[[cg]]
name = "G1"
c0 = 0.5
c1 = 0.045
c2 = 0.0004
p_max = 60.0
sigma = 0.9
[[user]]
name = "U1"
d1 = 0.09
d2 = -0.0004
p_max = 50.0
p_min_fraction = 0.4
psi0 = 60.0
[[res]]
name = "PV1"
forecast = 20.0
sigma_rel = 0.1
"""


def check(cond, msg):
    if not cond:
        print("FAIL:", msg)
        sys.exit(1)
    print("ok:", msg)


def main():
    m = em.moments_from_sigma(1.0)
    check(math.isclose(m["mu"], math.sqrt(2 / math.pi), rel_tol=1e-12), "error mean magnitude")
    check(math.isclose(em.z_factor(0.05), math.sqrt(19.0), rel_tol=1e-12), "Chebyshev multiplier")
    lo, hi = em.envelope_interval(3.0, -2.0, 3.0, 3.0, -5.0, 0.0)
    check(abs(lo + 6.0) < 1e-12 and abs(hi + 6.0) < 1e-12, "degenerate envelope is exact")

    ref = em.Scenario.reference()
    check((ref.n_users, ref.n_res, ref.n_cgs, ref.hours) == (3, 2, 3, 24), "reference dimensions")
    again = em.Scenario.from_toml(ref.to_toml())
    check(again.to_toml() == ref.to_toml(), "TOML round trip")
    try:
        em.Scenario.from_toml("name = 1")
        check(False, "bad scenario rejected")
    except ValueError:
        check(True, "bad scenario rejected")

    tiny = em.Scenario.from_toml(TINY)
    cen = em.solve(tiny, "centralized")
    dec = em.solve(tiny, "decentralized")
    check(cen.converged and dec.converged, "both modes converge on a tiny market")
    gap = abs(dec.welfare - cen.welfare) / abs(cen.welfare)
    check(gap <= 1e-3, f"welfare gap {gap:.2e}")
    check(all(abs(s + 1.0) <= 1e-4 for row in dec.factor_sums() for s in row), "factor sums equal -1")
    check(em.brute_force_welfare(tiny, 20) <= em.relaxation_bound(tiny) + 1e-9, "grid welfare below relaxation")
    ledger = dec.carbon_ledger()
    check({r["participant"] for r in ledger} == {"U1", "PV1"}, "ledger rows")
    audit = dec.chance_audit(20_000, 3)
    check(max(r["frequency"] for r in audit) <= 0.05, "chance constraints hold in sampling")
    eq = dec.equilibrium_check()
    check(max(r["deviation"] for r in eq) <= 1e-3, "equilibrium deviations small")
    check(len(dec.residuals()) == dec.total_iterations, "one residual row per iteration")

    out = em.solve(ref, "centralized")
    check(out.converged and out.welfare > 0, f"reference centralized welfare {out.welfare:.4f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
