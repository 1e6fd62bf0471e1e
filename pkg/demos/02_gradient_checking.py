"""Verify analytic gradients against central finite differences.

Every differentiable op (and a tiny end-to-end model) is checked by
perturbing 64-bit inputs by +-eps along a random direction and comparing
the slope to the tape's analytic gradient. The second half deliberately
corrupts relu's backward rule to show the harness catching a real bug.
"""

from vitals import gradcheck

print("running the full check suite (3 seeds) ...")
results = gradcheck.run_suite(seeds=3)
for name, err in results.items():
    status = "ok" if err < gradcheck.THRESHOLD else "FAIL"
    print(f"  {name:<20} max_rel_err={err:.3e}  {status}")

print("\nnegative control: corrupting relu's backward (gradients x1.5) ...")
broken = gradcheck.run_suite(seeds=1, corrupt="relu")
for name in ("relu", "end_to_end", "matmul"):
    err = broken[name]
    status = "ok" if err < gradcheck.THRESHOLD else "FAIL (expected)"
    print(f"  {name:<20} max_rel_err={err:.3e}  {status}")
