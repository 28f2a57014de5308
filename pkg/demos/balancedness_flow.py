"""
Perturbing one factor barely unbalances the pair
================================================

Gradient flow on a factorisation x y^T conserves the balancedness
B = (|x|^2 - |y|^2) / 2 exactly.  Perturbing x along the pulled-back
ascent direction before each step injects a drift, but the drift rate
is capped by rho * (1/scale) * |g| / |y| at every instant.

This script discretises the flow at a small step size and prints the
measured drift against that ceiling: zero radius conserves B up to
discretisation error, positive radii drift visibly but never past the
ceiling, and doubling the merge scale halves both.
"""

import numpy as np

from flatlora.linalg import make_rng
from flatlora.diagnostics import run_scale_invariant_flow

# Draw the target from its own stream so the flow's seed-7 start is a
# generic point, not already the solution.
rng = make_rng(1234)
target = np.outer(rng.standard_normal(6), rng.standard_normal(5))
eta = 1e-4
steps = 1000

print(f"rank-one target {target.shape}, eta = {eta}, {steps} steps")
print()
print(f"{'rho':>6} {'scale':>6} {'|B_end - B_0|':>14} {'max drift rate':>15} "
      f"{'max ceiling':>12} {'loss_0 -> loss_end':>20}")

for rho, scale in ((0.0, 1.0), (0.05, 1.0), (0.1, 1.0), (0.1, 2.0)):
    trace = run_scale_invariant_flow(
        target, rho=rho, scale=scale, eta=eta, steps=steps, seed=7
    )
    wander = abs(trace.final_balancedness - trace.balancedness[0])
    print(
        f"{rho:>6.2f} {scale:>6.1f} {wander:>14.6f} "
        f"{np.max(trace.drift_rate):>15.6f} {np.max(trace.bound_rhs):>12.6f} "
        f"{trace.losses[0]:>9.4f} -> {trace.losses[-1]:.4f}"
    )

print()
print("At rho = 0 the ceiling is identically zero and the tiny wander is")
print("pure discretisation error (it shrinks linearly with eta).  With a")
print("positive radius the drift follows rho/scale, and the measured rate")
print("stays below the ceiling at every recorded step:")
print()

trace = run_scale_invariant_flow(target, rho=0.1, scale=1.0, eta=eta,
                                 steps=steps, seed=7)
ratios = trace.drift_rate / np.maximum(trace.bound_rhs, 1e-300)
print(f"  drift/ceiling over {steps} steps: "
      f"median {np.median(ratios):.3f}, max {np.max(ratios):.3f} (<= 1.1)")
