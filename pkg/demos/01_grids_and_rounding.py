"""Integer grids, group scales, and what rounding alone can and cannot do.

Walks through the quantizer primitives: fitting a scale to a group of
weights, the half-step error bound for values inside the fitted range,
exact sign symmetry of the balanced grid, and the clamping regime where
the bound no longer holds.

Run:  python demos/01_grids_and_rounding.py
"""

import numpy as np

from lowbit import QuantGrid, fit_scales, quantize_values, rtn_quantize

rng = np.random.default_rng(0)

print("=== 4-bit symmetric grid ===")
grid = QuantGrid(bits=4, group_size=None, symmetric=True)
print(f"codes span [{grid.q_min}, {grid.q_max}] -> {grid.q_max - grid.q_min + 1} levels")

group = np.array([0.5, -1.0, 0.25, 0.75])
gs = fit_scales(group, grid)
print(f"group {group} fits scale = max|w|/q_max = {float(gs.scale):.6f} (= 1/7)")

codes, deq = quantize_values(group, gs, grid)
print(f"codes: {codes},  dequantized: {np.round(deq, 4)}")
print(f"max |deq - w| = {np.abs(deq - group).max():.4f} <= scale/2 = {float(gs.scale)/2:.4f}")

print("\n=== half-step bound over a million draws ===")
for bits in (3, 4, 8):
    g = QuantGrid(bits)
    ref = fit_scales(rng.standard_normal(256), g)
    span = float(ref.scale) * g.q_max
    w = rng.uniform(-span, span, size=1_000_000)
    _, dq = quantize_values(w, ref, g)
    print(f"{bits}-bit: max error / (scale/2) = {np.abs(dq - w).max() / (float(ref.scale)/2):.6f}")

print("\n=== sign symmetry (balanced grid, half-even rounding) ===")
half = rng.standard_normal(64)
gs = fit_scales(np.concatenate([half, -half]), grid)
w = rng.uniform(-1, 1, 10_000) * np.abs(half).max()
_, d_pos = quantize_values(w, gs, grid)
_, d_neg = quantize_values(-w, gs, grid)
print(f"quantize(-w) == -quantize(w) exactly: {np.array_equal(d_neg, -d_pos)}")

print("\n=== clamping breaks the bound ===")
gs = fit_scales(group, grid)
w_out = 2.0 * np.abs(group).max()
codes, deq = quantize_values(np.array(w_out), gs, grid)
print(
    f"value {w_out:.2f} beyond the fitted range clamps to code {int(codes)}; "
    f"|deq - w| = {abs(float(deq) - w_out):.3f} >> scale/2 = {float(gs.scale)/2:.3f}"
)

print("\n=== whole-matrix rounding baseline ===")
W = rng.standard_normal((8, 32))
layer = rtn_quantize(W, QuantGrid(4, group_size=8))
err = np.abs(layer.dequantize() - W)
print(
    f"8x32 matrix, 4-bit, groups of 8: {layer.n_groups} scale groups per row, "
    f"mean |error| = {err.mean():.4f}"
)
