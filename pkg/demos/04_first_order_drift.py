"""The first-order story: compensation drags latent weights off target.

Column-wise compensation keeps correcting the still-unquantized columns,
so by the time a column is quantized its latent value has drifted away
from the trained original. The drift is itself a usable gradient signal:
beta * (W - W_orig) points the same way (positive row cosine) as the true
gradient of the output error, 2 * (W - W_orig) @ H, for any SPD H.

The foem engine folds that signal into every update. This demo tracks the
drift, checks the alignment, and runs the sign ablation on a small suite,
persisting the comparison artifact under ./artifacts/.

Run:  python demos/04_first_order_drift.py
"""

import os

import numpy as np

from lowbit import (
    EngineConfig,
    HessianState,
    LayerBundle,
    QuantGrid,
    SyntheticSpec,
    compare_table,
    generate_synthetic,
    gptq_column_step,
    gradient_alignment,
    inverse_cholesky,
    run_engine,
)
from lowbit.quantizer import ScaleBook

d = 64
rng = np.random.default_rng(5)
X = generate_synthetic(SyntheticSpec(d_in=d, n_tokens=256, rho=0.9, seed=5))
hess = HessianState(d).accumulate(X)
factor = inverse_cholesky(hess.dampen(0.01))

print("=== latent drift grows as columns are quantized ===")
bundle = LayerBundle(rng.standard_normal((32, d)))
grid = QuantGrid(3, None, True)
book = ScaleBook(grid, 32, d)
for j in range(d // 2):
    gptq_column_step(bundle, factor, grid, j, book)
    if j in (0, 7, 15, 31):
        drift = np.abs(bundle.drift()[:, j + 1 :])
        print(f"  after column {j:2d}: mean |W - W_orig| on latent columns = {drift.mean():.4f}")

print("\n=== the cheap gradient points the right way ===")
diag = gradient_alignment(bundle, hess, beta=3e-4)
print(
    f"defined rows: {diag.n_defined}/32, "
    f"row cosine min/mean = {diag.min_cosine():.3f}/{diag.mean_cosine():.3f} (all > 0)"
)

print("\n=== sign ablation on a 20-layer suite (3-bit) ===")
engines = {
    "rtn": EngineConfig(engine="rtn", bits=3),
    "gptq": EngineConfig(engine="gptq", bits=3),
    "foem(minus)": EngineConfig(engine="foem", bits=3, first_order_sign="minus"),
    "foem(plus)": EngineConfig(engine="foem", bits=3, first_order_sign="plus"),
}
reports = []
losses = {name: [] for name in engines}
for seed in range(20):
    Xs = generate_synthetic(SyntheticSpec(128, 512, 0.9, seed))
    h = HessianState(128).accumulate(Xs)
    W = np.random.default_rng(10_000 + seed).standard_normal((128, 128))
    for name, cfg in engines.items():
        _, rep = run_engine(LayerBundle(W), h, cfg, layer_name=f"seed{seed:02d}")
        rep.engine = name
        reports.append(rep)
        losses[name].append(rep.proxy_loss)

for sign in ("minus", "plus"):
    ratios = np.array(losses[f"foem({sign})"]) / np.array(losses["gptq"])
    print(
        f"  foem({sign}) / gptq: mean ratio {ratios.mean():.5f}, "
        f"wins {int((ratios < 1).sum())}/20"
    )
print("  (at desk scale the first-order effect sits near the noise floor;")
print("   the ablation artifact below carries the full distributions)")

os.makedirs("artifacts", exist_ok=True)
csv_text, summary = compare_table(
    reports, "artifacts/sign_ablation.csv", "artifacts/sign_ablation_summary.json"
)
print("\nwrote artifacts/sign_ablation.csv and artifacts/sign_ablation_summary.json")
print(f"engines covered: {sorted(summary['engines'])}")
