"""Why error compensation beats independent rounding on correlated inputs.

Quantizes the same layer three ways: plain rounding (rtn), the dense
second-order reference (obs_oracle), and the triangular-factor route
(gptq). On correlated inputs the compensated engines cut the output error
well below rounding; on uncorrelated (identity-covariance) inputs the
columns decouple and compensation has nothing to do.

Run:  python demos/03_compensation_vs_rounding.py
"""

import numpy as np

from lowbit import (
    EngineConfig,
    HessianState,
    LayerBundle,
    SyntheticSpec,
    generate_synthetic,
    run_engine,
)

d = 96
rng = np.random.default_rng(11)
W = rng.standard_normal((64, d))

print("=== correlated inputs (rho = 0.9) ===")
X = generate_synthetic(SyntheticSpec(d_in=d, n_tokens=512, rho=0.9, seed=1))
hess = HessianState(d).accumulate(X)

results = {}
for engine in ("rtn", "gptq", "obs_oracle"):
    for bits in (3, 4):
        _, rep = run_engine(
            LayerBundle(W), hess, EngineConfig(engine=engine, bits=bits, group_size=32)
        )
        results[(engine, bits)] = rep

print(f"{'engine':>12} {'bits':>4} {'proxy loss':>12} {'vs rtn':>8} {'time':>7}")
for (engine, bits), rep in results.items():
    print(
        f"{engine:>12} {bits:>4} {rep.proxy_loss:>12.3f} "
        f"{rep.rtn_relative:>8.3f} {rep.wall_time_s:>6.3f}s"
    )

same = np.array_equal  # codes of the two compensation routes coincide
q_g, _ = run_engine(LayerBundle(W), hess, EngineConfig(engine="gptq", bits=3, group_size=32))
q_o, _ = run_engine(LayerBundle(W), hess, EngineConfig(engine="obs_oracle", bits=3, group_size=32))
print(f"\ngptq and obs_oracle emit identical codes: {same(q_g.codes, q_o.codes)}")
print("(the factor route reproduces the dense reference at a fraction of the memory)")

print("\n=== uncorrelated inputs decouple the columns ===")
hess_id = HessianState(d).accumulate(np.eye(d))
q_g, rep_g = run_engine(LayerBundle(W), hess_id, EngineConfig(engine="gptq", bits=3))
q_r, rep_r = run_engine(LayerBundle(W), hess_id, EngineConfig(engine="rtn", bits=3))
print(f"identity covariance: gptq codes == rtn codes: {same(q_g.codes, q_r.codes)}")
print(f"both proxy losses: {rep_g.proxy_loss:.3f} vs {rep_r.proxy_loss:.3f}")
