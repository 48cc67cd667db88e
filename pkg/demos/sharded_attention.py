"""Sharded decode attention recombined with log-sum-exp weights.

Splits one request's keys over four "instances", lets each attend locally,
and merges the partial outputs at the origin. The merged vector matches a
single softmax over all keys; folding the partials in any order or in
nested groups gives the same answer.

    python3 demos/sharded_attention.py
"""

import numpy as np

from dcpsim.attn_merge import (
    lse_merge,
    merged_result,
    reference_attention,
    rel_l2,
    shard_attention,
    split_keys,
    validate_merge,
)

rng = np.random.default_rng(0)
d, L = 64, 4096
q = rng.standard_normal(d)
K = rng.standard_normal((L, d))
V = rng.standard_normal((L, d))

full = reference_attention(q, K, V)
groups = split_keys(L, 4, rng)
parts = [shard_attention(q, K[g], V[g]) for g in groups]
for i, (g, p) in enumerate(zip(groups, parts)):
    print(f"shard {i}: {len(g):5d} keys  lse {float(p.lse):8.3f}  |partial - full| {rel_l2(p.partial_out, full):.3f}")

merged = lse_merge(parts)
print(f"\nmerged vs monolithic softmax: rel L2 {rel_l2(merged, full):.2e}")
nested = lse_merge([merged_result(parts[:2]), merged_result(parts[2:])])
print(f"nested fold (01)(23):         rel L2 {rel_l2(nested, full):.2e}")
print(f"reversed order:               rel L2 {rel_l2(lse_merge(parts[::-1]), full):.2e}")

# scores around 1e3 would overflow a naive exp
big = reference_attention(q * 400, K, V)
print(f"scaled query, merged:         rel L2 {rel_l2(lse_merge([shard_attention(q * 400, K[g], V[g]) for g in groups]), big):.2e}")

res = validate_merge(1000, seed=0)
print(f"\nrandom suite, float32 path: {res['cases']} cases, worst rel L2 {res['max_rel_err']:.2e}")
