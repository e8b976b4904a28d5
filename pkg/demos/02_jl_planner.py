"""How many random-projection dimensions keep pairwise distances honest?

The JL bound gives a minimum dimension for N points and a distortion
band (1 - eps, 1 + eps).  The bound is conservative: an empirical audit
shows nearly every pair inside the band at that dimension.
"""
import numpy as np

from d2fel.reduce import distortion, fit_random_projector, jl_epsilon, jl_min_dim, jl_plan

for n, eps in [(1000, 0.5), (10000, 0.2), (10000, 0.1)]:
    print(f"N={n:>6}, eps={eps}: need d >= {jl_min_dim(n, eps)}")

# a gallery of 10k features squeezed to 2048 dims
plan = jl_plan(10000, 0.2, 2048)
print(f"\nd=2048 for N=10000 at eps=0.2: sufficient? {plan['dim_sufficient']} "
      f"(bound asks for {plan['min_dim']}, 2048 only guarantees eps={plan['eps_at_dim']:.3f})")

N, D, d = 200, 4096, 512
eps = jl_epsilon(N, d)
x = np.random.default_rng(0).standard_normal((N, D))
ratios = distortion(x, fit_random_projector(D, d, seed=1).transform(x))
inside = np.mean((ratios >= 1 - eps) & (ratios <= 1 + eps))
print(f"\naudit N={N}, {D} -> {d}: eps={eps:.3f}, {100 * inside:.1f}% of pairs in band, "
      f"ratios span [{ratios.min():.3f}, {ratios.max():.3f}]")
