"""
Inference overhead of the kappa head
====================================

Times the descriptor aggregation path (normalize -> GeM pool -> project)
with and without the concentration head attached.  The head reuses the
pooled vector, so the marginal cost is a single small hidden layer.
"""

from kappa_sphere.bench import run_bench

result = run_bench(seed=0)

print(f"feature map: {result.channels} channels, "
      f"{result.grid}x{result.grid} grid -> {result.descriptor_dim}-d")
print(f"descriptor path: {result.descriptor_ms:.3f} ms")
print(f"with kappa head: {result.combined_ms:.3f} ms")
print(f"overhead: {result.overhead:.1%} "
      f"({result.timed_runs} timed runs after {result.warmup_runs} warmup)")
