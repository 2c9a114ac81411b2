"""Inter-agent delays: how long each hand-off between agents takes.

Every hop along the coordination graph draws a Gamma(2, 0.5) delay in
seconds, capped just below a ceiling. Run with ``python demos/01_delay_model.py``.
"""

from __future__ import annotations

import itertools

import numpy as np

from ragen.orchestrator import EDGES, CoordinationGraph, sample_delay, sample_delays

# %% one draw per hop, reproducible from the seed
rng = np.random.default_rng(42)
for src, dst in EDGES:
    print(f"{src.value:>9} -> {dst.value:<9} {sample_delay(rng):7.1f} ms")

# %% the vectorised sampler yields the same stream as repeated scalar draws
scalar_rng = np.random.default_rng(7)
scalar = [sample_delay(scalar_rng) for _ in range(5)]
print("scalar == vector:", np.array_equal(scalar, sample_delays(np.random.default_rng(7), 5)))

# %% a million draws against the analytic moments (mean 1 s, variance 0.5 s^2)
seconds = sample_delays(np.random.default_rng(0), 10**6) / 1000.0
print(f"mean {seconds.mean():.4f} s   variance {seconds.var(ddof=1):.4f} s^2")

# %% a tight ceiling clamps the tail; the graph counts how often
ceiling = 1500.0
draws = sample_delays(np.random.default_rng(1), len(EDGES) * 200, delta_max_ms=ceiling)
graph = CoordinationGraph()
for (src, dst), d in zip(itertools.cycle(EDGES), draws):
    graph.record(src, dst, float(d), bool(d >= np.nextafter(ceiling, 0)), None)
print(f"clamped {graph.clamped} of {len(draws)} hops at {ceiling:.0f} ms")

# %% a coarse text histogram of the delay shape
counts, edges = np.histogram(seconds, bins=12, range=(0.0, 4.0))
for n, lo in zip(counts, edges):
    print(f"{lo:4.1f}s {'#' * int(60 * n / counts.max())}")
