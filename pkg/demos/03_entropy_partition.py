"""Adapting on the most confident samples versus the least confident ones.

Run: python3 demos/03_entropy_partition.py [seed]

Samples are ranked by entropy under the frozen base model. For each p the
model is adapted once on the lowest-p% and once on the highest-p%, and the
adapted model is then scored on the whole stream.
"""

import sys

from eata.experiments import desk_benchmark, partition_study

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
bench = desk_benchmark(seed)
rows = partition_study(bench.params, bench.noise_stream(), [5, 10, 20, 30, 50, 80, 100])

print(f"{'p':>5s} {'lowest':>8s} {'highest':>8s}")
for lo, hi in zip(rows[::2], rows[1::2]):
    print(f"{lo['percent']:5.0f} {lo['final_accuracy']:8.4f} {hi['final_accuracy']:8.4f}")
