"""Source, Tent, ETA and EATA on the severity-5 noise stream.

Run: python3 demos/01_methods_on_noise.py [seed]
"""

import sys

from eata.experiments import desk_benchmark, desk_config, single_stream
from eata.network import accuracy

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
bench = desk_benchmark(seed)  # pretrains a small BN-MLP, takes a couple of seconds
print("clean accuracy of the base model:", accuracy(bench.params, *bench.clean()))

stream = bench.noise_stream()
print(f"stream: {len(stream)} samples in {stream.n_batches} batches, tags {stream.shift_tags}")

print(f"{'method':8s} {'accuracy':>9s} {'#backward':>10s} {'#skipped':>9s}")
for method in ("source", "tent", "eta", "eata"):
    fisher = bench.fisher if method == "eata" else None
    m, _ = single_stream(bench.params, stream, desk_config(method), fisher)
    print(f"{method:8s} {m.stream_accuracy:9.4f} {m.n_backward_samples:10d} {m.n_skipped_samples:9d}")

# ETA and EATA skip high-entropy and redundant samples, so they run far fewer
# backward passes than Tent for similar accuracy.
