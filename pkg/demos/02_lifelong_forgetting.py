"""Clean accuracy while adapting across five shift kinds without resets.

Run: python3 demos/02_lifelong_forgetting.py [per_kind] [seed]

The acceptance run uses 100000 samples per kind; the default here is smaller
so the demo finishes quickly. The Tent drop grows with stream length.
"""

import sys

from eata.experiments import desk_benchmark, desk_config, forgetting

per_kind = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
bench = desk_benchmark(seed)
streams = bench.kind_streams(per_kind)

for method in ("tent", "eata"):
    fisher = bench.fisher if method == "eata" else None
    rows, _ = forgetting(bench.params, streams, desk_config(method), fisher, bench.clean(),
                         lifelong=True)
    print(method)
    for r in rows:
        print(f"  after {r['shift']:18s} ood {r['ood_accuracy']:.4f}  clean {r['clean_accuracy']:.4f}"
              f"  (before {r['clean_before']:.4f}, re-adapted {r['clean_readapt_accuracy']:.4f})")
