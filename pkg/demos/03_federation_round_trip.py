"""
A short federation, three ways
==============================

Runs a small classification world under FedHelp, FedAvg and local-only
training, then prints the per-client comparison table.
"""

import os
import tempfile

from fedhelp.config import parse_dict
from fedhelp.experiments import compare, run

base = {
    "seed": 0,
    "data": {"num_classes": 6, "dim": 16, "source_size": 3000, "cluster_spread": 1.8},
    "clients": [{"kind": "large", "train": 900, "test": 150},
                {"kind": "large", "train": 500, "test": 150},
                {"kind": "small", "train": 120, "test": 150},
                {"kind": "small", "train": 60, "test": 150}],
    "public": {"size": 300, "holdout": 800},
    "oracles": {"hidden": [64], "epochs": 4},
    "models": {"small_hidden": [32], "large_hidden": [128, 128]},
    "rounds": {"t_max": 15, "patience": 5, "report_last": 5},
}

out = tempfile.mkdtemp(prefix="fedhelp-demo-")
dirs = []
for mode in ("fedhelp", "fedavg", "local"):
    doc = dict(base, mode=mode)
    if mode != "fedhelp":
        doc.pop("oracles")  # these modes pin the oracle count to zero
    cfg = parse_dict(doc)
    path = os.path.join(out, mode)
    summary = run(cfg, path)
    print(f"{mode:8s} rounds={summary['rounds_run']:3d} client average={summary['Client Average']['acc']:.3f}")
    dirs.append(path)

header, rows = compare(dirs, os.path.join(out, "comparison.csv"))
print("\n" + " | ".join(header))
for r in rows:
    print(" | ".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in r))
print("\nartifacts under", out)
