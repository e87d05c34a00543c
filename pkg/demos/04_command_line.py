"""
Driving the simulator from the shell
====================================

The same steps a terminal session would take, through the ``fedhelp``
entry point: warm the oracle cache, run twice, check the runs agree, compare.
"""

import filecmp
import json
import os
import subprocess
import sys
import tempfile

work = tempfile.mkdtemp(prefix="fedhelp-cli-")
config = os.path.join(work, "tiny.json")
with open(config, "w") as fh:
    json.dump({
        "seed": 4,
        "data": {"num_classes": 4, "dim": 8, "source_size": 1200},
        "clients": [{"kind": "large", "train": 400, "test": 80},
                    {"kind": "small", "train": 80, "test": 80},
                    {"kind": "small", "train": 40, "test": 80}],
        "public": {"size": 200, "holdout": 400},
        "oracles": {"hidden": [32], "epochs": 3},
        "models": {"small_hidden": [16], "large_hidden": [64, 64]},
        "rounds": {"t_max": 6, "patience": 6, "report_last": 3},
    }, fh, indent=2)


def fedhelp(*args):
    cmd = [sys.executable, "-m", "fedhelp.cli", *args]
    print("$ fedhelp", " ".join(args))
    res = subprocess.run(cmd, capture_output=True, text=True)
    print(res.stdout.strip() or res.stderr.strip())
    return res.returncode


a, b = os.path.join(work, "a"), os.path.join(work, "b")
fedhelp("warmup", config, "--out", a)
fedhelp("run", config, "--out", a)
fedhelp("run", config, "--serial", "--out", b)
print("metrics identical:", filecmp.cmp(os.path.join(a, "metrics.csv"), os.path.join(b, "metrics.csv"), shallow=False))
fedhelp("compare", a, b)

# a constraint violation comes back as one JSON line on stderr
bad = os.path.join(work, "bad.json")
with open(bad, "w") as fh:
    json.dump({"mode": "fedhelp_f", "loss": {"lambda_B": 0.5}}, fh)
print("exit status", fedhelp("run", bad))
