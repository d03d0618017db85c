#!/usr/bin/env python3
"""The command line pipeline, stage by stage, on the seconds-scale smoke config.

Every stage reads the artifacts of the ones before it from --out and writes
its own next to them, so a stage can be rerun alone. Swap in configs/desk3.cfg
(a few minutes per system) for numbers worth reading.

    python3 demos/03_cli_walkthrough.py [config]
"""
import os
import sys
import tempfile

from relid.cli import main

here = os.path.dirname(os.path.abspath(__file__))
config = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, os.pardir, "configs", "smoke.cfg")
out = tempfile.mkdtemp(prefix="relid_demo_")

stages = [
    ("gen-corpus", None), ("train-ubm", None), ("extract-stats", None), ("train-tvm", None),
    ("extract-ivectors", None),
    # the entropy DNN feeds the weighted system, so it is trained first
    ("train-model", "entropy_dnn"), ("train-model", "i_blstm"),
    ("train-backend", "baseline"), ("train-backend", "rwbw"),
]
for system in ("baseline", "rwbw", "i_blstm"):
    stages += [("score", system), ("evaluate", system)]
stages.append(("attn-dump", "i_blstm"))

for stage, system in stages:
    argv = [stage, "--config", config, "--out", out] + (["--system", system] if system else [])
    print(f"$ relid {' '.join(argv)}")
    code = main(argv)
    if code:
        sys.exit(code)

print(f"\nartifacts under {out}:")
for root, dirs, files in sorted(os.walk(out)):
    dirs.sort()
    depth = root[len(out):].count(os.sep)
    shown = sorted(files)[:4]
    more = f" (+{len(files) - 4} more)" if len(files) > 4 else ""
    print("  " * depth + (os.path.basename(root) or ".") + "/  " + " ".join(shown) + more)

# a stage whose inputs are missing says which stage to run first
print("\nscoring into an empty directory:", flush=True)
code = main(["score", "--config", config, "--out", os.path.join(out, "empty"), "--system", "rwbw"])
print(f"exit status {code}")
