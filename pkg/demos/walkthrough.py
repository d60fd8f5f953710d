"""Run every demo config through the CLI and print the headline numbers.

    python3 demos/walkthrough.py [output_root]

Each subcommand writes into its own folder under ``output_root`` (default
``demo_out``).  The configs are sized to finish in a few minutes on one core.
"""

import json
import os
import sys
import time

from gnnssm.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))
ORDER = ("mp-check", "spectrum", "propagate", "train", "ring", "gpp")


def run(sub, root):
    out = os.path.join(root, sub)
    t = time.time()
    code = main([sub, "--config", os.path.join(HERE, "configs", f"{sub}.ini"), "--out", out])
    with open(os.path.join(out, "summary.json")) as f:
        summary = json.load(f)
    print(f"== {sub} (exit {code}, {time.time() - t:.1f} s)")
    return summary


def main_demo(root="demo_out"):
    s = run("mp-check", root)
    for lam, row in s.items():
        print(f"  lambda {lam}: z_mean {row['z_mean']:+.2f}, z_var {row['z_var']:+.2f}")

    s = run("spectrum", root)
    print(f"  median singular value {s['median_modulus']:.3f}, distance to 1: {s['eoc_distance']:.3f}")

    s = run("propagate", root)
    for label, ratio in s["energy_ratio"].items():
        print(f"  {label:>12}: energy(last) / energy(first) = {ratio:.3e}")

    s = run("train", root)
    print(f"  best val accuracy {s['best_val_metric']:.3f} at epoch {s['best_epoch']}, test {s['test_metric_at_best']:.3f}")

    for sub in ("ring", "gpp"):
        s = run(sub, root)
        for name, row in s["models"].items():
            print(f"  {name:>20}: {s['metric']} val {row['val_metric']:.3f}, test {row['test_metric']:.3f}")


if __name__ == "__main__":
    main_demo(*sys.argv[1:2])
