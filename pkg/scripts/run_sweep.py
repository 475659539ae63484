"""Sweep over slack, K or d; prints final mean queue length per (point, policy).

    python scripts/run_sweep.py configs/slack_sweep.cfg [--reps N] [--beta-scale S]
"""

import argparse

import numpy as np

from cqbandit.harness import build_config, run_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--reps", type=int)
    ap.add_argument("--T", type=int)
    ap.add_argument("--beta-scale", type=float)
    ap.add_argument("--out")
    a = ap.parse_args()
    cfg = build_config(a.config, {"reps": a.reps, "T": a.T, "beta_scale": a.beta_scale, "out": a.out})
    res = run_sweep(cfg)
    for key, _ in cfg.sweep_points():
        for name in cfg.policies:
            us = res.group(name, key)
            if not us:
                continue
            finals = np.array([u.q[-1] for u in us], float)
            print(f"{key:<14} {name:<12} Q(T) = {finals.mean():8.1f} +- {finals.std():6.1f}")
    for key, reason in res.skipped:
        print(f"{key:<14} skipped: {reason}")


if __name__ == "__main__":
    main()
