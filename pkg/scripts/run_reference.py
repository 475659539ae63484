"""Reference experiment: average queue length per policy with +-1 std across instances.

    python scripts/run_reference.py [--config configs/main.cfg] [--reps N] [--beta-scale S]
"""

import argparse
import time

import numpy as np

from cqbandit.harness import build_config, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/main.cfg")
    ap.add_argument("--reps", type=int)
    ap.add_argument("--T", type=int)
    ap.add_argument("--beta-scale", type=float)
    ap.add_argument("--out")
    a = ap.parse_args()
    cfg = build_config(a.config, {"reps": a.reps, "T": a.T, "beta_scale": a.beta_scale, "out": a.out})
    t0 = time.time()
    res = run_experiment(cfg)
    print(f"T={cfg.T} reps={cfg.reps} beta_scale={cfg.beta_scale}  ({time.time() - t0:.0f}s)")
    print(f"{'policy':<12} {'Q(T) mean':>10} {'std':>8} {'peak mean Q':>12} {'regret':>8}")
    for name in cfg.policies:
        us = res.group(name)
        finals = np.array([u.q[-1] for u in us], float)
        curve = res.mean_curve(name)
        regret = np.mean([u.q[-1] - u.q_star[-1] for u in us])
        print(f"{name:<12} {finals.mean():>10.1f} {finals.std(ddof=1) if len(finals) > 1 else 0:>8.1f} "
              f"{curve.max():>12.1f} {regret:>8.1f}")
    for key, path in res.files.items():
        print(f"{key}: {path}")


if __name__ == "__main__":
    main()
