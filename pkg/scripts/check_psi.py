"""Sample psi(t,T) over random small instances and print the histogram by divergence class.

    python scripts/check_psi.py [--config configs/psi.cfg] [--samples N]
"""

import argparse
import sys

from cqbandit.harness import build_config, format_histogram, psi_check


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/psi.cfg")
    ap.add_argument("--samples", type=int)
    ap.add_argument("--seed", type=int)
    a = ap.parse_args()
    cfg = build_config(a.config, {"psi_samples": a.samples, "seed": a.seed})
    rep = psi_check(cfg)
    print(format_histogram(rep.histogram))
    print(f"{len(rep.samples)} samples, {len(rep.violations)} violations, {rep.seconds:.1f}s")
    return 0 if rep.ok() else 1


if __name__ == "__main__":
    sys.exit(main())
