"""Finite-difference check of every layer; prints the worst parameter per group.

    python3 scripts/gradcheck_report.py [--seed 0] [--eps 1e-5] [--tolerance 1e-4]
"""

import argparse
import sys
import time

from sdrgnn import gradcheck


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eps", type=float, default=1e-5)
    ap.add_argument("--tolerance", type=float, default=1e-4)
    args = ap.parse_args()
    t0 = time.perf_counter()
    ok = gradcheck.report(gradcheck.run_suite(args.seed, args.eps), args.tolerance)
    print(f"{'pass' if ok else 'FAIL'} in {time.perf_counter() - t0:.1f}s")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
