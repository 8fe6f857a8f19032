#!/usr/bin/env python3
"""Reproduce the wait-time table: simulated, theoretical, and bound columns.

Runs the full default grid (two (alpha, b) points x c in {1,2} x both
rerandomization settings at n = 25000) and writes wait_times.csv next to
this script. Pass any `psiwca queue-experiments` flags to override.
"""
import os
import sys

from psiwca.cli import main

if __name__ == "__main__":
    out = os.path.join(os.path.dirname(__file__), "wait_times.csv")
    argv = ["queue-experiments", "--out", out] + sys.argv[1:]
    code = main(argv)
    if code == 0:
        print(f"wrote {out}")
    sys.exit(code)
