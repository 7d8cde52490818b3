#!/usr/bin/env python3
"""Measure how the obfuscation-key work factor scales brute-force cost.

Derives the per-guess cost at several iteration counts and reports the
slowdown relative to a single hash, so the offline-guessing margin of the
default work factor can be checked on the actual deployment hardware.

Usage: python3 scripts/bench_work_factor.py [--repeats N]
"""
import argparse
import time

from nusa.crypto_core import DEFAULT_WORK_FACTOR, derive_obfuscation_key

PERSONAL = "ROSSI|MARIO|1980-01-01|RSSMRA80A01H501U"
SALT = bytes.fromhex("6e752e73612d73616c74")


def time_once(iterations: int, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        derive_obfuscation_key(PERSONAL, SALT, iterations=iterations)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    base = time_once(1, args.repeats)
    print(f"{'iterations':>12s} {'seconds':>12s} {'vs 1 hash':>12s}")
    for exp in (8, 12, 16):
        n = 2 ** exp
        t = time_once(n, args.repeats)
        print(f"{n:>12d} {t:>12.6f} {t / base:>11.1f}x")
    t_default = time_once(DEFAULT_WORK_FACTOR, args.repeats)
    per_day = 86400 / t_default
    print(f"\ndefault work factor {DEFAULT_WORK_FACTOR}: {t_default:.4f}s per guess "
          f"(~{per_day:,.0f} guesses/day/core)")


if __name__ == "__main__":
    main()
