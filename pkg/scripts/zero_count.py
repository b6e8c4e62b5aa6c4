"""Brute-force zero counts of C e^{At} chi on windows of length T for the harmonic oscillator,
compared with the bound k*(T)."""
import argparse
import math

import numpy as np

from sbmhe.benchmark import harmonic_oscillator
from sbmhe.linear import k_star


def count(chi, a, T, n=4001):
    t = np.linspace(a, a + T, n)
    v = chi[0] * np.cos(t) + chi[1] * np.sin(t)
    tiny = np.abs(v) <= 1e-12 * np.linalg.norm(chi)
    return int(tiny.sum() + np.sum((v[:-1] * v[1:] < 0) & ~tiny[:-1] & ~tiny[1:]))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    for T in (math.pi / 2, math.pi, 2 * math.pi, 4 * math.pi):
        ks = k_star(harmonic_oscillator(), T)
        counts = [count(rng.normal(size=2), rng.uniform(0, T), T) for _ in range(a.trials)]
        hist = np.bincount(counts)
        print(f"T = {T:7.4f}  k* = {ks:5.2f}  max zeros = {max(counts)}  histogram = {hist.tolist()}")
