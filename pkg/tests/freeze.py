"""Regenerate the frozen oracle values in tests/data (run from the repo root).

    python3 tests/freeze.py

The exact conditional tails start from the package's binomial PMFs (each
stored as an unevaluated double-double sum) so the comparison isolates
truncation, renormalization and convolution.
"""

import json
from fractions import Fraction
from pathlib import Path

import numpy as np

import oracles
from teamfdr.nulldist import binomial_dist

DATA = Path(__file__).with_name("data")

CONDITIONAL_CASES = [(20, 20, 0.5, 0.1), (50, 40, 0.3, 0.02), (200, 200, 0.48, 0.005)]


def dd_fractions(dist) -> list[Fraction]:
    lo = dist.pmf_lo if dist.pmf_lo is not None else np.zeros_like(dist.pmf)
    return [Fraction(float(h)) + Fraction(float(l)) for h, l in zip(dist.pmf, lo)]


def freeze_conditional():
    out = []
    for n1, n2, theta, c in CONDITIONAL_CASES:
        tail = oracles.exact_conditional_tail(dd_fractions(binomial_dist(n1, theta)),
                                              dd_fractions(binomial_dist(n2, theta)), c)
        out.append({"n1": n1, "n2": n2, "theta": theta, "c_prev": c,
                    "tail_hex": [float(t).hex() for t in tail]})
    return out


def freeze_binomial():
    out = []
    for n, theta in [(0, 0.3), (1, 0.3), (2, 0.5), (4, 0.5), (37, 0.123), (500, 0.5),
                     (1000, 0.01)]:
        pmf = oracles.exact_binomial_pmf(n, theta)
        out.append({"n": n, "theta": theta, "pmf": [float(p) for p in pmf],
                    "tail": [float(t) for t in oracles.exact_tail(pmf)]})
    return out


def main():
    DATA.mkdir(exist_ok=True)
    (DATA / "conditional_null_exact.json").write_text(
        json.dumps(freeze_conditional(), indent=1) + "\n")
    (DATA / "binomial_exact.json").write_text(json.dumps(freeze_binomial(), indent=1) + "\n")


if __name__ == "__main__":
    main()
