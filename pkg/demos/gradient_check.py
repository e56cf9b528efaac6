"""
Finite-difference check of the autodiff tape
============================================

Every primitive is compared against central differences on random
inputs, then every training objective is checked end to end on a
4-pixel, two-class model with its noise and categorical draws frozen.

    python demos/gradient_check.py
"""

import time

from sdvae.gradcheck import TOLERANCE, check_objectives, check_primitives

start = time.perf_counter()
primitives = check_primitives(trials=100)
objectives = check_objectives()
elapsed = time.perf_counter() - start

# one row per check, worst relative error over all trials
for r in primitives + objectives:
    print(f"{r.name:40s} {r.error:.2e}  {'ok' if r.ok else 'FAIL'}")

worst = max(primitives + objectives, key=lambda r: r.error)
print(f"\nworst {worst.name}: {worst.error:.2e} (tolerance {TOLERANCE:g}), {elapsed:.1f}s")
