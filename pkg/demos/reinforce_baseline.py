"""
Score-function gradients for a discrete latent
==============================================

With two classes and fixed rewards the expected surrogate gradient can
be enumerated exactly.  Sampling the class and weighting the score by
(reward - c) gives an unbiased estimate for any constant c; c only
changes the variance.
"""

import numpy as np

rng = np.random.default_rng(0)
logits = np.array([0.3, -0.4])
rewards = np.array([-90.0, -110.0])
p = np.exp(logits - logits.max())
p /= p.sum()

# d/dlogits of sum_k p_k R_k, by enumeration
exact = p * (rewards - p @ rewards)
print("exact gradient      ", exact)

draws = 100_000
k = rng.choice(2, size=draws, p=p)
score = np.eye(2)[k] - p  # d log p_k / d logits

for name, c in [("no baseline", 0.0), ("mean reward", p @ rewards), ("batch mean", rewards[k].mean())]:
    g = (rewards[k] - c)[:, None] * score
    se = g.std(axis=0, ddof=1) / np.sqrt(draws)
    print(f"{name:12s} mean {g.mean(axis=0)}  std err {se}")
