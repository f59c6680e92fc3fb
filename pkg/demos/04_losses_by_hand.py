"""The loss family on hand-sized inputs, plus the evaluation-count table.

The set structure is the efficiency story: a batch of n sets of size m
needs n*m^2 + n*(n-1) similarity evaluations instead of (n*m)^2.
"""

import math

import numpy as np

from blockgen import losses as ls

# hand anchors
loss, _ = ls.intra_set_loss(np.zeros((1, 1)), np.ones((1, 1)), 1.0, 0.0)
print(f"single-pair intra loss at s=0, tau=1, b=0: {loss.item():.6f}  (ln 2 = {math.log(2):.6f})")
loss, _ = ls.inter_set_loss(np.zeros((2, 2)), 1.0, 0.0)
print(f"two-set inter loss at r=0:               {loss.item():.6f}  (2 ln 2 = {2 * math.log(2):.6f})")
loss, _ = ls.neg_text_loss(np.zeros(1), np.zeros(1), 1.0)
print(f"word-order loss at equal sims:           {loss.item():.6f}  (ln 2)")

# a full batch
rng = np.random.default_rng(0)
n, m = 4, 10
intra = [rng.normal(scale=0.2, size=(m, m)) for _ in range(n)]
rep = rng.normal(scale=0.2, size=(n, n))
pos, neg = rng.normal(scale=0.2, size=n * m), rng.normal(scale=0.2, size=n * m)
total, report = ls.total_loss(intra, rep, 10.0, -2.0, pos_sims=pos, neg_sims=neg)
print(f"\nbatch of {n} sets of {m}: loss {report.value:.2f}, components {report.components}")

print("\nevaluation counts (set loss vs all-pairs):")
print(f"{'n':>4} {'m':>4} {'set':>8} {'all-pairs':>10} {'ratio':>8}")
for nn, mm in [(1, 5), (4, 10), (8, 5), (8, 10), (16, 20)]:
    a = ls.sets_eval_count(nn, mm)
    b = ls.all_pairs_eval_count(nn, mm)
    print(f"{nn:>4} {mm:>4} {a:>8} {b:>10} {a / b:>8.4f}")
