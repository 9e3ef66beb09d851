"""Meta-discovery of novel classes from very limited unlabeled data.

Library layout:

- ``data``: datasets, known/novel splits, episodes, synthetic generators
- ``nets``/``autodiff``: differentiable model substrate (exact second-order
  meta-gradients)
- ``cata``: clustering-rule-aware task sampler
- ``pairsim``: ranking-statistics pseudo-labels and pair BCE
- ``maml``/``proto``: the two meta-discovery learners
- ``metrics``: permutation-invariant clustering accuracy, k-means baseline,
  evaluation protocol
- ``bounds``: uniform-stability bound and empirical stability probe
- ``experiment``/``cli``: configuration, orchestration, persistence, reports
"""

__version__ = "0.1.0"
