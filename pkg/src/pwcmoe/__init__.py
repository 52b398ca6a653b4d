"""Privacy-aware wireless collaborative mixture-of-experts toolkit.

Subpackages: tensor (autodiff core), corpus, moe (classifier), predictor
(importance scoring), channel (uplink model), scheduler (token offloading),
harness + cli (experiments).
"""

__version__ = "0.1.0"
