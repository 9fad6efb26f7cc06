"""Success prediction for open-vocabulary manipulation.

A contrastive cross-attention decoder over multi-level image representations
(scene, aligned, narrative) and instruction embeddings, with a pure-numpy
autodiff tape, dataset tooling, a synthetic task generator and an
experiment harness.
"""

__version__ = "0.1.0"
