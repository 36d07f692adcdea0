"""Unsupervised re-identification with feature-aware noise and cluster contrast.

Subpackages and modules:

- ``tensorcore``: numpy tensors, reverse-mode autodiff, Adam, gradient checks
- ``encoder``: small conv encoder (GAP, BN, L2 head) and fusion layer
- ``fana``: activation-guided pepper noise
- ``clustering``: cosine DBSCAN pseudo-labels
- ``memory``: momentum cluster memory banks
- ``losses``: cluster contrastive and consistency losses
- ``trainer``: the alternating clustering / training loop and checkpoints
- ``evalkit``: mAP and CMC
- ``toolkit``: tensor files, manifests, synthetic data, CLI, figures
"""

__version__ = "0.1.0"
