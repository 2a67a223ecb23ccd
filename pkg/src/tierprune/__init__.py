"""Personalized tiered pruning for a mini Vision Transformer.

Probe a trained model with random layer-group ablations, classify each
prunable linear layer as personalized, generic, or other against the
baseline-loss threshold, then iteratively magnitude-prune every tier at
its own rate with fine-tuning on the user's data.
"""

__version__ = "0.1.0"
