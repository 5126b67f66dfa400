"""Next-event prediction on clinical event streams, desk scale.

Pipeline: synthesize Markov cohorts with exact oracles, sample and
serialize next-event instruction pairs, train a miniature causal decoder,
extract frozen mean-pooled embeddings, and evaluate them on classification
and survival tasks against count-based baselines.
"""

__version__ = "0.1.0"
