"""Desk-scale machine unlearning lab.

Modules:
    data        datasets, splits, forget/retain partitions
    backend     small-classifier training, evaluation, embeddings, confidences
    scores      entanglement, memorization, confidence-proxy, rank statistics
    unlearners  the algorithm zoo behind one unlearn() interface
    metrics     tug-of-war scores, membership inference, disagreement
    rum         refine-then-sequence pipeline with retain bookkeeping
    harness     experiment configs, CLI, run records, aggregation, plots
"""

__version__ = "0.1.0"
