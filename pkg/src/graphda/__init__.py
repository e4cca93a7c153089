"""Cross-graph semi-supervised node classification with contrastive views and minimax entropy."""

__version__ = "0.1.0"
