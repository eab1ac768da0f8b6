"""Chunk-wise GBDT feature selection feeding a meta-learned MLP classifier."""

from . import cfsgb, dataset, errors, gbdt, maml, metrics

__all__ = ["cfsgb", "dataset", "errors", "gbdt", "maml", "metrics"]
__version__ = "0.1.0"
