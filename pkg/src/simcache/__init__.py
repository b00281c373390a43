"""Similarity caching with online mirror ascent and randomized rounding."""
from .catalog import Catalog, CostModel, dissimilarity, rank
from .gain import caching_gain, total_cost
from .knn_index import LinearScanIndex, serve

__version__ = "0.1.0"

__all__ = ["Catalog", "CostModel", "LinearScanIndex", "caching_gain", "dissimilarity", "rank",
           "serve", "total_cost"]
