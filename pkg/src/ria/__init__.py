"""Ranking-infused listwise CTR model with an embedding cache for the rerank stage."""

__version__ = "0.1.0"
