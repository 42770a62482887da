"""Generative recommender with popularity-aware allocation between collaborative and semantic code tokens."""

__version__ = "0.1.0"
