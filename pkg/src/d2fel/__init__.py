"""Diverse deep feature ensembles for person retrieval, at desk scale."""

__version__ = "0.1.0"
