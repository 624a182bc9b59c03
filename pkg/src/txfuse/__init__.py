"""Fraud-account detection on Ethereum from fused transaction-language
and masked-graph-autoencoder embeddings."""

__version__ = "0.1.0"
