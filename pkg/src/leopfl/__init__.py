"""Desk-scale simulator for decentralized personalized federated learning
over a LEO Walker Star constellation, with SR preprocessing and
PQ-index-guided prune/regrow of personalized masks."""

__version__ = "0.1.0"
