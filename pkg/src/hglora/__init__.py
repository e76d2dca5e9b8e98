"""Hypergraph-enhanced low-rank adaptation for dual-encoder contrastive models."""

__version__ = "0.1.0"
