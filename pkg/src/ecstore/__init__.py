"""Latency and storage-cost optimization for erasure-coded storage."""

__version__ = "0.1.0"
