"""Desk-scale multiview self-supervised learning with centroid, Brownian and
singular value regularizers, plus a network-free particle simulator."""

__version__ = "0.1.0"
