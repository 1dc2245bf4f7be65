"""Rotation-equivariant patch-graph descriptors for drone/satellite image retrieval."""

__version__ = "0.1.0"
