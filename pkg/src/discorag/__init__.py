"""Retrieval-augmented generation guided by intra-chunk RST trees, an inter-chunk
rhetorical graph and a discourse-aware plan."""

__version__ = "0.1.0"
