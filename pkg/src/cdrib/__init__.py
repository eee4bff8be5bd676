"""Cross-domain cold-start recommendation with variational bipartite graph encoders."""

__version__ = "0.1.0"
