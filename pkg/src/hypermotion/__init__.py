"""Multi-agent highway trajectory prediction with multi-scale hypergraphs.

A numpy reverse-mode autodiff core backs a graph-based multi-modal
predictor and a hypergraph-encoded conditional VAE generator.
"""

__version__ = "0.1.0"
