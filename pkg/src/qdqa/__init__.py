"""Desk-scale toolkit for compositional video question answering.

Subpackages cover question decomposition graphs, consistency metrics, a
small reverse-mode tensor engine, the clip aligner and graph answer
aggregator models, synthetic data generation, an LLM decomposition
pipeline, and a training harness.
"""

__version__ = "0.1.0"
