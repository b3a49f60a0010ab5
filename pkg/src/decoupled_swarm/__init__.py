"""Decoupled swarm learning for segmentation under label and feature skew.

Centers train a shared probabilistic segmentation model and a private
per-pixel label adaptation network; only the shared part is exchanged.
"""

__version__ = "0.1.0"
