"""Weakly supervised salient object detection by alternating CRF refinement
and multi-scale FCN training on noisy seed annotations."""

__version__ = "0.1.0"
