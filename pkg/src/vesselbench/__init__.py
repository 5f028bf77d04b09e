"""Weakly supervised vessel segmentation workbench.

Pipeline: layer-separation pseudo labels (morphological closing + robust PCA
+ Otsu), self-paced training of a small dropout CNN with sparse annotation
refinement, and uncertainty-driven query selection, runnable end to end on
synthetic angiogram sequences with an oracle or live annotator.
"""

__version__ = "0.1.0"
