"""Mitosis detection with an adversarially trained domain homogenizer.

A U-Net maps patches from different scanners into a common appearance
space; a domain classifier attached to its output is coupled through a
gradient reversal so the mapping strips scanner cues, while an anchor-based
detector localizes mitotic figures and hard negatives on the homogenized
images. Everything trains end to end under a single composite loss.
"""

__version__ = "0.1.0"
