"""Desk-scale vision-language single object tracker.

A three-stage dual-stream backbone with asymmetric template/search
cross-attention and language-gated channel fusion, trained end to end with
box regression and a dense image-text matching loss, all on a minimal
float64 autodiff core.
"""

__version__ = "0.1.0"
