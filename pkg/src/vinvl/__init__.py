"""Desk-scale region-feature vision-language pipeline.

Detection-vocabulary merging and class-aware sampling, class-agnostic NMS
region extraction, a word-tag-region transformer trained with a masked
token loss and a 3-way contrastive loss, and downstream task heads, all on
a small reverse-mode autodiff core over float64 numpy arrays.
"""

__version__ = "0.1.0"
