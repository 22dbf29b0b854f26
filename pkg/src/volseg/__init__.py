"""Volumetric segmentation pipeline toolkit.

Data loading and sampling, augmentation, target encoding, sliding-window and
chunked inference around a pluggable predictor, watershed decoding and
evaluation metrics for anisotropic EM volumes.
"""

__version__ = "0.1.0"
