"""Semi-supervised product quantization for compact-code image retrieval.

Numpy implementation of the GPQ training objectives (soft-assignment PQ,
N-pair PQ loss, cosine classifier, subspace entropy mini-max) together with
the retrieval side: packed binary codes, LUT-based asymmetric search and mAP
evaluation.
"""

__version__ = "0.1.0"
