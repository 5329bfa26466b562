"""facepipe: a face-representation pipeline toolkit.

Subpackages cover the whole workflow: `forge` (tag-constrained identity
clustering), `faceproc` (alignment, mirroring, synthetic worlds), `layers` +
`network` (a small bias-free CNN built from scratch), `objective` + `trainer`
(combined identification/verification training), and `evaluate` (pair
verification, open-set identification, video pairs).
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
