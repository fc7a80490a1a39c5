"""patchguard: defect detection for high-resolution instrument imagery.

Combines foreground masking, native-resolution patch scoring and low-rank
adaptation of a frozen encoder, with two unsupervised detector backends, a
synthetic benchmark generator and a pixel-AUROC evaluation harness.
"""

__version__ = "0.1.0"

from .errors import PatchguardError  # noqa: F401
