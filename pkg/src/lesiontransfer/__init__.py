"""Cross-domain lesion segmentation with image-level target labels.

A small numpy autodiff engine drives a dual-attention segmenter trained on a
labelled source domain and adapted to a tag-only target domain through
adversarial alignment, curriculum pseudo labels refined by superpixels, and
class-centroid consistence. ``lesiontransfer.kernels.BACKEND`` reports whether
the compiled loop kernels or the numpy fallbacks are in use.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
