"""Weakly supervised disease localization via masked variational attention.

The package trains an image classifier whose decision is forced through a
learned spatial mask. An encoder produces an attention map, two small heads
turn that map into the mean and spread of a per-pixel latent distribution,
and a sample from it is squashed and thresholded into the mask the
classifier sees. A KL penalty toward a standard normal prior prunes mask
support the classifier does not need, so the surviving support localizes
the class evidence; ground-truth boxes are used only for evaluation.
"""

from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "__version__"]
