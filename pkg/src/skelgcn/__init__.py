"""Skeleton-sequence graph convolutional networks, built on a verifiable core.

The package provides:

* a small tape-based autodiff tensor library (:mod:`skelgcn.tensor`),
* skeletal graph construction and partition-normalized adjacency
  (:mod:`skelgcn.graph`),
* a channel-variable spatial-temporal attention block and the refined
  graph convolution built on it (:mod:`skelgcn.attention`),
* the full layered network (:mod:`skelgcn.network`),
* decoupled angular/norm embedding losses with closed-form gradients
  (:mod:`skelgcn.losses`),
* finite-difference gradient verification (:mod:`skelgcn.gradcheck`),
* synthetic fine-grained skeleton data (:mod:`skelgcn.synth`),
* a training loop, evaluation metrics, and the ``skelgcn`` command line
  (:mod:`skelgcn.train`, :mod:`skelgcn.cli`).
"""

from skelgcn.tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
