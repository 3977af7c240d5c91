"""Pinhole-to-panoramic domain adaptation for semantic segmentation.

Modules:
    datamodel    domain/image containers, dataset IO, training config
    synthdata    synthetic pinhole/panoramic benchmark with analytic distortion
    deformation  dense displacement fields, warping, scaling-and-squaring
    usm          deformation network, dual-view discriminator, morphing losses
    segnet       shared encoder, pinhole/panoramic heads, pixel gate
    dga          EMA teacher, pseudo-labels, class-mix, uncertainty-weighted loss
    trainer      source pre-training and the adaptation loop
    eval         confusion matrices, mIoU, per-angle breakdown
    cli          command-line entry points
"""

__version__ = "0.1.0"

from .datamodel import IGNORE, DomainSet, LabeledImage, Role, TrainConfig, load_config, validate_config
from .segnet import SegModel

__all__ = ["IGNORE", "DomainSet", "LabeledImage", "Role", "TrainConfig", "SegModel", "load_config",
           "validate_config", "__version__"]
