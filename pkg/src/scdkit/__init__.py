"""Scene change detection toolkit.

Language-guided change captioning, cross-modal feature enhancement,
geometric-semantic mask refinement, a semi-automatic annotation pipeline
with a human review loop, and the matching evaluation/sweep harness.
Foundation models (captioner, text encoder, segmenter, tracker, dense
matcher, retriever) plug in behind adapter protocols; deterministic fakes
ship with the package so every stage runs at desk scale.
"""

__version__ = "0.1.0"

from .masks import (
    ChangeClass,
    ChangeMask,
    CommonViewMask,
    ImagePair,
    MaskInstance,
    overlap_ratio,
    to_binary,
    union_masks,
)

__all__ = [
    "ChangeClass",
    "ChangeMask",
    "CommonViewMask",
    "ImagePair",
    "MaskInstance",
    "overlap_ratio",
    "to_binary",
    "union_masks",
    "__version__",
]
