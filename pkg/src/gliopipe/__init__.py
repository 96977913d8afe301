"""Two-stage glioma pipeline: whole-tumor 3D segmentation, then multi-task
classification of WHO grade, IDH mutation and 1p19q co-deletion from the
tumor bounding-box ROI."""

from .volume import (
    MODALITIES,
    TASKS,
    LabelTriple,
    MRIStudy,
    SegmentationMask,
    StudyError,
    Volume,
    assemble_channels,
    validate_study,
)

__all__ = [
    "MODALITIES", "TASKS", "LabelTriple", "MRIStudy", "SegmentationMask",
    "StudyError", "Volume", "assemble_channels", "validate_study",
]

__version__ = "0.1.0"
