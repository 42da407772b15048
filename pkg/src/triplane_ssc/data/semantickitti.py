"""Import adapter for the SemanticKITTI voxel layout (stub).

The intended mapping: ``sequences/<seq>/voxels/<frame>.label`` (u16 labels,
256 x 256 x 32) and ``.invalid`` (packed bits) become ``gt_semantic`` and the
complement of ``valid_mask``; ``image_2/<frame>.png`` becomes ``rgb``; the
calibration file's ``P2`` and ``Tr`` give intrinsics and pose. Label
remapping to the 20-class learning map is required on import.
"""
from __future__ import annotations


def read_semantickitti_frame(root, sequence, frame):
    raise NotImplementedError(
        "SemanticKITTI ingestion is not implemented; use `triplane-ssc synth` for training data"
    )
