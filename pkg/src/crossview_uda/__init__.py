"""Two-phase cross-view / cross-modal unsupervised domain adaptation at desk scale."""

from crossview_uda.config import (
    Clip,
    EmbeddingBatch,
    ModalityId,
    SampleRecord,
    SyncGroup,
    TrainConfig,
    ViewId,
    validate_config,
)

__version__ = "0.1.0"

__all__ = [
    "Clip",
    "EmbeddingBatch",
    "ModalityId",
    "SampleRecord",
    "SyncGroup",
    "TrainConfig",
    "ViewId",
    "validate_config",
]
