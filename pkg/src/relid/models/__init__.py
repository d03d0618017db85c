"""The language-identification systems assembled from ``relid.embednet``."""

from relid.models.config import ARCHITECTURES, ModelConfig
from relid.models.networks import LONG, SHORT, build_network, hgru_counts, hgru_emit_positions
from relid.models.training import (
    TrainedModel,
    e2e_config,
    extract_xvector,
    init_e2e,
    load_model,
    predict,
    save_model,
    segment_xvectors,
    train_e2e,
    train_entropy_dnn,
    train_hgru,
    train_seq_model,
    train_xvector,
)

__all__ = [
    "ARCHITECTURES", "LONG", "ModelConfig", "SHORT", "TrainedModel", "build_network", "e2e_config",
    "extract_xvector", "hgru_counts", "hgru_emit_positions", "init_e2e", "load_model", "predict",
    "save_model", "segment_xvectors", "train_e2e", "train_entropy_dnn", "train_hgru", "train_seq_model",
    "train_xvector",
]
