from .checkpoint import (decode_weights, encode_weights, load_model, load_weights, model_from_weights,
                         save_model, save_weights, weights_digest)
from .model import (MODALITIES, Encoded, Forward, LossParts, MaskPlan, ModelConfig, ModelInputs, SpatialModel,
                    alibi_bias, embed_slides, encode, forward, fused_matrix, init_model, mome_block,
                    prepare_inputs, pretrain_loss, sample_mask)
from .train import PretrainConfig, PretrainResult, mask_batch, pretrain_run, probe_batch, probe_loss

__all__ = [
    "decode_weights", "encode_weights", "load_model", "load_weights", "model_from_weights",
    "save_model", "save_weights", "weights_digest",
    "MODALITIES", "Encoded", "Forward", "LossParts", "MaskPlan", "ModelConfig", "ModelInputs", "SpatialModel",
    "alibi_bias", "embed_slides", "encode", "forward", "fused_matrix", "init_model", "mome_block",
    "prepare_inputs", "pretrain_loss", "sample_mask",
    "PretrainConfig", "PretrainResult", "mask_batch", "pretrain_run", "probe_batch", "probe_loss",
]
