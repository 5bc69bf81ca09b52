"""Hybrid fine/coarse self-attention for length-reduced Transformer encoders.

Informative tokens keep their own representation; the rest are pooled into a
few coarse units before each feed-forward sub-layer.
"""
from .encoder import EncoderConfig, EncoderModel, forward, load_checkpoint, save_checkpoint
from .fca import (FcaConfig, FrozenEncoder, LengthSchedule, RetentionParams, derive_schedule,
                  fca_encoder_forward, fca_hybrid_sublayer)
from .informativeness import partition_topk, score_tokens
from .pipeline import TrainConfig, run_pipeline

__version__ = "0.1.0"
