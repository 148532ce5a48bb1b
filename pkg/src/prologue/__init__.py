"""Dual-group image tokenizer with routed gradients, AR generation, and
enumeration diagnostics, at desk scale."""

from .ar import ARLossParts, ARModel, ARSequence, ar_loss, build_sequence, scale_gradient
from .data import (
    ImageBatch,
    ImageDataset,
    PatchGrid,
    load_cache,
    load_folder,
    patchify,
    save_cache,
    synth_shapes,
    unpatchify,
)
from .diagnostics import (
    DiscreteJoint,
    InfoReport,
    attention_maps,
    ce_decomposition,
    collapse_oracle,
    info_empirical,
    info_exact,
    linear_probe,
    random_joint,
)
from .errors import ConfigError, DataError, TrainingDivergedError
from .pipeline import (
    Checkpoint,
    RunConfig,
    TrainResult,
    lambda_sweep,
    load_checkpoint,
    save_checkpoint,
    train_onestage,
    train_prologue_post,
    train_stage1,
    train_stage2,
)
from .quantize import Codebook, ProbSTEOutput, VQOutput, codebook_stats, prob_ste, vq_encode
from .sampling import CFGConfig, generate, guided_logits, sample_grid, visual_scale_at
from .tokenizer import (
    EncoderOutput,
    PostTokenizer,
    ReconLoss,
    TokenGroups,
    TokenizerModel,
    recon_loss,
)

__version__ = "0.1.0"
