"""Selective state-space person re-identification at desk scale."""

from .backbone import Backbone, BiMbBlock, SsmParams, selective_scan
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    ShapeMismatchError,
    TruncatedBlobError,
    VersionMismatchError,
    load_checkpoint,
    load_into_model,
    model_from_checkpoint,
    save_checkpoint,
)
from .config import ModelConfig, TrainConfig, desk_model_config, desk_train_config
from .gradcheck import run_gradcheck
from .losses import (
    BnNeckHead,
    RatrConfig,
    SimilarityView,
    batch_hard_triplet,
    build_similarity_views,
    cosine_similarity_matrix,
    dktau,
    id_loss,
    negative_centroid_similarities,
    ratr,
    ratr_inter,
    ratr_intra,
    total_loss,
)
from .metrics import (
    RankedGallery,
    average_precision,
    branch_diversity_report,
    evaluate_map_cmc,
    ktau_exact,
)
from .mgfe import (
    Branch,
    FeatureBundle,
    FusionOp,
    ReidModel,
    build_model,
    extract_branch_feature,
    fuse_class_tokens,
    reinterleave_tokens,
    split_tokens,
)
from .synth import SynthSpec, desk_synth_spec, generate_synthetic_dataset
from .tokens import (
    EmbedConfig,
    PatchGrid,
    TokenEmbedding,
    TokenSequence,
    assemble_sequence,
    class_token_positions,
    compute_patch_grid,
    embed_image,
    interleave_tokens,
    patchify_project,
)
from .training import (
    PKSampler,
    TrainingDivergedError,
    evaluate_model,
    infer_features,
    lr_schedule,
    pk_sample,
    train,
    train_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
