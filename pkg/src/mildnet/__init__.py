"""Multi-layer descriptor image embeddings with triplet training, an
approximate-nearest-neighbor forest, and an incremental catalog
retrieval pipeline."""

from .ann import (
    AnnForest,
    IndexConfig,
    brute_force_knn,
    build_index,
    collect_candidates,
    load_index,
    query_knn,
    save_index,
)
from .binio import FormatError
from .dataset import (
    ManifestError,
    TripletRecord,
    largest_remainder_counts,
    load_manifest,
    sample_triplets,
    save_manifest,
    split_records,
)
from .features import (
    COLOR_DIM,
    FUSED_DIM,
    PATTERN_DIM,
    STRUCTURE_DIM,
    EmbeddingStore,
    FusedFeature,
    FusionWeights,
    RandomProjectionExtractor,
    default_extractors,
    extract_fused,
    fused_distance,
    fused_distances_to,
    lab_histogram,
    pack_fused,
    rgb_to_lab,
    unpack_fused,
)
from .images import (
    AugmentParams,
    AugmentSpec,
    apply_augment,
    augment,
    decode_image,
    encode_ppm,
    read_image,
    resize_normalize,
    sample_augment_params,
    write_image,
)
from .losses import (
    LOSS_KINDS,
    LossConfig,
    contrastive_triplet_loss,
    euclidean_distance,
    hinge_triplet_loss,
    triplet_accuracy,
    triplet_loss,
)
from .model import (
    POOL_NAMES,
    PRESETS,
    Embedding,
    ForwardCache,
    ModelConfig,
    backward_embed,
    build_network,
    concat_width,
    count_params,
    forward_embed,
    freeze_layers,
    frozen_param_names,
    iter_ablation_rows,
    load_weights,
    parse_tap_labels,
    save_weights,
    tiny_config,
)
from .ops import ConvSpec, DimensionError, ParameterError, finite_diff_gradcheck
from .pipeline import (
    GENDERS,
    CatalogError,
    CatalogItem,
    MiningBounds,
    PipelineConfig,
    RunStats,
    load_catalog,
    load_results,
    load_state,
    mine_triplets,
    partition_catalog,
    run_batch,
    save_catalog,
    save_results,
    save_state,
)
from .synth import class_label_from_path, family_name, render_example, synth_generate
from .train import (
    OPTIMIZER_KINDS,
    OptimizerState,
    TrainingDiverged,
    TrainRunConfig,
    embed_images,
    evaluate,
    load_checkpoint,
    optimizer_step,
    rmsprop_step,
    save_checkpoint,
    sgd_momentum_step,
    train_epoch,
    train_run,
)

__version__ = "0.1.0"
