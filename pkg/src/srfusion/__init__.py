"""Super-resolution by low-rank fusion of internal and external reconstructions.

The package builds a bank of preliminary HR images with two tailored
methods (self-similarity patch matching and coupled-dictionary decoding),
stacks them column-wise, and separates the shared low-rank structure from
sparse estimation errors and residual noise to produce the final SR image.
"""

from .bank import BankLabel, ImageBank, load_bank, save_bank
from .external import (
    DictionaryPair,
    FeaturePipeline,
    TrainingGroup,
    build_training_groups,
    external_sr,
    fit_feature_pipeline,
    generate_external_bank,
    lista_encode,
    soft_threshold,
    train_dictionary_pair,
)
from .fusion import (
    Decomposition,
    StackedMatrix,
    default_card,
    fuse,
    godec,
    hard_threshold_card,
    randomized_rank_r_project,
    rank_r_project,
    stack_images,
    unstack_images,
)
from .imaging import (
    ColorImage,
    ImagePlane,
    PatchGrid,
    add_gaussian_noise,
    aggregate_patches,
    bicubic_resize,
    degrade,
    derivative_features,
    extract_patches,
    high_pass_decompose,
    load_color,
    load_gray,
    mod_crop,
    rgb_to_luma,
    rgb_to_ycbcr,
    rotate90,
    save_png,
    ycbcr_to_rgb,
)
from .internal import (
    InternalConfig,
    MatchSet,
    generate_internal_bank,
    knn_patch_search,
    multiscale_sr,
    nlm_weights,
    single_step_sr,
    zoom_ladder,
)
from .metrics import (
    ErrorMap,
    OverlapStats,
    PreferenceMap,
    abs_error_map,
    error_map,
    overlap_stats,
    preference_map,
    psnr,
    sparsity_histogram,
    ssim,
)
from .pipeline import (
    BenchmarkReport,
    ExperimentConfig,
    load_config,
    run_benchmark,
    run_noise_sweep,
    run_quantity_curve,
    run_sr_pipeline,
    select_bank,
    train_dictionaries,
)

__version__ = "0.1.0"
