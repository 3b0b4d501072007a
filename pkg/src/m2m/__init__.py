"""Self-supervised joint demosaicking and denoising of RAW bursts.

The package trains a residual demosaicking CNN from pairs of mosaicked frames
alone: one frame is demosaicked, warped onto the other by an estimated affine
map, masked back to the CFA and compared against the second mosaic. Fine-tuning
the pretrained net on the ordered pairs of a single burst adapts it to that
scene and its noise.
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    ConvergenceWarning,
    DataError,
    DegenerateLossError,
    DegenerateMapError,
    M2MError,
    NumericError,
    OverlapError,
    RegistrationError,
    ShapeError,
)
from .imaging import (
    BayerFrame,
    CfaPattern,
    NoiseSpec,
    PlanarImage,
    add_noise,
    apply_mask,
    cfa_mask,
    demosaic_bilinear,
    embed_mosaic,
    load_bayer,
    load_image,
    mosaic,
    pack_phases,
    save_bayer,
    save_image,
    unpack_phases,
)
from .registration import (
    AffineMap,
    RegistrationConfig,
    estimate_affine,
    estimate_affine_bayer,
    overlap_fraction,
    upscale_map,
)
from .autodiff import (
    AdamState,
    BNState,
    Tensor,
    adam_step,
    add,
    batch_norm,
    conv3x3,
    depth_to_space,
    grad_check,
    masked_loss,
    relu,
    space_to_depth,
    sub,
    tensor_sum,
)
from .network import (
    NetParams,
    NetSpec,
    build_demosaick_net,
    build_denoise_net,
    count_params,
    forward_demosaick,
    forward_denoise,
    load_checkpoint,
    save_checkpoint,
)
from .m2m_train import (
    BurstPair,
    PairSchedule,
    TrainConfig,
    build_pair_schedule,
    finetune_burst,
    finetune_frames,
    m2m_loss,
    pretrain,
    pretrain_denoiser,
    simulate_burst,
    tnr_baselines,
    true_pair_map,
    warp_bicubic,
)
from .evalcli import (
    EvalReport,
    ExperimentConfig,
    load_config,
    make_natural_image,
    make_test_images,
    psnr,
    run_experiment,
    run_gradcheck_suite,
)

__version__ = "0.1.0"
