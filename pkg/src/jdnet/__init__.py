"""Single-image deraining: a residual streak-prediction network built from
pairwise self-attention, scale-aggregation and self-calibrated convolution,
implemented on a self-contained numpy autodiff core.
"""

from .tensor import (
    BatchNormParams,
    ConvParams,
    GradTape,
    NumericsError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)
from .network import (
    JDNetParams,
    JointUnitParams,
    ScaleAggParams,
    SelfAttentionParams,
    SelfCalibConvParams,
    build_jdnet,
    jdnet_forward,
    joint_unit_forward,
    scale_agg_forward,
    sc_conv_forward,
    self_attention_forward,
)
from .losses import SsimConfig, mae_loss, mse_loss, neg_ssim_loss, psnr, ssim
from .data import (
    DatasetManifest,
    ImagePair,
    RainSynthConfig,
    load_manifest,
    make_synthetic_dataset,
    random_crop,
    synthesize_rain,
    to_tensor,
)
from .trainer import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    evaluate,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)
from .gradcheck import finite_diff_check, run_suite

__version__ = "0.1.0"
