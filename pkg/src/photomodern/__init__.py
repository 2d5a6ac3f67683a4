"""Multi-reference old photo modernization via photorealistic style transfer."""

from .backbone import PSTNet, adain, load_checkpoint, save_checkpoint, stylize_global, wct
from .datagen import (
    EvalPair,
    SyntheticSample,
    apply_sit,
    apply_svt,
    fill_unmasked,
    make_eval_pair,
    make_sample,
    partition_regions,
)
from .degradations import (
    adjust_colors,
    color_jitter,
    degrade_blur,
    degrade_jpeg,
    degrade_noise,
    degrade_resize_artifact,
    register_degradation,
)
from .imageops import (
    RegionMaskSet,
    laplacian_merge,
    laplacian_split,
    load_image,
    load_label_map,
    local_mean,
    local_std,
    resize,
    save_image,
)
from .losses import (
    LossWeights,
    PatchDiscriminator,
    adversarial_losses,
    contextual_loss,
    make_extractor,
    masked_l1,
    perceptual_loss,
    smoothness_loss,
    stage2_loss,
    stage3_loss,
)
from .merger import ModernizerNet, RefineUNet, SpatialAttention, merge_results, modernize
from .metrics import attention_miou, evaluate, psnr, register_metric, ssim
from .seeds import derive_seed, make_rng
from .stylecode import StylePredictor, StylizedResult, apply_adain, stylize_single
from .toydata import make_toy_corpus
from .training import TrainConfig, load_modernizer, parse_config, train

__version__ = "0.1.0"
