"""Ensemble grayscale denoising: manipulate, denoise, realign, fuse."""

from .image import add_awgn, clip_unit, extract_patches, psnr, read_pgm, write_pgm
from .freq import FrequencyMaskSpec, dct2, idct2, psd, radial_mask
from .manip import (ALL_MODE_IDS, DIHEDRAL_MODE_IDS, FREQUENCY_MODE_IDS,
                    BranchStack, build_branch_stack, get_mode, manipulate,
                    realign, simple_average)
from .denoise import (DctThresholdDenoiser, Denoiser, DenoiserTrainConfig,
                      IdentityDenoiser, TinyDenoiser, dct_threshold_denoise,
                      train_denoiser)
from .fusion import (FusionModel, FusionTrainConfig, evaluate_ensembles,
                     load_stack, save_stack, train_fusion)
from .auxloss import (AuxTrainConfig, ErrorEstimator, ImageLearningDenoiser,
                      estimator_target, psnr_stability, stability_report,
                      train_image_learning_aux, train_with_auxiliary_loss)
from .toydata import load_toy_dataset

__version__ = "0.1.0"
