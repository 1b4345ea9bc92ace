"""Bayesian inverse problems with learned score priors and annealed HMC.

The package trains noise-conditional score networks by denoising score
matching, pairs them with analytic likelihood scores for linear forward
models (masked-Fourier MRI, denoising, inpainting, blur), and samples full
posteriors with Metropolis-Hastings-corrected annealed Hamiltonian Monte
Carlo, yielding posterior sample batches and pixelwise uncertainty maps.
"""

from .dsm import (
    ScoreMatchingEstimator,
    TrainConfig,
    TrainingDivergedError,
    backprop_check,
    dsm_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .hmc import (
    AnnealedHMCSampler,
    AnnealingSchedule,
    ChainState,
    PosteriorSampleSet,
    annealed_sample,
    expected_denoised_sample,
    leapfrog,
    mh_step,
    path_integral_logdiff,
)
from .metrics import UncertaintyMap, psnr, uncertainty_map
from .network import ConvScoreNetwork, MlpScoreNetwork, spectral_normalize
from .numerics import (
    RngStream,
    channels_to_complex,
    complex_to_channels,
    fft2,
    gaussian_sample,
    ifft2,
    simpson_line_integral,
)
from .operators import (
    CartesianMaskSpec,
    CircularBlurOperator,
    ForwardOperator,
    GaussianLikelihood,
    IdentityOperator,
    MaskedFourierOperator,
    PixelMaskOperator,
    make_mask,
    simulate_measurement,
    zero_filled,
)
from .phantoms import PhantomSpec, make_phantoms
from .score_models import (
    GaussianMixtureScore,
    IsotropicGaussianScore,
    ScoreModel,
    two_moons_mixture,
)
from .tensorio import load_tensor, save_pgm, save_tensor

__version__ = "0.1.0"

__all__ = [
    "AnnealedHMCSampler",
    "AnnealingSchedule",
    "CartesianMaskSpec",
    "ChainState",
    "CircularBlurOperator",
    "ConvScoreNetwork",
    "ForwardOperator",
    "GaussianLikelihood",
    "GaussianMixtureScore",
    "IdentityOperator",
    "IsotropicGaussianScore",
    "MaskedFourierOperator",
    "MlpScoreNetwork",
    "PhantomSpec",
    "PixelMaskOperator",
    "PosteriorSampleSet",
    "RngStream",
    "ScoreMatchingEstimator",
    "ScoreModel",
    "TrainConfig",
    "TrainingDivergedError",
    "UncertaintyMap",
    "annealed_sample",
    "backprop_check",
    "channels_to_complex",
    "complex_to_channels",
    "dsm_loss",
    "expected_denoised_sample",
    "fft2",
    "gaussian_sample",
    "ifft2",
    "leapfrog",
    "load_checkpoint",
    "load_tensor",
    "make_mask",
    "make_phantoms",
    "mh_step",
    "path_integral_logdiff",
    "psnr",
    "save_checkpoint",
    "save_pgm",
    "save_tensor",
    "simpson_line_integral",
    "simulate_measurement",
    "spectral_normalize",
    "train",
    "two_moons_mixture",
    "uncertainty_map",
    "zero_filled",
]
