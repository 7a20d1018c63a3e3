"""diffdef: conditional anatomical atlas construction with latent diffusion.

Generates deformation fields that warp a reference template into atlases of
condition-specific sub-populations, trained with a morphology-preservation
loss against registered neighborhoods. Ships its own reverse-mode engine,
2D phantom cohort generator, and registration baselines.
"""

import os as _os

# honor the thread cap before numpy initializes its BLAS thread pool
_threads = _os.environ.get("DIFFDEF_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import analysis, autoencoder, diffusion, engine, fields, nets, nnops
from .analysis import (AtlasMetrics, bending_energy, dice_score, displacement_norm,
                       folding_percent, jacobian_det_field, ncc, smoothness_metric)
from .atlas import (Cohort, DiffDefConfig, DiffDefModel, Neighborhood, Subject,
                    evaluate_atlas, generate_atlas, linear_atlas, morphology_loss,
                    sample_neighborhood, train_diffdef, unbiased_iterative_atlas)
from .autoencoder import AEConfig, LatentSample, decode_field, encode, train_autoencoder
from .diffusion import NoiseSchedule, build_schedule, ddpm_sample, epsilon_loss, q_sample
from .engine import ParamStore, Tensor
from .errors import (ArgumentError, DiffdefError, DomainError, FormatError,
                     NumericError, ShapeError, UnsupportedFormatError)
from .fields import (BorderPolicy, DisplacementField, Grid, LabelField, ScalarField,
                     compose_fields, sample_at, warp_image, warp_labels)
from .fileio import (load_cohort, load_model, read_field, save_cohort, save_model,
                     write_field)
from .phantoms import (PhantomSpec, make_cohort, make_phantom, reference_atlas,
                       ventricle_fraction)
from .registration import (RegConfig, RegistrationResult, iterative_register,
                           regnet_predict, train_regnet)
