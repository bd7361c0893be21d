"""Q-space scalar measures from a stretched-exponential diffusion representation.

The signal along each gradient direction is represented as
``E = exp(-(b D)**alpha)``; per-direction ``(D, alpha)`` pairs are fitted from
multi-shell data and integrated over q-space to give the return-to-origin
probability (RTOP), Q-space mean square displacement (QMSD) and Q-space mean
fourth-order displacement (QMFD).
"""

__version__ = "0.1.0"

from .exceptions import (
    DataError,
    EstimationError,
    NumericalError,
    RankDeficientError,
    StretchqError,
)
from .acquisition import (
    GradientScheme,
    b_from_q,
    group_shells,
    match_directions,
    parse_gradient_scheme,
    q_from_b,
    resample_shell_sh,
)
from .signal_model import StretchedParams, invert_diffusivity, predict_attenuation
from .fitting import fit_dti, fit_stretched_direction, fit_stretched_volume, fit_stretched_voxel
from .qspace import (
    compute_maps,
    moment_analytic,
    moment_direct,
    moment_expansion,
    rtop_dti,
)
from .oracle import QuadratureSpec, brute_force_moment
from .phantom import PhantomSpec, Region, generate_phantom, preset_spec
from .analysis import bmax_sweep, pearson
from .volume_io import Volume4D, read_nifti, write_nifti

__all__ = [
    "DataError",
    "EstimationError",
    "NumericalError",
    "RankDeficientError",
    "StretchqError",
    "GradientScheme",
    "b_from_q",
    "q_from_b",
    "group_shells",
    "match_directions",
    "parse_gradient_scheme",
    "resample_shell_sh",
    "StretchedParams",
    "invert_diffusivity",
    "predict_attenuation",
    "fit_dti",
    "fit_stretched_direction",
    "fit_stretched_volume",
    "fit_stretched_voxel",
    "compute_maps",
    "moment_analytic",
    "moment_direct",
    "moment_expansion",
    "rtop_dti",
    "QuadratureSpec",
    "brute_force_moment",
    "PhantomSpec",
    "Region",
    "generate_phantom",
    "preset_spec",
    "bmax_sweep",
    "pearson",
    "Volume4D",
    "read_nifti",
    "write_nifti",
]
