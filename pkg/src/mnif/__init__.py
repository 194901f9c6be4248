"""Mixtures of sine-activated implicit functions with a latent diffusion prior.

Submodules: ``numerics`` (autodiff), ``siren``, ``mixture``, ``trainers``,
``diffusion``, ``fields``, ``metrics``, ``storage``, ``config``, ``datasets``
and ``cli``.
"""

from .mixture import MnifConfig, MnifModel, collapse, init_mnif, mixture_forward
from .numerics import ContractError, DimensionError, Tensor, grad
from .siren import SirenConfig, init_siren

__all__ = [
    "ContractError",
    "DimensionError",
    "MnifConfig",
    "MnifModel",
    "SirenConfig",
    "Tensor",
    "collapse",
    "grad",
    "init_mnif",
    "init_siren",
    "mixture_forward",
]

__version__ = "0.1.0"
