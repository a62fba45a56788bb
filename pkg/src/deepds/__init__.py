"""Deep-learning downscaling of gridded Earth-science fields."""

from .datacube import DataCube, StaticFieldSet, load_cube, regrid_bilinear, spatial_subset, temporal_split
from .losses import LossSpec
from .networks import ArchitectureSpec, build_discriminator, build_model
from .preprocessing import PairingConfig, SamplePair, ScalerState, coarsen, fit_scaler, make_pairs
from .training import TrainConfig, cgan_train, supervised_train

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "DataCube",
    "LossSpec",
    "PairingConfig",
    "SamplePair",
    "ScalerState",
    "StaticFieldSet",
    "TrainConfig",
    "build_discriminator",
    "build_model",
    "cgan_train",
    "coarsen",
    "fit_scaler",
    "load_cube",
    "make_pairs",
    "regrid_bilinear",
    "spatial_subset",
    "supervised_train",
    "temporal_split",
]
