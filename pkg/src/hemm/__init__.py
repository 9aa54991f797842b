"""Heterogeneous-effect mixture models for subgroup discovery.

A mixture over covariates assigns each unit to latent subgroups; each
subgroup carries its own treatment coefficient on top of shared outcome
heads, so the subgroup with the largest coefficient is the one where
treatment helps most.
"""

from .core import MixtureParams, ModelParams, OutcomeParams, predict_cate, predict_cates
from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, stratified_split, standardize
from .errors import DegeneratePosteriorError, InvalidInputError, NumericalError, SchemaError
from .inference import Grid, TrainConfig, grid_search, train_elbo, train_em

__version__ = "0.1.0"
