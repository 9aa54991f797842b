"""Comparison effect estimators: Linear-1, Linear-2, k-NN and Virtual Twins."""

from ..errors import InvalidInputError
from .cart import BaggedTrees, CartTree, best_split
from .linear import LinearRegression, LinearSingle, LinearTwo, LogisticRegression, fit_linear_single, fit_linear_two
from .neighbors import KNNCate, knn_cate
from .virtual_twins import VirtualTwins, VTConfig, fit_virtual_twins

BASELINES = {
    "linear1": lambda **kw: LinearSingle(),
    "linear2": lambda **kw: LinearTwo(),
    "knn": lambda k=10, **kw: KNNCate(k),
    "vt": lambda seed=0, **kw: VirtualTwins(VTConfig(seed=seed)),
}


def make_baseline(name, **kwargs):
    try:
        return BASELINES[name](**kwargs)
    except KeyError:
        raise InvalidInputError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}") from None


__all__ = [
    "BASELINES", "BaggedTrees", "CartTree", "KNNCate", "LinearRegression", "LinearSingle",
    "LinearTwo", "LogisticRegression", "VTConfig", "VirtualTwins", "best_split",
    "fit_linear_single", "fit_linear_two", "fit_virtual_twins", "knn_cate", "make_baseline",
]
