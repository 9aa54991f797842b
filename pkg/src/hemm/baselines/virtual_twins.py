"""Virtual Twins regressor (VT-R).

Stage one fits bagged trees per arm to predict both potential outcomes for
every training row; stage two regresses their difference on the
covariates with a single tree whose leaves describe the subgroups.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidInputError
from ..evaluation import CatePredictions
from .cart import BaggedTrees, CartTree


@dataclass(frozen=True)
class VTConfig:
    n_trees: int = 20
    stage1_depth: int = 6
    stage2_depth: int = 3
    min_samples_leaf: int = 5
    seed: int = 0

    def to_dict(self):
        return asdict(self)


class VirtualTwins:
    name = "vt"

    def __init__(self, cfg=None):
        self.cfg = cfg or VTConfig()

    def fit(self, data):
        cfg = self.cfg
        arms = [data.t == a for a in (0, 1)]
        if not all(m.any() for m in arms):
            raise InvalidInputError("both treatment arms must be non-empty")
        criterion = "gini" if data.outcome_kind == "binary" else "mse"
        X = data.x
        self.arm_models = [
            BaggedTrees(cfg.n_trees, cfg.stage1_depth, cfg.min_samples_leaf, criterion,
                        seed=[cfg.seed, a]).fit(X[m], data.y[m])
            for a, m in enumerate(arms)
        ]
        diff = self.arm_models[1].predict(X) - self.arm_models[0].predict(X)
        self.tree = CartTree(cfg.stage2_depth, cfg.min_samples_leaf, "mse").fit(X, diff)
        self.feature_names = list(data.cont_names) + list(data.disc_names)
        return self

    def predict(self, data):
        X = data.x
        f0, f1 = (m.predict(X) for m in self.arm_models)
        return CatePredictions(f0=f0, f1=f1, score=self.tree.predict(X))

    def rules(self):
        return self.tree.export_text(self.feature_names)


def fit_virtual_twins(data, cfg=None):
    """Returns ``(fitted VirtualTwins, stage-two subgroup tree)``."""
    vt = VirtualTwins(cfg).fit(data)
    return vt, vt.tree
