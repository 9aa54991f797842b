"""Datasets: representation, the two-dimensional synthetic benchmark, file IO,
stratified splitting and standardization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, SchemaError

logger = logging.getLogger(__name__)

RESERVED = ("t", "y", "y0", "y1", "group")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observational samples ``(x_cont, x_disc, t, y)``.

    ``y0``/``y1`` hold both potential outcomes when known (simulations),
    ``group`` the ground-truth enhanced-subgroup label.  ``transform``
    records the standardization applied to ``x_cont``, if any.
    """

    x_cont: np.ndarray
    x_disc: np.ndarray
    t: np.ndarray
    y: np.ndarray
    outcome_kind: str = "binary"
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    group: np.ndarray | None = None
    cont_names: tuple = ()
    disc_names: tuple = ()
    transform: "Standardizer | None" = field(default=None, compare=False)

    def __post_init__(self):
        t = np.asarray(self.t).astype(int).reshape(-1)
        n = t.shape[0]
        x_cont = np.zeros((n, 0)) if self.x_cont is None else np.asarray(self.x_cont, dtype=float)
        x_disc = np.zeros((n, 0)) if self.x_disc is None else np.asarray(self.x_disc, dtype=float)
        if x_cont.size == 0 and not (x_cont.ndim == 2 and x_cont.shape[0] == n):
            x_cont = np.zeros((n, 0))
        if x_disc.size == 0 and not (x_disc.ndim == 2 and x_disc.shape[0] == n):
            x_disc = np.zeros((n, 0))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x_cont.ndim != 2 or x_disc.ndim != 2:
            raise InvalidInputError("covariate blocks must be two-dimensional")
        if not (x_cont.shape[0] == x_disc.shape[0] == n == y.shape[0]):
            raise InvalidInputError("all columns must have the same length")
        if not np.all((t == 0) | (t == 1)):
            raise InvalidInputError("treatment must be 0/1")
        if not np.all((x_disc == 0) | (x_disc == 1)):
            raise InvalidInputError("binary covariates must be 0/1")
        if self.outcome_kind not in ("binary", "continuous"):
            raise InvalidInputError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.outcome_kind == "binary" and not np.all((y == 0) | (y == 1)):
            raise InvalidInputError("binary outcome must be 0/1")
        obj = object.__setattr__
        obj(self, "x_cont", x_cont)
        obj(self, "x_disc", x_disc)
        obj(self, "t", t)
        obj(self, "y", y)
        for name in ("y0", "y1", "group"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=int if name == "group" else float).reshape(-1)
                if v.shape[0] != n:
                    raise InvalidInputError(f"{name} has {v.shape[0]} rows, expected {n}")
                obj(self, name, v)
        if (self.y0 is None) != (self.y1 is None):
            raise InvalidInputError("y0 and y1 must be given together")
        if self.y0 is not None:
            factual = np.where(t == 1, self.y1, self.y0)
            if not np.array_equal(factual, y):
                raise InvalidInputError("y must equal y1 where t=1 and y0 where t=0")
        cont_names = tuple(self.cont_names) or tuple(f"x{j}" for j in range(x_cont.shape[1]))
        disc_names = tuple(self.disc_names) or tuple(f"b{j}" for j in range(x_disc.shape[1]))
        if len(cont_names) != x_cont.shape[1] or len(disc_names) != x_disc.shape[1]:
            raise InvalidInputError("one name per covariate column required")
        obj(self, "cont_names", cont_names)
        obj(self, "disc_names", disc_names)

    @property
    def n(self):
        return self.t.shape[0]

    @property
    def d_cont(self):
        return self.x_cont.shape[1]

    @property
    def d_disc(self):
        return self.x_disc.shape[1]

    @property
    def x(self):
        """Continuous and binary covariates side by side, shape ``(n, d_c + d_b)``."""
        return np.hstack([self.x_cont, self.x_disc])

    @property
    def has_potential_outcomes(self):
        return self.y0 is not None

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(
            self,
            x_cont=self.x_cont[idx],
            x_disc=self.x_disc[idx],
            t=self.t[idx],
            y=self.y[idx],
            y0=pick(self.y0),
            y1=pick(self.y1),
            group=pick(self.group),
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Two covariates uniform on the unit square with a circular enhanced subgroup.

    Treatment is Bernoulli(``p_treat_left``) for ``x0 < split`` and
    Bernoulli(``p_treat_right``) otherwise.  Potential-outcome probabilities::

        p0(x) = base + triangle_boost * 1{x1 > x0}
        p1(x) = p0(x) + effect + subgroup_boost * 1{|x - center| < radius}
    """

    n: int = 1000
    seed: int = 0
    center: tuple = (0.5, 0.5)
    radius: float = 0.25
    split: float = 0.5
    p_treat_left: float = 0.4
    p_treat_right: float = 0.6
    base: float = 0.2
    triangle_boost: float = 0.3
    effect: float = 0.2
    subgroup_boost: float = 0.3

    def __post_init__(self):
        if self.n < 1:
            raise InvalidInputError("n must be positive")
        if not self.radius > 0:
            raise InvalidInputError("radius must be positive")
        for p in (self.p_treat_left, self.p_treat_right):
            if not 0 <= p <= 1:
                raise InvalidInputError("treatment probabilities must lie in [0, 1]")
        lo = self.base
        hi = self.base + self.triangle_boost + self.effect + self.subgroup_boost
        if not (0 <= lo <= 1 and 0 <= hi <= 1) or self.effect <= 0:
            raise InvalidInputError("outcome surfaces must be probabilities with a positive effect")

    def in_subgroup(self, x):
        x = np.atleast_2d(x)
        return (np.linalg.norm(x - np.asarray(self.center), axis=1) < self.radius).astype(int)

    def propensity(self, x):
        x = np.atleast_2d(x)
        return np.where(x[:, 0] < self.split, self.p_treat_left, self.p_treat_right)

    def p0(self, x):
        x = np.atleast_2d(x)
        return self.base + self.triangle_boost * (x[:, 1] > x[:, 0])

    def p1(self, x):
        return self.p0(x) + self.effect + self.subgroup_boost * self.in_subgroup(x)

    def cate(self, x):
        """True conditional effect ``p1(x) - p0(x)``."""
        return self.p1(x) - self.p0(x)


def generate_synthetic(spec=None):
    """Draw a synthetic observational dataset with both potential outcomes."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(0.0, 1.0, size=(spec.n, 2))
    t = (rng.uniform(size=spec.n) < spec.propensity(x)).astype(int)
    u = rng.uniform(size=spec.n)
    # one uniform drives both arms, so y1 >= y0 row by row
    y0 = (u < spec.p0(x)).astype(float)
    y1 = (u < spec.p1(x)).astype(float)
    y = np.where(t == 1, y1, y0)
    return Dataset(
        x_cont=x,
        x_disc=np.zeros((spec.n, 0)),
        t=t,
        y=y,
        outcome_kind="binary",
        y0=y0,
        y1=y1,
        group=spec.in_subgroup(x),
        cont_names=("x0", "x1"),
    )


def _fmt(v):
    return repr(float(v))


def save_dataset(data, path):
    """Write ``data`` as comma-separated text with a typed header.

    Continuous values are written with ``repr`` so reading them back is
    exact.
    """
    header = [f"cont:{c}" for c in data.cont_names] + [f"disc:{c}" for c in data.disc_names]
    header += ["t", "y"]
    if data.has_potential_outcomes:
        header += ["y0", "y1"]
    if data.group is not None:
        header.append("group")
    binary = data.outcome_kind == "binary"
    yfmt = (lambda v: str(int(v))) if binary else _fmt
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [_fmt(v) for v in data.x_cont[i]]
            row += [str(int(v)) for v in data.x_disc[i]]
            row += [str(int(data.t[i])), yfmt(data.y[i])]
            if data.has_potential_outcomes:
                row += [yfmt(data.y0[i]), yfmt(data.y1[i])]
            if data.group is not None:
                row.append(str(int(data.group[i])))
            w.writerow(row)


def load_dataset(path, outcome_kind=None):
    """Read a dataset written in the typed-header format.

    Header names are ``cont:<name>``, ``disc:<name>`` or one of the
    reserved ``t, y, y0, y1, group``.  ``outcome_kind`` is inferred from
    ``y`` when omitted (binary iff every value is 0 or 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    kinds = []
    seen = set()
    for h in header:
        if h in seen:
            raise SchemaError(f"duplicate column {h!r}", line=1)
        seen.add(h)
        if h.startswith("cont:") and len(h) > 5:
            kinds.append("cont")
        elif h.startswith("disc:") and len(h) > 5:
            kinds.append("disc")
        elif h in RESERVED:
            kinds.append(h)
        else:
            raise SchemaError(f"unknown column {h!r}", line=1)
    for req in ("t", "y"):
        if req not in seen:
            raise SchemaError(f"missing required column {req!r}", line=1)
    values = np.empty((len(rows) - 1, len(header)))
    for li, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise SchemaError(f"expected {len(header)} fields, found {len(row)}", line=li)
        for ci, (cell, kind) in enumerate(zip(row, kinds)):
            cell = cell.strip()
            if cell == "":
                raise SchemaError(f"missing value in column {header[ci]!r}", line=li)
            try:
                v = float(cell)
            except ValueError:
                raise SchemaError(f"non-numeric value {cell!r} in column {header[ci]!r}", line=li) from None
            if not math.isfinite(v):
                raise SchemaError(f"non-finite value in column {header[ci]!r}", line=li)
            if kind in ("disc", "t", "group") and v not in (0.0, 1.0):
                raise SchemaError(f"column {header[ci]!r} must be 0/1, found {cell!r}", line=li)
            values[li - 2, ci] = v
    col = {h: values[:, i] for i, h in enumerate(header)}
    cont = [h for h, k in zip(header, kinds) if k == "cont"]
    disc = [h for h, k in zip(header, kinds) if k == "disc"]
    y = col["y"]
    if outcome_kind is None:
        outcome_kind = "binary" if np.all((y == 0) | (y == 1)) else "continuous"
    n = values.shape[0]
    data = Dataset(
        x_cont=np.column_stack([col[h] for h in cont]) if cont else np.zeros((n, 0)),
        x_disc=np.column_stack([col[h] for h in disc]) if disc else np.zeros((n, 0)),
        t=col["t"],
        y=y,
        outcome_kind=outcome_kind,
        y0=col.get("y0"),
        y1=col.get("y1"),
        group=col.get("group"),
        cont_names=tuple(h[5:] for h in cont),
        disc_names=tuple(h[5:] for h in disc),
    )
    logger.info("loaded %s: %d rows, %d continuous, %d binary covariates",
                path, data.n, data.d_cont, data.d_disc)
    return data


def _allocate(n, fractions):
    """Split ``n`` items into counts proportional to ``fractions`` (largest remainder)."""
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def stratified_split(data, fractions=(0.7, 0.1, 0.2), seed=0):
    """Partition rows so every outcome-by-treatment cell is split proportionally.

    Cells are ``(y, t)`` for binary outcomes and ``t`` alone for continuous
    ones.  Returns one :class:`Dataset` per fraction, possibly empty.
    """
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise InvalidInputError("fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    if data.outcome_kind == "binary":
        keys = data.y.astype(int) * 2 + data.t
    else:
        keys = data.t.copy()
    parts = [[] for _ in fractions]
    active = int(np.count_nonzero(fractions))
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        idx = idx[rng.permutation(idx.shape[0])]
        if idx.shape[0] < active:
            logger.warning("cell %d has %d rows (< %d splits); assigned to the first split",
                           key, idx.shape[0], active)
            parts[0].append(idx)
            continue
        start = 0
        for p, c in enumerate(_allocate(idx.shape[0], fractions)):
            parts[p].append(idx[start:start + c])
            start += c
    out = []
    for chunks in parts:
        idx = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=int)
        out.append(data.subset(idx.astype(int)))
    return tuple(out)


@dataclass(frozen=True)
class Standardizer:
    """Per-column shift and scale of continuous covariates fit on a training set."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, train):
        if train.n == 0:
            raise InvalidInputError("cannot standardize with an empty training set")
        mean = train.x_cont.mean(axis=0)
        std = train.x_cont.std(axis=0)
        flat = std == 0
        if np.any(flat):
            logger.warning("zero-variance continuous columns %s left unscaled",
                           [train.cont_names[j] for j in np.flatnonzero(flat)])
        mean = np.where(flat, 0.0, mean)
        scale = np.where(flat, 1.0, std)
        return cls(mean=mean, scale=scale)

    def apply(self, data):
        if data.transform is not None:
            raise InvalidInputError("dataset is already standardized")
        x = (data.x_cont - self.mean) / self.scale
        return replace(data, x_cont=x, transform=self)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"], dtype=float), scale=np.asarray(d["scale"], dtype=float))


def standardize(train, *others):
    """Z-score continuous columns with training statistics.

    Returns ``(transformed datasets, standardizer)`` where the datasets
    are ``train`` followed by ``others`` in order.
    """
    st = Standardizer.fit(train)
    return [st.apply(d) for d in (train, *others)], st
