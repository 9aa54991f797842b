"""Plain-text parameter checkpoints.

One record per line, tab separated::

    @<key>    <value>                       metadata
    <name>    <d1,d2,...>    <v1 v2 ...>     array, row-major, repr floats

``repr`` of a Python float round-trips exactly, so a checkpoint reloads to
bit-identical parameters.
"""

from __future__ import annotations

import numpy as np

from .core import MixtureParams, ModelParams, OutcomeParams
from .errors import SchemaError
from .nn import Network

HEADER = "# hemm checkpoint v1"


def write_arrays(path, arrays, meta=None):
    lines = [HEADER]
    for key, value in (meta or {}).items():
        lines.append(f"@{key}\t{value}")
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        shape = ",".join(str(s) for s in arr.shape)
        values = " ".join(repr(float(v)) for v in arr.ravel())
        lines.append(f"{name}\t{shape}\t{values}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_arrays(path):
    meta, arrays = {}, {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != HEADER:
        raise SchemaError("not a checkpoint file", line=1)
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line.startswith("@"):
            key, _, value = line[1:].partition("\t")
            meta[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise SchemaError("malformed array record", line=ln)
        name, shape, values = parts
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        flat = np.array([float(v) for v in values.split()], dtype=float)
        if flat.size != int(np.prod(shape)):
            raise SchemaError(f"{name}: {flat.size} values for shape {shape}", line=ln)
        arrays[name] = flat.reshape(shape)
    return meta, arrays


def save_params(p, path, extra_meta=None):
    net = p.outcome.net
    meta = {
        "K": p.K,
        "outcome_kind": p.outcome.outcome_kind,
        "sigma_y": repr(float(p.outcome.sigma_y)),
        "d_in": net.d_in,
        "hidden": ",".join(str(h) for h in net.hidden),
        "head_mode": net.mode,
    }
    meta.update(extra_meta or {})
    arrays = {
        "mixture.mu": p.mixture.mu,
        "mixture.sigma2": p.mixture.sigma2,
        "mixture.pi": p.mixture.pi,
        "outcome.gamma": p.outcome.gamma,
    }
    for name in net.param_shapes():
        arrays[f"net.{name}"] = net.params[name]
    write_arrays(path, arrays, meta)


def load_params(path):
    """Read a checkpoint; returns ``(ModelParams, metadata dict)``."""
    meta, arrays = read_arrays(path)
    try:
        hidden = tuple(int(h) for h in meta["hidden"].split(",") if h)
        K = int(meta["K"])
        net = Network(
            int(meta["d_in"]), hidden, meta["head_mode"],
            params={k[4:]: v for k, v in arrays.items() if k.startswith("net.")},
        )
        if arrays["outcome.gamma"].shape != (K,):
            raise SchemaError(f"outcome.gamma does not have {K} entries")
        p = ModelParams(
            MixtureParams(arrays["mixture.mu"], arrays["mixture.sigma2"], arrays["mixture.pi"]),
            OutcomeParams(arrays["outcome.gamma"], net, meta["outcome_kind"], float(meta["sigma_y"])),
        )
    except KeyError as exc:
        raise SchemaError(f"checkpoint lacks {exc.args[0]!r}") from None
    return p, meta
