"""Command-line driver.

Every command resolves a full JSON configuration (built-in defaults, then
``--config`` file values, then flags), validates it, and writes its
artifacts plus a ``config.json`` snapshot into a fresh output directory.
Re-running a command with ``--config <out>/config.json`` reproduces its
numeric outputs exactly.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (details in ``diagnostics.json``).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, fields

import jsonschema
import numpy as np

from . import core, evaluation
from .baselines import BASELINES, VTConfig, VirtualTwins, make_baseline
from .checkpoint import load_params, save_params
from .data import Standardizer, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, stratified_split
from .errors import DegeneratePosteriorError, InvalidInputError, NumericalError, SchemaError
from .inference import TRAINERS, Grid, TrainConfig, dev_metric, grid_search

logger = logging.getLogger("hemm")

COMMANDS = ("simulate", "train", "gridsearch", "evaluate", "baseline", "report", "compare-em")
PRIORS = {"l1": "laplace_l1", "group": "group_l12"}

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _defaults():
    train = TrainConfig().to_dict()
    grid = asdict(Grid())
    grid["Ks"], grid["lams"], grid["head_modes"] = list(grid["Ks"]), list(grid["lams"]), list(grid["head_modes"])
    synthetic = {f.name: getattr(SyntheticSpec(), f.name) for f in fields(SyntheticSpec) if f.name != "seed"}
    synthetic["center"] = list(synthetic["center"])
    return {
        "seed": 0,
        "data": None,
        "synthetic": synthetic,
        "split": {"fractions": [0.7, 0.1, 0.2]},
        "standardize": True,
        "train": {k: v for k, v in train.items() if k != "seed"},
        "trainer": "elbo",
        "grid": grid,
        "n_jobs": 1,
        "evaluate": {"split": "test", "propensity": "forest", "model": None},
        "baseline": {"name": "linear1", "k": 10, "vt": {k: v for k, v in asdict(VTConfig()).items() if k != "seed"}},
        "report": {"top": 20, "model": None},
    }


_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _obj(props, required=True):
    schema = {"type": "object", "properties": props, "additionalProperties": False}
    if required:
        schema["required"] = sorted(props)
    return schema


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "data": {"type": ["string", "null"]},
    "synthetic": _obj({
        "n": {"type": "integer", "minimum": 1},
        "center": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "split": _num,
        "p_treat_left": {"type": "number", "minimum": 0, "maximum": 1},
        "p_treat_right": {"type": "number", "minimum": 0, "maximum": 1},
        "base": _num, "triangle_boost": _num, "effect": _num, "subgroup_boost": _num,
    }),
    "split": _obj({"fractions": {"type": "array", "items": {"type": "number", "minimum": 0},
                                 "minItems": 2, "maxItems": 3}}),
    "standardize": _bool,
    "train": _obj({
        "K": {"type": "integer", "minimum": 1},
        "lam": {"type": "number", "minimum": 0},
        "prior_kind": {"enum": list(core.PENALTY_KINDS)},
        "outcome_kind": {"enum": list(core.OUTCOME_KINDS)},
        "heads": {"enum": ["linear", "mlp1", "mlp2"]},
        "head_mode": {"enum": ["separate", "shared"]},
        "hidden": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1}},
        "step_size": {"type": "number", "exclusiveMinimum": 0},
        "minibatch": {"type": "integer", "minimum": 1},
        "max_epochs": {"type": "integer", "minimum": 0},
        "early_stop": _bool,
        "patience": {"type": "integer", "minimum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "restart": {"type": "integer", "minimum": 0},
        "restarts": {"type": "integer", "minimum": 1},
        "pretrain_epochs": {"type": "integer", "minimum": 0},
        "pretrain_step": {"type": "number", "exclusiveMinimum": 0},
        "m_step_iters": {"type": "integer", "minimum": 1},
        "sigma_y": {"type": "number", "exclusiveMinimum": 0},
        "learn_sigma_y": _bool,
    }),
    "trainer": {"enum": sorted(TRAINERS)},
    "grid": _obj({
        "Ks": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "lams": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "restarts": {"type": "integer", "minimum": 1},
        "head_modes": {"type": "array", "items": {"enum": ["separate", "shared"]}, "minItems": 1},
    }),
    "n_jobs": {"type": "integer", "minimum": 1},
    "evaluate": _obj({
        "split": {"enum": ["train", "dev", "test", "all"]},
        "propensity": {"enum": ["forest", "logistic"]},
        "model": {"type": ["string", "null"]},
    }),
    "baseline": _obj({
        "name": {"enum": sorted(BASELINES)},
        "k": {"type": "integer", "minimum": 1},
        "vt": _obj({
            "n_trees": {"type": "integer", "minimum": 1},
            "stage1_depth": {"type": "integer", "minimum": 0},
            "stage2_depth": {"type": "integer", "minimum": 0},
            "min_samples_leaf": {"type": "integer", "minimum": 1},
        }),
    }),
    "report": _obj({"top": {"type": "integer", "minimum": 1}, "model": {"type": ["string", "null"]}}),
})


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(args):
    """Defaults, overlaid by the ``--config`` file, overlaid by flags; then validated."""
    cfg = _defaults()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded.pop("command", None)
        cfg = _merge(cfg, loaded)
    flags = {
        "seed": args.seed, "data": args.data,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    train_flags = {"K": args.k, "lam": args.lam, "heads": args.heads, "head_mode": args.head_mode,
                   "prior_kind": PRIORS.get(args.prior)}
    cfg["train"].update({k: v for k, v in train_flags.items() if v is not None})
    if args.model is not None:
        cfg["evaluate"]["model"] = args.model
        cfg["report"]["model"] = args.model
    if args.name is not None:
        cfg["baseline"]["name"] = args.name
    if args.trainer is not None:
        cfg["trainer"] = args.trainer
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    if abs(sum(cfg["split"]["fractions"]) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    try:
        train_config(cfg)
        synthetic_spec(cfg)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def train_config(cfg):
    d = dict(cfg["train"])
    if d.get("hidden") is not None:
        d["hidden"] = tuple(d["hidden"])
    return TrainConfig(seed=cfg["seed"], **d)


def synthetic_spec(cfg):
    d = dict(cfg["synthetic"])
    d["center"] = tuple(d["center"])
    return SyntheticSpec(seed=cfg["seed"], **d)


# -- data ---------------------------------------------------------------------


def load_data(cfg):
    if cfg["data"] is None:
        return generate_synthetic(synthetic_spec(cfg))
    if not os.path.isfile(cfg["data"]):
        raise DataError(f"dataset file not found: {cfg['data']}")
    try:
        return load_dataset(cfg["data"], outcome_kind=cfg["train"]["outcome_kind"])
    except (SchemaError, InvalidInputError) as exc:
        raise DataError(f"{cfg['data']}: {exc}") from None


def splits(cfg, data):
    """``(train, dev, test)``; dev is ``None`` for two-way fractions."""
    fr = cfg["split"]["fractions"]
    parts = list(stratified_split(data, tuple(fr), seed=cfg["seed"]))
    if len(parts) == 2:
        parts = [parts[0], None, parts[1]]
    return parts


def _transform_splits(parts, st):
    return [None if p is None else st.apply(p) for p in parts]


def prepared_splits(cfg, transform=None):
    data = load_data(cfg)
    parts = splits(cfg, data)
    if transform is None and cfg["standardize"]:
        transform = Standardizer.fit(parts[0])
    if transform is not None:
        parts = _transform_splits(parts, transform)
    return parts, transform


# -- output -------------------------------------------------------------------


class OutputDir:
    """Scratch directory renamed onto the target when the command finishes."""

    def __init__(self, target):
        self.target = os.path.abspath(target)
        if os.path.exists(self.target) and os.listdir(self.target):
            raise ConfigError(f"output directory {target} exists and is not empty")
        parent = os.path.dirname(self.target)
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=f".{os.path.basename(self.target)}.", dir=parent)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def write_json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")

    def commit(self):
        if os.path.isdir(self.target):
            os.rmdir(self.target)
        os.rename(self.tmp, self.target)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _float(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _curve_csv(curve):
    lines = ["threshold,fraction,tau_hat"]
    lines += [f"{c!r},{f!r},{tau!r}" for c, f, tau in curve]
    return "\n".join(lines)


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg, out):
    data = generate_synthetic(synthetic_spec(cfg))
    save_dataset(data, out.path("dataset.csv"))
    return {"rows": data.n}


def cmd_train(cfg, out):
    (train, dev, _), st = prepared_splits(cfg)
    tc = train_config(cfg)
    p, trace = TRAINERS[cfg["trainer"]](train, dev, tc)
    save_params(p, out.path("model.ckpt"))
    trace.to_csv(out.path("trace.csv"))
    if st is not None:
        out.write_json("transform.json", st.to_dict())
    metrics = {"best_epoch": trace.best_epoch, "epochs": len(trace.rows) - 1,
               "stopped_early": trace.stopped_early,
               "enhanced_group": core.enhanced_group_index(p),
               "gamma": p.outcome.gamma.tolist()}
    if dev is not None and dev.n:
        metrics["dev_metric"] = _float(dev_metric(p, dev))
    out.write_json("metrics.json", metrics)
    return metrics


def cmd_gridsearch(cfg, out):
    (train, dev, _), st = prepared_splits(cfg)
    g = cfg["grid"]
    grid = Grid(tuple(g["Ks"]), tuple(g["lams"]), g["restarts"], tuple(g["head_modes"]))
    os.makedirs(out.path("checkpoints"))
    best, board = grid_search(train, dev, train_config(cfg), grid, trainer=cfg["trainer"],
                              checkpoint_dir=out.path("checkpoints"), n_jobs=cfg["n_jobs"])
    save_params(best, out.path("model.ckpt"))
    if st is not None:
        out.write_json("transform.json", st.to_dict())
    cols = ["rank", "K", "lambda", "restart", "head_mode", "dev_metric", "pi_zero_fraction", "epochs", "checkpoint"]
    lines = [",".join(cols)]
    for i, rec in enumerate(board, start=1):
        rec = dict(rec, rank=i, checkpoint=os.path.basename(rec["checkpoint"]))
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in (rec[c] for c in cols)))
    out.write_text("leaderboard.csv", "\n".join(lines))
    return {"cells": len(board), "best": {k: board[0][k] for k in ("K", "lambda", "restart", "head_mode")}}


def _model_dir(path):
    if path is None:
        raise ConfigError("a trained model directory is required (--model)")
    ckpt = os.path.join(path, "model.ckpt")
    if not os.path.isfile(ckpt):
        raise DataError(f"no model.ckpt in {path}")
    try:
        p, _ = load_params(ckpt)
    except (SchemaError, InvalidInputError, ValueError) as exc:
        raise DataError(f"{ckpt}: {exc}") from None
    st = None
    tpath = os.path.join(path, "transform.json")
    if os.path.isfile(tpath):
        with open(tpath, encoding="utf-8") as fh:
            st = Standardizer.from_dict(json.load(fh))
    return p, st


def _select(cfg, parts):
    which = cfg["evaluate"]["split"]
    if which == "all":
        return [p for p in parts if p is not None]
    chosen = parts[("train", "dev", "test").index(which)]
    if chosen is None or chosen.n == 0:
        raise DataError(f"{which} split is empty")
    return [chosen]


def _concat(datasets):
    if len(datasets) == 1:
        return datasets[0]
    first = datasets[0]
    stack = lambda name: None if getattr(first, name) is None else np.concatenate([getattr(d, name) for d in datasets])
    return type(first)(
        x_cont=np.vstack([d.x_cont for d in datasets]), x_disc=np.vstack([d.x_disc for d in datasets]),
        t=stack("t"), y=stack("y"), outcome_kind=first.outcome_kind, y0=stack("y0"), y1=stack("y1"),
        group=stack("group"), cont_names=first.cont_names, disc_names=first.disc_names, transform=first.transform,
    )


def _effect_metrics(cfg, pred, train, data, out, notices):
    """PEHE, subgroup AUC, IPTW effect and effect-versus-size curve for ``pred`` on ``data``."""
    metrics = {"n": data.n}
    if data.has_potential_outcomes:
        res = evaluation.pehe(pred, data)
        metrics["pehe"], metrics["sqrt_pehe"] = res.pehe, res.root
    else:
        notices.append("dataset has no y0/y1 columns; PEHE skipped")
        metrics["pehe"] = metrics["sqrt_pehe"] = None
    if data.group is not None and pred.score is not None and 0 < data.group.sum() < data.n:
        (fpr, tpr, _), metrics["subgroup_auc"] = evaluation.roc_auc(pred.score, data.group)
        out.write_text("roc.csv", "\n".join(["fpr,tpr"] + [f"{a!r},{b!r}" for a, b in zip(fpr.tolist(), tpr.tolist())]))
    e = evaluation.fit_propensity(train, method=cfg["evaluate"]["propensity"], seed=cfg["seed"])
    metrics["ate"] = evaluation.iptw_subgroup_ate(data, None, e)
    metrics["ate_se"] = _float(evaluation.iptw_standard_error(data, None, e))
    if pred.score is not None:
        out.write_text("curve.csv", _curve_csv(evaluation.ate_size_curve(data, pred.score, e)))
    return metrics


def cmd_evaluate(cfg, out):
    p, st = _model_dir(cfg["evaluate"]["model"])
    parts, _ = prepared_splits(dict(cfg, standardize=False), transform=st)
    data = _concat(_select(cfg, parts))
    notices = []
    pred = evaluation.hemm_predictions(p, data)
    metrics = _effect_metrics(cfg, pred, parts[0], data, out, notices)
    metrics["outcome_metric"] = _float(dev_metric(p, data))
    metrics["notices"] = notices
    out.write_json("metrics.json", metrics)
    return metrics


def cmd_baseline(cfg, out):
    parts, _ = prepared_splits(cfg)
    train = parts[0]
    b = cfg["baseline"]
    if b["name"] == "vt":
        model = VirtualTwins(VTConfig(seed=cfg["seed"], **b["vt"]))
    else:
        model = make_baseline(b["name"], k=b["k"], seed=cfg["seed"])
    model.fit(train)
    data = _concat(_select(cfg, parts))
    notices = []
    metrics = _effect_metrics(cfg, model.predict(data), train, data, out, notices)
    metrics["baseline"] = b["name"]
    metrics["notices"] = notices
    if b["name"] == "vt":
        out.write_text("rules.txt", model.rules())
    out.write_json("metrics.json", metrics)
    return metrics


def cmd_report(cfg, out):
    p, _ = _model_dir(cfg["report"]["model"])
    data = load_data(cfg)
    names = list(data.disc_names) if data.d_disc == p.mixture.d_disc else None
    k = core.enhanced_group_index(p)
    blocks = []
    for j in range(p.K):
        tag = " (enhanced)" if j == k else ""
        header = f"# component {j}{tag} gamma={float(p.outcome.gamma[j])!r}"
        rep = core.subgroup_feature_report(p.mixture, j, names)
        body = core.format_feature_report(rep, cfg["report"]["top"]) if rep else "(no binary covariates)"
        blocks.append(header + "\n" + body)
    out.write_text("report.txt", "\n\n".join(blocks))
    return {"enhanced_group": k}


def cmd_compare_em(cfg, out):
    (train, dev, _), _ = prepared_splits(cfg)
    tc = train_config(cfg)
    summary = {}
    for name, fit in TRAINERS.items():
        _, trace = fit(train, dev, tc)
        trace.to_csv(out.path(f"trace_{name}.csv"))
        summary[name] = {"epochs": len(trace.rows) - 1, "best_epoch": trace.best_epoch,
                         "final_train_nll": trace.rows[-1]["train_nll"],
                         "final_dev_nll": _float(trace.rows[-1]["dev_nll"])}
    out.write_json("summary.json", summary)
    return summary


HANDLERS = {
    "simulate": cmd_simulate, "train": cmd_train, "gridsearch": cmd_gridsearch,
    "evaluate": cmd_evaluate, "baseline": cmd_baseline, "report": cmd_report,
    "compare-em": cmd_compare_em,
}


# -- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="hemm", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
    parser.add_argument("--data", help="dataset file; synthetic data is generated when absent")
    parser.add_argument("--k", type=int, help="number of mixture components")
    parser.add_argument("--lambda", dest="lam", type=float, help="prior strength")
    parser.add_argument("--prior", choices=sorted(PRIORS), help="sparsity prior on binary covariate means")
    parser.add_argument("--heads", choices=("linear", "mlp1", "mlp2"), help="outcome function")
    parser.add_argument("--head-mode", choices=("separate", "shared"), help="outcome parameter sharing across arms")
    parser.add_argument("--trainer", choices=sorted(TRAINERS), help="training algorithm")
    parser.add_argument("--model", help="directory of a trained model (evaluate, report)")
    parser.add_argument("--name", choices=sorted(BASELINES), help="baseline to fit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = OutputDir(args.out)
    except ConfigError as exc:
        print(f"hemm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out.write_json("config.json", dict(cfg, command=args.command))
    status = EXIT_OK
    try:
        result = HANDLERS[args.command](cfg, out)
        for notice in result.get("notices", []) if isinstance(result, dict) else []:
            print(f"hemm: notice: {notice}", file=sys.stderr)
    except ConfigError as exc:
        out.abort()
        print(f"hemm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, InvalidInputError) as exc:
        out.abort()
        print(f"hemm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegeneratePosteriorError, FloatingPointError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc),
                "block": getattr(exc, "block", None), "index": getattr(exc, "index", None)}
        diag.update(getattr(exc, "diagnostics", None) or {})
        out.write_json("diagnostics.json", diag)
        print(f"hemm: numerical failure: {exc} (see {os.path.join(args.out, 'diagnostics.json')})",
              file=sys.stderr)
        status = EXIT_NUMERICAL
    out.commit()
    return status


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
