"""Command-line entry point.

Usage::

    gnnssm <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--paper-scale]

Subcommands: ``spectrum``, ``propagate``, ``train``, ``mp-check``, ``ring``,
``gpp``.  The config is an INI file (``[run]``, ``[model]``, ``[ssm]``,
``[task]``, ``[train]`` sections of ``key = value`` lines); see
``demos/configs`` for an annotated file per subcommand.  Every random draw is
derived from the single ``[run] seed`` (overridable with ``--seed``).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import configparser
import csv
import io
import json
import os
import sys

import numpy as np

from .diagnostics import jacobian_spectrum_report, propagate_trace
from .graph import GeneratorSpec, GraphError, bfs_distances, from_edge_list, generate
from .nn import CapabilityError, ConfigError, ModelConfig, SsmConfig, build_model, forward, save_checkpoint
from .rng import derive_seed, make_rng
from .spectral import SpectralError, mp_empirical_check, mp_moments
from .tasks import (
    GPP_FAMILIES,
    DataError,
    GppFamilies,
    find_cora,
    load_cora,
    make_cora_like,
    make_gpp,
    make_ring_transfer,
)
from .train import NumericError, TrainConfig, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SUBCOMMANDS = ("spectrum", "propagate", "train", "mp-check", "ring", "gpp")


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _strs(text):
    return tuple(v for v in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default, allowed values or None)
SCHEMA = {
    "run": {
        "seed": (int, 0, None),
        "layer": (int, 0, None),
        "radii": (_floats, (1.0, 0.66, 0.33), None),
        "lambdas": (_floats, (1.0, 0.5, 0.25), None),
        "sigma2": (float, 1.0, None),
        "dk": (int, 256, None),
        "dk1": (int, 256, None),
        "trials": (int, 50, None),
        "models": (_strs, ("gcn", "gcn_ssm", "kgcn_ssm"), None),
        "sweep": (_floats, (1.0, 0.75, 0.5), None),
        "baseline": (_bool, True, None),
    },
    "model": {
        "coupling": (str, "gcn", ("gcn", "gat", "khop")),
        "activation": (str, "relu", ("relu", "tanh", "identity")),
        "residual": (str, "ssm", ("none", "ssm", "plain_residual")),
        "depth": (int, 5, None),
        "hidden": (int, 64, None),
        "sigma_w": (float, 1.0, None),
        "weight_radius": (_opt_float, None, None),
        "share_weights": (_bool, False, None),
    },
    "ssm": {
        "state_radius": (float, 1.0, None),
        "input_radius": (float, 0.1, None),
        "shared": (_bool, True, None),
        "trainable": (_bool, False, None),
        "use_input_matrix": (_bool, True, None),
    },
    "task": {
        "name": (str, "cora", ("cora", "cora_like", "gpp", "ring", "generator")),
        "cora_dir": (str, "", None),
        "split": (str, "planetoid", ("planetoid", "random")),
        "gpp_task": (str, "diameter", ("diameter", "sssp", "eccentricity")),
        "n_train": (int, 1000, None),
        "n_val": (int, 200, None),
        "n_test": (int, 400, None),
        "er_p_min": (float, 0.1, None),
        "er_p_max": (float, 0.2, None),
        "families": (_strs, (), None),
        "n_nodes": (int, 10, None),
        "n_classes": (int, 5, None),
        "n_samples": (int, 2000, None),
        "kind": (str, "ring", None),
        "n": (int, 10, None),
        "p": (float, 0.0, None),
        "m": (int, 0, None),
        "w": (int, 0, None),
        "h": (int, 0, None),
        "features": (int, 16, None),
        "max_nodes": (int, 0, None),
    },
    "train": {
        "optimizer": (str, "adam", ("adam", "adamw")),
        "lr": (float, 0.003, None),
        "weight_decay": (float, 0.0, None),
        "epochs": (int, 400, None),
        "patience": (int, 100, None),
        "batch_size": (int, 32, None),
    },
}


class RunConfig:
    """Typed view of a config file; ``from_text(to_text())`` is lossless."""

    def __init__(self, values):
        self.values = values

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[section][name]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def set(self, key, value):
        section, name = key.split(".")
        self.values[section][name] = value

    @classmethod
    def defaults(cls):
        return cls({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config syntax: {exc}") from None
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{section}.{key}: unknown key")
                conv, _, allowed = SCHEMA[section][key]
                try:
                    value = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from None
                if allowed is not None and value not in allowed:
                    raise ConfigError(f"{section}.{key}: {value!r} is not one of {', '.join(allowed)}")
                cfg.values[section][key] = value
        return cfg

    def to_text(self):
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def sub_seed(self, tag):
        return derive_seed(self["run.seed"], tag)


# --------------------------------------------------------------------------
# Builders


def model_for(cfg, d_in, d_out, readout="node", **overrides):
    kw = dict(
        d_in=d_in,
        d_hidden=cfg["model.hidden"],
        d_out=d_out,
        depth=cfg["model.depth"],
        coupling=cfg["model.coupling"],
        activation=cfg["model.activation"],
        residual=cfg["model.residual"],
        readout=readout,
        share_weights=cfg["model.share_weights"],
        sigma_w=cfg["model.sigma_w"],
        weight_radius=cfg["model.weight_radius"],
        seed=cfg.sub_seed("model"),
    )
    ssm = dict(
        state_radius=cfg["ssm.state_radius"],
        input_radius=cfg["ssm.input_radius"],
        seed=cfg.sub_seed("ssm"),
        shared=cfg["ssm.shared"],
        trainable=cfg["ssm.trainable"],
        use_input_matrix=cfg["ssm.use_input_matrix"],
    )
    ssm.update(overrides.pop("ssm", {}))
    kw.update(overrides)
    return build_model(ModelConfig(ssm=SsmConfig(**ssm), **kw))


PRESETS = {
    "gcn": {"coupling": "gcn", "residual": "none"},
    "gcn_ssm": {"coupling": "gcn", "residual": "ssm"},
    "kgcn_ssm": {"coupling": "khop", "residual": "ssm"},
    "gat": {"coupling": "gat", "residual": "none"},
    "gat_ssm": {"coupling": "gat", "residual": "ssm"},
    "gcn_residual": {"coupling": "gcn", "residual": "plain_residual"},
}


def train_config_for(cfg, task):
    return TrainConfig(
        optimizer=cfg["train.optimizer"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        epochs=cfg["train.epochs"],
        patience=cfg["train.patience"],
        seed=cfg.sub_seed("train"),
        loss=task.loss,
        metric=task.metric,
        batch_size=cfg["train.batch_size"],
    )


def load_task(cfg, paper_scale=False):
    name = cfg["task.name"]
    seed = cfg.sub_seed("data")
    if name == "cora":
        paths = find_cora(cfg["task.cora_dir"] or None)
        if paths is None:
            raise DataError(
                "Cora raw files (cora.content, cora.cites) not found; set task.cora_dir or GNNSSM_CORA_DIR"
            )
        return load_cora(*paths, scheme=cfg["task.split"], seed=seed)
    if name == "cora_like":
        return make_cora_like(seed)
    if name == "gpp":
        ranges = GppFamilies(er_p=(cfg["task.er_p_min"], cfg["task.er_p_max"]))
        fams = cfg["task.families"] or GPP_FAMILIES
        sizes = (None, None, None) if paper_scale else (cfg["task.n_train"], cfg["task.n_val"], cfg["task.n_test"])
        return make_gpp(cfg["task.gpp_task"], *sizes, seed=seed, paper_scale=paper_scale,
                        families=tuple(fams), ranges=ranges)
    if name == "ring":
        return make_ring_transfer(cfg["task.n_nodes"], cfg["task.n_classes"], cfg["task.n_samples"], seed)
    raise ConfigError(f"task.name: {name!r} does not define a training task")


def graph_and_features(cfg):
    """Graph plus node features for the untrained-propagation subcommands."""
    name = cfg["task.name"]
    d = cfg["task.features"]
    if name == "generator":
        spec = GeneratorSpec(cfg["task.kind"], n=cfg["task.n"], p=cfg["task.p"], m=cfg["task.m"],
                             w=cfg["task.w"], h=cfg["task.h"], seed=cfg.sub_seed("graph"))
        g = generate(spec)
    elif name in ("cora", "cora_like"):
        g = load_task(cfg).graphs[0]
    else:
        raise ConfigError(f"task.name: {name!r} has no single graph; use generator, cora or cora_like")
    if cfg["task.max_nodes"] and g.n > cfg["task.max_nodes"]:
        g = bfs_ball(g, cfg["task.max_nodes"], cfg.sub_seed("subgraph"))
    x = make_rng(cfg.sub_seed("features")).standard_normal((g.n, d))
    return g, x


def bfs_ball(g, size, seed):
    """Induced subgraph on the first ``size`` nodes reached by BFS from a seeded root."""
    root = int(make_rng(seed).integers(0, g.n))
    dist = bfs_distances(g, root)
    reach = np.flatnonzero(np.isfinite(dist))
    keep = reach[np.lexsort((reach, dist[reach]))][:size]
    keep = np.sort(keep)
    index = -np.ones(g.n, dtype=np.int64)
    index[keep] = np.arange(keep.size)
    e = g.edges
    mask = (index[e[:, 0]] >= 0) & (index[e[:, 1]] >= 0)
    return from_edge_list(index[e[mask]], keep.size)


# --------------------------------------------------------------------------
# Output helpers


def _write(out, name, text):
    with open(os.path.join(out, name), "w") as f:
        f.write(text)


def _write_json(out, name, obj):
    _write(out, name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _table(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Subcommands


def cmd_spectrum(cfg, out, paper_scale=False):
    g, x = graph_and_features(cfg)
    m = model_for(cfg, x.shape[1], 1)
    layer = cfg["run.layer"]
    if not 0 <= layer < m.depth:
        raise ConfigError(f"run.layer: {layer} outside 0..{m.depth - 1}")
    h = forward(m, g, x).states[layer]
    rep = jacobian_spectrum_report(m, g, h, layer)
    _write(out, f"spectrum_layer{layer}.csv", rep.to_csv())
    _write(out, f"spectrum_layer{layer}.json", rep.to_json() + "\n")
    _write(out, f"spectrum_moduli_layer{layer}.csv",
           "modulus\n" + "".join(f"{float(v)!r}\n" for v in rep.moduli))
    summary = {"n": g.n, "layer": layer, "median_modulus": rep.median, "eoc_distance": rep.eoc_distance,
               "max_singular_value": rep.max}
    _write_json(out, "summary.json", summary)
    return summary


def cmd_propagate(cfg, out, paper_scale=False):
    g, x = graph_and_features(cfg)
    summary = {"n": g.n, "depth": cfg["model.depth"], "energy_ratio": {}}
    runs = []
    if cfg["run.baseline"]:
        runs.append(("gcn", {"residual": "none"}))
    for r in cfg["run.radii"]:
        runs.append((f"radius_{r:g}", {"residual": "ssm", "ssm": {"state_radius": r}}))
    for label, over in runs:
        m = model_for(cfg, x.shape[1], 1, **over)
        tr = propagate_trace(m, g, x, label=label)
        _write(out, f"trace_{label}.csv", tr.to_csv())
        summary["energy_ratio"][label] = tr.energy_ratio
    _write_json(out, "summary.json", summary)
    return summary


def _train_one(cfg, task, name, out, **over):
    m = model_for(cfg, task.d_in, task.d_out, task.readout, **over)
    hist = train_loop(m, task, train_config_for(cfg, task))
    _write(out, f"history_{name}.csv", hist.to_csv())
    return m, hist


def cmd_train(cfg, out, paper_scale=False):
    task = load_task(cfg, paper_scale)
    m, hist = _train_one(cfg, task, "model", out)
    save_checkpoint(m, os.path.join(out, "checkpoint.bin"))
    summary = hist.summary()
    summary["task"] = cfg["task.name"]
    summary["model"] = m.cfg.to_dict()
    _write_json(out, "summary.json", summary)
    return summary


def cmd_mp_check(cfg, out, paper_scale=False):
    rows, summary = [], {}
    for lam in cfg["run.lambdas"]:
        th = mp_moments(lam, cfg["run.sigma2"], cfg["run.dk"], cfg["run.dk1"])
        est = mp_empirical_check(lam, cfg["run.sigma2"], cfg["run.dk"], cfg["run.dk1"],
                                 cfg["run.trials"], cfg.sub_seed(("mp", repr(lam))))
        z_mean = (est.mean - th.mean) / est.mean_se if est.mean_se > 0 else 0.0
        z_var = (est.variance - th.variance) / est.variance_se if est.variance_se > 0 else 0.0
        rows.append((lam, th.mean, est.mean, est.mean_se, z_mean, th.variance, est.variance, est.variance_se, z_var))
        summary[repr(lam)] = {"within_3se": bool(abs(z_mean) <= 3 and abs(z_var) <= 3), "z_mean": z_mean, "z_var": z_var}
    header = ["lambda", "mean_theory", "mean_empirical", "mean_se", "z_mean",
              "variance_theory", "variance_empirical", "variance_se", "z_variance"]
    _write(out, "moments.csv", _table(header, rows))
    _write_json(out, "summary.json", summary)
    return summary


def _sweep(cfg, out, paper_scale, preset_names, sweep_model):
    task = load_task(cfg, paper_scale)
    rows, summary = [], {}
    plan = []
    for name in preset_names:
        if name not in PRESETS:
            raise ConfigError(f"run.models: unknown model {name!r}; expected one of {', '.join(PRESETS)}")
        plan.append((name, dict(PRESETS[name])))
    for r in cfg["run.sweep"]:
        over = dict(PRESETS[sweep_model])
        over["ssm"] = {"state_radius": r}
        plan.append((f"{sweep_model}_radius_{r:g}", over))
    for name, over in plan:
        _, hist = _train_one(cfg, task, name, out, **over)
        radius = over.get("ssm", {}).get("state_radius", cfg["ssm.state_radius"]) if over["residual"] == "ssm" else None
        rows.append((name, over["coupling"], over["residual"], _fmt(radius), cfg["model.depth"],
                     hist.best_epoch, hist.best_val, hist.test_at_best))
        summary[name] = {"val_metric": hist.best_val, "test_metric": hist.test_at_best, "best_epoch": hist.best_epoch}
    header = ["model", "coupling", "residual", "state_radius", "depth", "best_epoch", "val_metric", "test_metric"]
    _write(out, "metrics.csv", _table(header, rows))
    _write_json(out, "summary.json", {"metric": task.metric, "models": summary})
    return summary


def cmd_ring(cfg, out, paper_scale=False):
    if cfg["task.name"] != "ring":
        cfg.set("task.name", "ring")
    return _sweep(cfg, out, paper_scale, cfg["run.models"], "kgcn_ssm")


def cmd_gpp(cfg, out, paper_scale=False):
    if cfg["task.name"] != "gpp":
        cfg.set("task.name", "gpp")
    return _sweep(cfg, out, paper_scale, cfg["run.models"], "kgcn_ssm")


COMMANDS = {
    "spectrum": cmd_spectrum,
    "propagate": cmd_propagate,
    "train": cmd_train,
    "mp-check": cmd_mp_check,
    "ring": cmd_ring,
    "gpp": cmd_gpp,
}


def build_parser():
    p = argparse.ArgumentParser(prog="gnnssm", description="State-space message passing experiments")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", default="out", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--paper-scale", action="store_true", help="use full dataset sizes")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as f:
            cfg = RunConfig.from_text(f.read())
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.set("run.seed", args.seed)
        if args.paper_scale and args.subcommand == "gpp":
            cfg.set("train.epochs", 1500)
        os.makedirs(args.out, exist_ok=True)
        # divergence surfaces as NumericError (exit 4), not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            COMMANDS[args.subcommand](cfg, args.out, args.paper_scale)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if getattr(exc, "filename", None) == args.config else EXIT_DATA
    except (ConfigError, CapabilityError, SpectralError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
