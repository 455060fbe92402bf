"""Command-line pipeline: synth, preclassify, train, predict, evaluate, noise.

Every subcommand accepts ``--config FILE`` (JSON, keys = flag names with
dashes turned to underscores). Explicit flags override the file, which
overrides the defaults. The resolved configuration is written next to the
outputs as ``<command>_config.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data, evaluate, preclassify, train
from .model import ModelConfig

log = logging.getLogger("sarcd")


class CliError(Exception):
    pass


# option tables: (flag, type, default, help). A default of REQUIRED must be set
# either on the command line or in the config file.
REQUIRED = object()
FLAG = "flag"

COMMANDS: dict[str, list[tuple]] = {
    "synth": [
        ("--out", str, REQUIRED, "output directory"),
        ("--size", int, 256, "scene side length in pixels"),
        ("--regions", int, 3, "number of change regions"),
        ("--looks", float, 4.0, "speckle looks L"),
        ("--gain", float, 10.0, "reflectivity change factor inside change regions"),
        ("--seed", int, 0, "random seed"),
    ],
    "preclassify": [
        ("--t1", str, REQUIRED, "first-date PGM"),
        ("--t2", str, REQUIRED, "second-date PGM"),
        ("--out", str, REQUIRED, "output directory"),
        ("--theta", float, preclassify.THETA, "intermediate-class cap factor"),
        ("--nt", float, 0.04, "training-sample fraction written to samples.txt"),
        ("--seed", int, 0, "random seed"),
    ],
    "train": [
        ("--t1", str, REQUIRED, "first-date PGM"),
        ("--t2", str, REQUIRED, "second-date PGM"),
        ("--pre", str, REQUIRED, "preclassification directory"),
        ("--out", str, REQUIRED, "checkpoint path (model.safn)"),
        ("--r", int, 13, "patch size (odd)"),
        ("--nt", float, None, "redraw this training fraction from preclass.pgm instead of samples.txt"),
        ("--lambda", float, 0.5, "contrastive-loss weight"),
        ("--margin", float, 1.0, "contrastive margin"),
        ("--epochs", int, 30, "training epochs"),
        ("--batch", int, 64, "mini-batch size"),
        ("--lr", float, 1e-3, "Adam learning rate"),
        ("--experts", int, 4, "CondConv experts per block"),
        ("--seed", int, 0, "random seed"),
        ("--no-af", FLAG, False, "replace adaptive fusion by a plain sum"),
        ("--no-correlation", FLAG, False, "replace the correlation layer by concatenation + FC"),
    ],
    "predict": [
        ("--t1", str, REQUIRED, "first-date PGM"),
        ("--t2", str, REQUIRED, "second-date PGM"),
        ("--model", str, REQUIRED, "checkpoint"),
        ("--out", str, REQUIRED, "change map PGM"),
        ("--batch", int, 256, "prediction batch size"),
        ("--no-af", FLAG, False, "assert the checkpoint was trained without adaptive fusion"),
        ("--no-correlation", FLAG, False, "assert the checkpoint was trained without correlation"),
    ],
    "evaluate": [
        ("--map", str, REQUIRED, "predicted change map PGM"),
        ("--truth", str, REQUIRED, "reference change map PGM"),
        ("--out", str, None, "report JSON path"),
        ("--seed", int, 0, "seed recorded in the report"),
    ],
    "noise": [
        ("--t1", str, REQUIRED, "first-date PGM"),
        ("--t2", str, REQUIRED, "second-date PGM"),
        ("--truth", str, REQUIRED, "reference change map PGM"),
        ("--model", str, REQUIRED, "checkpoint"),
        ("--out", str, REQUIRED, "output directory"),
        ("--vars", str, ",".join(str(v) for v in data.SWEEP_VARIANCES), "comma-separated Gaussian variances"),
        ("--rayleigh", FLAG, False, "also run the Rayleigh column"),
        ("--rayleigh-scale", float, data.RAYLEIGH_UNIT_MEAN_SCALE, "Rayleigh scale sigma"),
        ("--single-image", FLAG, False, "corrupt only the second date"),
        ("--batch", int, 256, "prediction batch size"),
        ("--seed", int, 0, "noise seed"),
    ],
}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarcd", description="Unsupervised SAR change detection")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file of option values")
        for flag, typ, _default, text in options:
            if typ is FLAG:
                p.add_argument(flag, dest=_dest(flag), action="store_const", const=True, default=None, help=text)
            else:
                p.add_argument(flag, dest=_dest(flag), type=typ, default=None, help=text)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    options = COMMANDS[command]
    known = {_dest(f): (typ, default) for f, typ, default, _ in options}
    cfg = {k: d for k, (_, d) in known.items()}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError(f"{args.config}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(known))
        if unknown:
            raise CliError(f"{args.config}: unknown keys for '{command}': {', '.join(unknown)}")
        for k, v in loaded.items():
            typ = known[k][0]
            cfg[k] = bool(v) if typ is FLAG else (typ(v) if v is not None else None)
    for k in known:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    missing = [f"--{k.replace('_', '-')}" for k, v in cfg.items() if v is REQUIRED]
    if missing:
        raise CliError(f"'{command}' needs {', '.join(missing)}")
    return cfg


def _echo(command: str, cfg: dict, directory: str) -> None:
    os.makedirs(directory or ".", exist_ok=True)
    with open(os.path.join(directory or ".", f"{command}_config.json"), "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_pair(cfg):
    i1 = data.load_pgm(cfg["t1"])
    i2 = data.load_pgm(cfg["t2"])
    if i1.shape != i2.shape:
        raise CliError(f"image sizes differ: {cfg['t1']} is {i1.shape}, {cfg['t2']} is {i2.shape}")
    return i1, i2


def _parent(path: str) -> str:
    return os.path.dirname(os.path.abspath(path))


# subcommands ----------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    out = cfg["out"]
    i1, i2, truth = data.synth_scene(size=cfg["size"], seed=cfg["seed"], looks=cfg["looks"],
                                     n_regions=cfg["regions"], change_gain=cfg["gain"])
    _echo("synth", cfg, out)
    for name, grid in (("t1", i1), ("t2", i2), ("truth", truth)):
        data.save_pgm(grid, os.path.join(out, f"{name}.pgm"))
    print(f"wrote {out}/t1.pgm, t2.pgm, truth.pgm ({cfg['size']}x{cfg['size']}, "
          f"{int((truth == 255).sum())} changed pixels)")
    return 0


def cmd_preclassify(cfg: dict) -> int:
    i1, i2 = _load_pair(cfg)
    out = cfg["out"]
    di = preclassify.log_ratio_di(i1, i2)
    if np.ptp(di) == 0:
        raise CliError("difference image is constant (identical inputs?); nothing to classify")
    pmap = preclassify.hierarchical_preclassify(di, theta=cfg["theta"], seed=cfg["seed"])
    samples = preclassify.select_training_samples(pmap, fraction=cfg["nt"], seed=cfg["seed"])
    _echo("preclassify", cfg, out)
    data.save_pgm(di, os.path.join(out, "di.pgm"))
    data.save_pgm(pmap.labels, os.path.join(out, "preclass.pgm"))
    preclassify.save_samples(samples, os.path.join(out, "samples.txt"))
    print(f"T_c1={pmap.t_c1} changed={int(pmap.changed.sum())} intermediate={int(pmap.intermediate.sum())} "
          f"unchanged={int(pmap.unchanged.sum())} samples={len(samples)}")
    return 0


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(experts=cfg["experts"], seed=cfg["seed"], use_af=not cfg["no_af"],
                       use_correlation=not cfg["no_correlation"])


def cmd_train(cfg: dict) -> int:
    i1, i2 = _load_pair(cfg)
    pre = cfg["pre"]
    if cfg["nt"] is None:
        path = os.path.join(pre, "samples.txt")
        if not os.path.exists(path):
            raise CliError(f"{path} not found; run 'preclassify' first")
        samples = preclassify.load_samples(path)
        if len(samples) == 0:
            raise CliError(f"{path} holds no training samples")
    else:
        pmap = preclassify.PreclassMap(
            preclassify.labels_from_pgm(data.load_pgm(os.path.join(pre, "preclass.pgm"))), 0, 0, [])
        samples = preclassify.select_training_samples(pmap, fraction=cfg["nt"], seed=cfg["seed"])
    if samples[:, 0].max() >= i1.shape[0] or samples[:, 1].max() >= i1.shape[1]:
        raise CliError("training samples fall outside the image; preclassification does not match --t1/--t2")
    if len(np.unique(samples[:, 2])) < 2:
        raise CliError("training samples cover a single class; the pseudo-labels are degenerate")
    tcfg = train.TrainConfig(lam=cfg["lambda"], margin=cfg["margin"], lr=cfg["lr"], epochs=cfg["epochs"],
                             batch_size=cfg["batch"], seed=cfg["seed"], r=cfg["r"],
                             nt=cfg["nt"] if cfg["nt"] is not None else 0.04)
    model, history = train.train(i1, i2, samples, tcfg, _model_config(cfg))
    out = cfg["out"]
    _echo("train", cfg, _parent(out))
    train.save_checkpoint(model, tcfg, out)
    stem = os.path.splitext(out)[0]
    train.write_loss_log(history, stem + "_loss.tsv")
    print(f"final train accuracy {history[-1].accuracy:.4f} ({len(samples)} samples, {tcfg.epochs} epochs)")
    return 0


def _load_model(path: str, cfg: dict):
    model, tcfg = train.load_checkpoint(path)
    if cfg.get("no_af") and model.config.use_af:
        raise CliError(f"{path} was trained with adaptive fusion but --no-af was given")
    if cfg.get("no_correlation") and model.config.use_correlation:
        raise CliError(f"{path} was trained with the correlation layer but --no-correlation was given")
    return model, tcfg


def cmd_predict(cfg: dict) -> int:
    i1, i2 = _load_pair(cfg)
    model, tcfg = _load_model(cfg["model"], cfg)
    pred = evaluate.predict_change_map(model, i1, i2, r=tcfg.r, batch_size=cfg["batch"])
    _echo("predict", cfg, _parent(cfg["out"]))
    data.save_pgm(pred, cfg["out"])
    print(f"wrote {cfg['out']} ({int((pred == 255).sum())} changed pixels)")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    pred = data.load_pgm(cfg["map"])
    truth = data.load_pgm(cfg["truth"])
    if pred.shape != truth.shape:
        raise CliError(f"map {cfg['map']} is {pred.shape} but truth {cfg['truth']} is {truth.shape}")
    report = evaluate.MetricsReport.from_maps(pred, truth, "none", cfg["seed"])
    print(report.table())
    if cfg["out"]:
        _echo("evaluate", cfg, _parent(cfg["out"]))
        with open(cfg["out"], "w") as fh:
            fh.write(report.to_json() + "\n")
    return 0


def _parse_vars(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--vars must be comma-separated numbers, got {text!r}") from None
    if any(v < 0 for v in values):
        raise CliError("--vars entries must be >= 0")
    return values


def cmd_noise(cfg: dict) -> int:
    i1, i2 = _load_pair(cfg)
    truth = data.load_pgm(cfg["truth"])
    if truth.shape != i1.shape:
        raise CliError(f"truth {cfg['truth']} is {truth.shape}, images are {i1.shape}")
    model, tcfg = _load_model(cfg["model"], cfg)
    variances = _parse_vars(cfg["vars"])
    out = cfg["out"]
    conds = [(f"var={v:g}", "gaussian", v) for v in variances]
    if cfg["rayleigh"]:
        conds.append(("rayleigh", "rayleigh", 0.0))
    rows = []
    for label, kind, var in conds:
        a, b = evaluate.noisy_pair(i1, i2, kind, var, cfg["rayleigh_scale"], cfg["seed"],
                                   both=not cfg["single_image"])
        pred = evaluate.predict_change_map(model, a, b, r=tcfg.r, batch_size=cfg["batch"])
        name = kind if kind == "rayleigh" else f"gaussian:{var:g}"
        rep = evaluate.MetricsReport.from_maps(pred, truth, name, cfg["seed"])
        rows.append((label, rep))
        log.info("%s  PCC %.2f  KC %.2f", label, rep.pcc, rep.kc)
    _echo("noise", cfg, out)
    summary = []
    for label, rep in rows:
        with open(os.path.join(out, f"report_{label.replace('=', '_')}.json"), "w") as fh:
            fh.write(rep.to_json() + "\n")
        summary.append({"condition": label, **json.loads(rep.to_json())})
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    table = evaluate.sweep_table(rows)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "preclassify": cmd_preclassify,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "noise": cmd_noise,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except (CliError, OSError, ValueError) as exc:
        print(f"sarcd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
