"""Command-line entry point for training, evaluation, cross-validation, the
tau sweep, synthetic data generation, and the gradient checker.

Configuration is a plain-text key=value file overridable by flags; unknown
keys are rejected. Every run writes the fully resolved configuration to
<out>/effective-config.txt, which is itself a valid config file, so any
result can be reproduced from that dump alone.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Optional

from .dataio import Dataset, SynthConfig, load_manifest, synth_keyframe_dataset, write_manifest
from .network import load_checkpoint, save_checkpoint
from .trainer import (
    TrainConfig,
    confusion_table,
    cross_validate,
    curve_csv,
    evaluate,
    grad_check,
    train,
)


class UsageError(Exception):
    """Bad invocation (unknown key, missing input); exits with status 2."""


# Every configuration key with its default. Booleans are true/false in the
# file; units may be a single count (repeated `layers` times) or a
# comma-separated list that overrides `layers`.
DEFAULTS = {
    "seed": 0,
    "epochs": 20,
    "batch_size": 32,
    "lr0": 0.001,
    "decay_base": 0.96,
    "decay_every": 100000,
    "l2": 0.004,
    "dropout_p": 0.5,
    "lambda_aux": 0.5,
    "layers": 5,
    "units": "30",
    "tau": 3,
    "alpha_policy": "clamped",
    "window_mode": "sliding",
    "inference_policy": "pseudo_label",
    "hist_placement": "top",
    "peephole": "diag",
    "use_historical": True,
    "kfolds": 5,
    "manifest": "",
    "checkpoint": "",
    "out": "hlstm-out",
    "synth": False,
    "synth_classes": 4,
    "synth_dim": 16,
    "synth_length": 30,
    "synth_signal_start": 10,
    "synth_signal_end": 15,
    "synth_noise_sigma": 1.0,
    "synth_distractor": True,
    "synth_distractor_gain": 1.0,
    "synth_n_per_class": 50,
    "gradcheck_seeds": 20,
}


def _convert(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from None


def parse_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {text!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < individual flags < --set overrides."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key in DEFAULTS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = flag_val
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set needs key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"--set: unknown key {key!r}")
        cfg[key] = _convert(key, raw)
    return cfg


def _layer_units(cfg: dict) -> tuple:
    units = str(cfg["units"])
    if "," in units:
        return tuple(int(u) for u in units.split(",") if u.strip())
    return (int(units),) * int(cfg["layers"])


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr0=cfg["lr0"],
            decay_base=cfg["decay_base"],
            decay_every=cfg["decay_every"],
            l2=cfg["l2"],
            batch_size=cfg["batch_size"],
            dropout_p=cfg["dropout_p"],
            epochs=cfg["epochs"],
            seed=cfg["seed"],
            lambda_aux=cfg["lambda_aux"],
            layer_units=_layer_units(cfg),
            tau=cfg["tau"],
            window_mode=cfg["window_mode"],
            alpha_policy=cfg["alpha_policy"],
            inference_policy=cfg["inference_policy"],
            hist_placement=cfg["hist_placement"],
            peephole=cfg["peephole"],
            use_historical=cfg["use_historical"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def synth_config(cfg: dict) -> SynthConfig:
    try:
        return SynthConfig(
            classes=cfg["synth_classes"],
            dim=cfg["synth_dim"],
            length=cfg["synth_length"],
            signal_window=(cfg["synth_signal_start"], cfg["synth_signal_end"]),
            noise_sigma=cfg["synth_noise_sigma"],
            distractor=cfg["synth_distractor"],
            distractor_gain=cfg["synth_distractor_gain"],
            seed=cfg["seed"],
            n_per_class=cfg["synth_n_per_class"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_dataset(cfg: dict) -> Dataset:
    if cfg["manifest"]:
        return load_manifest(cfg["manifest"])
    if cfg["synth"]:
        return synth_keyframe_dataset(synth_config(cfg))
    raise UsageError("no data source: set manifest=PATH or synth=true")


def dump_effective_config(cfg: dict, command: str) -> str:
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective-config.txt")
    lines = [f"# command: {command}\n"]
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key}={val}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    return path


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def cmd_train(cfg: dict) -> int:
    dataset = load_dataset(cfg)
    tcfg = train_config(cfg)
    net, metrics = train(dataset, tcfg, log=print)
    out = cfg["out"]
    ckpt = os.path.join(out, "model.ckpt")
    save_checkpoint(net, ckpt)
    _write(os.path.join(out, "train_curve.csv"), curve_csv(metrics))
    _write(os.path.join(out, "train_metrics.txt"), confusion_table(metrics))
    print(f"train: {len(dataset)} sequences, final training accuracy "
          f"{metrics.accuracy:.4f}")
    print(f"checkpoint -> {ckpt}")
    return 0


def cmd_eval(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise UsageError("eval needs checkpoint=PATH")
    net = load_checkpoint(cfg["checkpoint"])
    dataset = load_dataset(cfg)
    metrics = evaluate(net, dataset)
    table = confusion_table(metrics)
    _write(os.path.join(cfg["out"], "eval_metrics.txt"), table)
    print(table, end="")
    return 0


def cmd_cv(cfg: dict) -> int:
    dataset = load_dataset(cfg)
    metrics = cross_validate(dataset, train_config(cfg), k=cfg["kfolds"], log=print)
    table = confusion_table(metrics)
    _write(os.path.join(cfg["out"], "cv_metrics.txt"), table)
    print(table, end="")
    return 0


def cmd_sweep_tau(cfg: dict) -> int:
    dataset = load_dataset(cfg)
    base = train_config(cfg)
    rows = []
    for tau in (2, 3, 4, 5):
        m = cross_validate(dataset, replace(base, tau=tau, use_historical=True),
                           k=cfg["kfolds"])
        rows.append((f"historical tau={tau}", m.accuracy))
        print(f"historical tau={tau}: mean accuracy {m.accuracy:.4f}")
    m = cross_validate(dataset, replace(base, use_historical=False), k=cfg["kfolds"])
    rows.append(("lstm", m.accuracy))
    print(f"lstm: mean accuracy {m.accuracy:.4f}")
    width = max(len(r[0]) for r in rows)
    table = "method".ljust(width) + "  accuracy\n"
    table += "\n".join(f"{name.ljust(width)}  {acc:.4f}" for name, acc in rows) + "\n"
    csv = "method,accuracy\n" + "".join(f"{n},{a!r}\n" for n, a in rows)
    _write(os.path.join(cfg["out"], "sweep.txt"), table)
    _write(os.path.join(cfg["out"], "sweep.csv"), csv)
    print(table, end="")
    return 0


def cmd_synth(cfg: dict) -> int:
    dataset = synth_keyframe_dataset(synth_config(cfg))
    manifest = os.path.join(cfg["out"], "manifest.txt")
    write_manifest(manifest, dataset)
    print(f"synth: wrote {len(dataset)} sequences "
          f"({dataset.n_classes} classes) -> {manifest}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    report = grad_check(seeds=cfg["gradcheck_seeds"])
    line = (f"gradcheck: max relative error {report.max_rel_err:.3e} "
            f"(block {report.worst_block}) over {len(report.cases)} cases "
            f"in {report.elapsed_s:.1f}s")
    _write(os.path.join(cfg["out"], "gradcheck.txt"), line + "\n")
    print(line)
    if report.missing_coverage:
        print(f"gradcheck: missing branch coverage: {report.missing_coverage}")
    return 0 if report.ok else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "sweep-tau": cmd_sweep_tau,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hlstm",
        description="Sequence classification with an LSTM variant that keeps "
                    "a loss-guided running summary of its per-step states.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--tau", type=int)
        p.add_argument("--alpha-policy", dest="alpha_policy")
        p.add_argument("--window-mode", dest="window_mode")
        p.add_argument("--inference-policy", dest="inference_policy")
        p.add_argument("--hist-placement", dest="hist_placement")
        p.add_argument("--layers", type=int)
        p.add_argument("--units")
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="output directory (default hlstm-out)")
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")
        p.add_argument("--kfolds", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    return parser


def run(argv: Optional[list] = None) -> int:
    """Parse and execute; returns the exit status instead of raising."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        dump_effective_config(cfg, args.command)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
