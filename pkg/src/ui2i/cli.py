"""Command-line surface: training, translation, evaluation, synthetic data
generation, and the normalization toy example.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure, 4 I/O error.
"""

import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import data, metrics, toy as toy_mod, trainer as trainer_mod
from .augment import ScaleAugmentConfig
from .data import SyntheticUnmixSpec
from .losses import LossWeights, SEGMENTATION_WEIGHTS, UNMIXING_WEIGHTS
from .models import GeneratorConfig
from .trainer import NumericalInstabilityError, TrainConfig

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# Built-in defaults for the declarative run config. ``null`` channel counts
# are inferred from the training directories.
DEFAULT_CONFIG = {
    "model": {
        "channels_a": None,
        "channels_b": None,
        "base_width": 64,
        "levels": 3,
        "attention_levels": [2, 3],
        "inner_convs": 2,
    },
    "train": {
        "iterations": 2000,
        "lr": 2e-4,
        "adam_betas": [0.5, 0.999],
        "seed": None,
        "mode": "three-class",
        "patch_size": 256,
        "buffer_capacity": 50,
        "projection_width": 256,
        "contrastive_max_negatives": 256,
        "log_every": 1,
        "checkpoint_every": 500,
        "scale_min": 0.75,
        "scale_max": 1.5,
        "augment_enabled": True,
    },
    "data": {
        "resize_to": None,
    },
    "losses": {
        "lambda_cyc": None,
        "lambda_id": None,
        "lambda_cl": None,
        "tau": 0.07,
    },
}


class ConfigError(Exception):
    pass


def load_run_config(path=None) -> dict:
    """Merge a YAML config file over the built-in defaults, rejecting
    unknown sections or keys."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return config
    try:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config file must be a mapping of sections")
    for section, values in user.items():
        if section not in config:
            raise ConfigError(f"unknown config section: {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in config[section]:
                raise ConfigError(f"unknown config key: {section}.{key}")
            config[section][key] = value
    return config


def resolve_seed(flag_seed, config_seed) -> int:
    if flag_seed is not None:
        return flag_seed
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get("UI2I_SEED")
    if env is not None:
        return int(env)
    return 0


def build_loss_weights(cfg: dict, mode: str) -> LossWeights:
    base = SEGMENTATION_WEIGHTS if mode == "three-class" else UNMIXING_WEIGHTS
    section = cfg["losses"]
    return LossWeights(
        lambda_cyc=base.lambda_cyc if section["lambda_cyc"] is None else section["lambda_cyc"],
        lambda_id=base.lambda_id if section["lambda_id"] is None else section["lambda_id"],
        lambda_cl=base.lambda_cl if section["lambda_cl"] is None else section["lambda_cl"],
        tau=section["tau"],
    )


def _echo_record(record: dict) -> None:
    click.echo(json.dumps(record, sort_keys=True))


@click.group()
def main():
    """Unpaired bidirectional image-to-image translation toolkit."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML run config; flags override file values.")
@click.option("--domain-a", required=True, type=click.Path())
@click.option("--domain-b", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--iters", type=int, default=None, help="Override train.iterations.")
@click.option("--mode", type=click.Choice(["three-class", "two-class"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--base-width", type=int, default=None)
@click.option("--patch-size", type=int, default=None)
@click.option("--resume", "resume_from", type=click.Path(), default=None)
def train(config_path, domain_a, domain_b, out_dir, iters, mode, seed,
          base_width, patch_size, resume_from):
    """Train the translation model on two unpaired domain directories."""
    try:
        cfg = load_run_config(config_path)
        if not Path(domain_a).is_dir():
            raise ConfigError(f"domain A directory does not exist: {domain_a}")
        if not Path(domain_b).is_dir():
            raise ConfigError(f"domain B directory does not exist: {domain_b}")
        t = cfg["train"]
        if iters is not None:
            t["iterations"] = iters
        if mode is not None:
            t["mode"] = mode
        if patch_size is not None:
            t["patch_size"] = patch_size
        if base_width is not None:
            cfg["model"]["base_width"] = base_width
        t["seed"] = resolve_seed(seed, t["seed"])

        channels_a = cfg["model"]["channels_a"] or data.probe_channels(domain_a)
        channels_b = cfg["model"]["channels_b"] or data.probe_channels(domain_b)
        model_cfg = GeneratorConfig(
            channels_a=channels_a,
            channels_b=channels_b,
            base_width=cfg["model"]["base_width"],
            levels=cfg["model"]["levels"],
            attention_levels=tuple(cfg["model"]["attention_levels"]),
            inner_convs=cfg["model"]["inner_convs"],
        )
        train_cfg = TrainConfig(
            iterations=t["iterations"],
            lr=t["lr"],
            adam_betas=tuple(t["adam_betas"]),
            seed=t["seed"],
            mode=t["mode"],
            patch_size=t["patch_size"],
            weights=build_loss_weights(cfg, t["mode"]),
            buffer_capacity=t["buffer_capacity"],
            augment=ScaleAugmentConfig(t["scale_min"], t["scale_max"],
                                       t["augment_enabled"]),
            projection_width=t["projection_width"],
            contrastive_max_negatives=t["contrastive_max_negatives"],
            log_every=t["log_every"],
            checkpoint_every=t["checkpoint_every"],
        )
    except (ConfigError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        final = trainer_mod.train(model_cfg, train_cfg, domain_a, domain_b, out_dir,
                                  resize_to=cfg["data"]["resize_to"],
                                  resume_from=resume_from)
    except NumericalInstabilityError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    _echo_record({"final_checkpoint": str(final)})


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--input", "input_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--direction", type=click.Choice(["ab", "ba"]), required=True)
@click.option("--cycle-check", is_flag=True,
              help="Also translate back and report the mean cycle L1.")
def translate(checkpoint, input_dir, out_dir, direction, cycle_check):
    """Translate every image in a directory, preserving filenames and bit
    depth (multi-channel outputs switch to multi-page TIFF)."""
    try:
        files = data.list_image_files(input_dir)
        if not files:
            click.echo("no input images found", err=True)
            sys.exit(EXIT_IO)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pair, _ = trainer_mod.load_generators(checkpoint)
        factor = 2 ** pair.cfg.levels
        cycle_l1 = []
        for path in files:
            arr, bit_depth = data.read_image(path)
            image = torch.from_numpy(arr) * 2.0 - 1.0
            padded, record = data.pad_to_divisible(image.unsqueeze(0), factor)
            with torch.no_grad():
                translated, _ = pair.translate(padded, direction)
                if cycle_check:
                    back, _ = pair.translate(translated,
                                             "ba" if direction == "ab" else "ab")
                    cycle_l1.append(float((back - padded).abs().mean()))
            result = data.unpad(translated, record).squeeze(0)
            result01 = ((result + 1.0) / 2.0).clamp(0, 1).numpy()
            name = path.name
            if result01.shape[0] not in (1, 3) and path.suffix.lower() not in (".tif", ".tiff"):
                name = path.stem + ".tif"
            data.write_image(out / name, result01, bit_depth=bit_depth)
        if cycle_check:
            _echo_record({"mean_cycle_l1": float(np.mean(cycle_l1))})
        _echo_record({"translated": len(files), "out": str(out)})
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)


@main.group()
def eval():
    """Evaluation reports (line-delimited JSON records)."""


def _paired_stems(pred_dir, gt_dir):
    pred_files = {p.stem: p for p in data.list_image_files(pred_dir)}
    gt_files = {p.stem: p for p in data.list_image_files(gt_dir)}
    stems = sorted(set(pred_files) & set(gt_files))
    if not stems:
        raise ValueError("no matching file stems between the two directories")
    return [(stem, pred_files[stem], gt_files[stem]) for stem in stems]


@eval.command("seg")
@click.option("--pred", "pred_dir", required=True, type=click.Path())
@click.option("--gt", "gt_dir", required=True, type=click.Path())
def eval_seg(pred_dir, gt_dir):
    """Instance-segmentation metrics between paired label-mask directories."""
    try:
        pairs = _paired_stems(pred_dir, gt_dir)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    records = []
    for stem, pred_path, gt_path in pairs:
        try:
            pred = data.read_mask(pred_path)
            gt = data.read_mask(gt_path)
            scores = metrics.segmentation_scores(metrics.match_instances(pred, gt))
        except ValueError as exc:
            _echo_record({"image": stem, "error": str(exc)})
            continue
        records.append(scores)
        _echo_record({"image": stem, **scores})
    if not records:
        click.echo("all images skipped", err=True)
        sys.exit(EXIT_IO)
    _echo_record({"summary": metrics.mean_std_summary(records)})


@eval.command("pairs")
@click.option("--pred", "pred_dir", required=True, type=click.Path())
@click.option("--gt", "gt_dir", required=True, type=click.Path())
def eval_pairs(pred_dir, gt_dir):
    """PSNR/SSIM between paired image directories."""
    try:
        pairs = _paired_stems(pred_dir, gt_dir)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    records = []
    for stem, pred_path, gt_path in pairs:
        try:
            pred, _ = data.read_image(pred_path)
            gt, _ = data.read_image(gt_path)
            scores = {"psnr": metrics.psnr(pred, gt, peak=1.0),
                      "ssim": metrics.ssim(pred, gt, data_range=1.0)}
        except ValueError as exc:
            _echo_record({"image": stem, "error": str(exc)})
            continue
        records.append(scores)
        _echo_record({"image": stem, **scores})
    if not records:
        click.echo("all images skipped", err=True)
        sys.exit(EXIT_IO)
    _echo_record({"summary": metrics.mean_std_summary(records)})


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--n-train-mixed", type=int, default=200)
@click.option("--n-train-unmixed", type=int, default=200)
@click.option("--n-test-pairs", type=int, default=32)
@click.option("--canvas", type=int, default=None)
def synth(out_dir, seed, n_train_mixed, n_train_unmixed, n_test_pairs, canvas):
    """Generate the synthetic two-domain unmixing dataset."""
    try:
        spec = SyntheticUnmixSpec()
        if canvas is not None:
            spec.canvas = canvas
        resolved = resolve_seed(seed, None)
        dirs = data.generate_unmix_dataset(
            spec, out_dir, n_train_mixed, n_train_unmixed, n_test_pairs, resolved)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    _echo_record({"spec": asdict(spec), "seed": resolved, **dirs})


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
def toy(out_dir):
    """Reproduce the instance-norm vs parameter-norm toy demonstration."""
    try:
        record = toy_mod.render_toy_figure(out_dir)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)
    _echo_record(record)


if __name__ == "__main__":
    main()
