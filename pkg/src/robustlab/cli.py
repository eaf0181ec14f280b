"""Command-line interface.

Exit codes: 0 success, 2 config error (unparseable/invalid config, missing
checkpoint, bad flag), 3 numeric failure (non-finite values, oracle or
tolerance violations).
"""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click
import jsonschema
import numpy as np
import torch

from . import harness
from .common import ConfigError, NumericOverflow, OracleFailure, derive_seed
from .training import load_classifier

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, jsonschema.ValidationError, FileNotFoundError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (NumericOverflow, OracleFailure) as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), required=True,
                      help="Experiment config file (.cfg/.yaml/.json).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config's root seed.")(fn)
    fn = click.option("--out-dir", type=click.Path(), default="runs", show_default=True)(fn)
    fn = click.option("--device", type=str, default="cpu", show_default=True)(fn)
    fn = click.option("--deterministic", is_flag=True, default=False,
                      help="Bit-reproducible mode; also freezes record timestamps.")(fn)
    return fn


def _check_device(device: str):
    if device != "cpu" and not torch.cuda.is_available():
        raise ConfigError(f"device {device!r} is not available in this environment")


@click.group()
def main():
    """Adversarial-robustness experiments: training, attacks, evaluation."""


@main.command("run")
@_common_options
@_handle_errors
def run_cmd(config_path, seed, out_dir, device, deterministic):
    """Train missing models and execute the full evaluation grid."""
    _check_device(device)
    records = harness.run_experiment(config_path, out_dir, seed=seed,
                                     deterministic=deterministic or None)
    for r in records:
        click.echo(f"{r.model_id:>12s}  {r.metric:>15s}  {r.value:10.4f}  {r.attack}")
    click.echo(f"{len(records)} records -> {Path(out_dir) / 'records.jsonl'}")


@main.command("train-denoiser")
@_common_options
@_handle_errors
def train_denoiser_cmd(config_path, seed, out_dir, device, deterministic):
    """Train the denoiser models of a config (no evaluations)."""
    _train_only(config_path, seed, out_dir, device, deterministic, "denoiser")


@main.command("train-classifier")
@_common_options
@_handle_errors
def train_classifier_cmd(config_path, seed, out_dir, device, deterministic):
    """Train the classifier models of a config (no evaluations)."""
    _train_only(config_path, seed, out_dir, device, deterministic, "classifier")


def _train_only(config_path, seed, out_dir, device, deterministic, model_type):
    _check_device(device)
    config = harness.load_config(config_path)
    seed = config["seed"] if seed is None else seed
    deterministic = deterministic or config.get("deterministic", False)
    data = harness._build_data(config, seed)
    out = Path(out_dir)
    trained = 0
    for entry in config["models"]:
        if entry["type"] != model_type:
            continue
        harness._train_or_load_model(entry, config, data, out, seed, deterministic)
        trained += 1
        click.echo(f"model {entry['id']!r} ready under {out / 'models'}")
    if trained == 0:
        raise ConfigError(f"config declares no models of type {model_type!r}")


@main.command("eval")
@_common_options
@_handle_errors
def eval_cmd(config_path, seed, out_dir, device, deterministic):
    """Run the evaluation grid against existing checkpoints only."""
    _check_device(device)
    config = harness.load_config(config_path)
    model_dir = Path(out_dir) / "models"
    missing = [m["id"] for m in config["models"] if not (model_dir / f"{m['id']}.pt").exists()]
    if missing:
        raise ConfigError(
            f"missing checkpoints for {missing} under {model_dir}; run `robustlab run` or train-* first"
        )
    records = harness.run_experiment(config_path, out_dir, seed=seed,
                                     deterministic=deterministic or None)
    for r in records:
        click.echo(f"{r.model_id:>12s}  {r.metric:>15s}  {r.value:10.4f}  {r.attack}")


@main.command("attack")
@_common_options
@click.option("--n-images", type=int, default=16, show_default=True)
@_handle_errors
def attack_cmd(config_path, seed, out_dir, device, deterministic, n_images):
    """Generate adversarial batches for each eval and dump PNG + raw floats."""
    _check_device(device)
    config = harness.load_config(config_path)
    seed = config["seed"] if seed is None else seed
    data = harness._build_data(config, seed)
    out = Path(out_dir)
    models = {m["id"]: harness._train_or_load_model(m, config, data, out, seed, deterministic)
              for m in config["models"]}
    dumped = 0
    for i, ev in enumerate(config["evals"]):
        model = models[ev["model"]]
        prefix = f"{ev['model']}_{i:02d}"
        if "attack" in ev:
            spec = ev["attack"]
            attack_fn = harness._attack_fn_from_spec(spec, seed)
            x = torch.as_tensor(data["test_images"][:n_images], dtype=torch.float32)
            y = torch.as_tensor(data["test_labels"][:n_images], dtype=torch.long)
            harness.dump_adversarial_batch(out / "adversarial", attack_fn(model, x, y), prefix)
            dumped += 1
        elif "corruption" in ev and ev["corruption"].get("kind") in ("obsatk", "random_zm"):
            corruption = harness.Corruption(**ev["corruption"])
            rng = harness._salted_rng(seed, "attack", harness._descriptor(ev["corruption"]))
            patch_size = int(config["data"].get("patch_size", 32))
            patches = harness.sample_patches(data["test_images"], patch_size, n_images, rng)
            x = torch.as_tensor(patches, dtype=torch.float32)
            sigma = corruption.gamma_hat - corruption.atk_rate
            y = x + torch.as_tensor(rng.normal(0.0, sigma, size=tuple(x.shape)), dtype=torch.float32)
            eps = corruption.atk_rate * float(np.sqrt(np.prod(x.shape[1:])))
            res = harness.obs_atk(model, x, y, eps, steps=corruption.steps, eta=corruption.eta)
            harness.dump_adversarial_batch(out / "adversarial", y + res.delta.to(torch.float32), prefix)
            dumped += 1
    click.echo(f"dumped {dumped} adversarial batches under {out / 'adversarial'}")


@main.command("project-check")
@click.option("--n-vectors", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_handle_errors
def project_check_cmd(n_vectors, seed):
    """Verify the two-step projection against the KKT oracle on random vectors."""
    report = harness.projection_check(n_vectors=n_vectors, seed=seed)
    for key, value in report.items():
        click.echo(f"{key}: {value}")
    if report["max_equivalence_gap"] > 1e-6 or report["max_idempotence_drift"] > 1e-12:
        raise NumericOverflow("projection equivalence outside tolerance")
    click.echo("projection check passed")


@main.command("diagnose-channels")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), default="runs", show_default=True)
@click.option("--class-index", type=int, default=0, show_default=True)
@click.option("--eps", type=float, default=8 / 255, show_default=True)
@click.option("--steps", type=int, default=20, show_default=True)
@click.option("--n-images", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_handle_errors
def diagnose_channels_cmd(checkpoint, out_dir, class_index, eps, steps, n_images, seed):
    """Emit the per-channel activation comparison CSV for a classifier."""
    from .attacks import pgd_linf
    from .cifs import channel_activation_stats, channel_diagnostics_csv
    from .datasets import shape_classification_dataset

    model, spec = load_classifier(checkpoint)
    if not hasattr(model, "penultimate_features"):
        raise ConfigError("diagnose-channels needs a residual classifier checkpoint")
    size = 32 if spec.in_channels == 3 else 28
    images, labels = shape_classification_dataset(
        n_images * 10, size, spec.in_channels, seed=derive_seed(seed, "data") % (2**31)
    )
    keep = labels == class_index
    x = torch.as_tensor(images[keep][:n_images], dtype=torch.float32)
    y = torch.as_tensor(labels[keep][:n_images], dtype=torch.long)
    if x.shape[0] == 0:
        raise ConfigError(f"no samples of class {class_index}")
    model.eval()
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, "attack"))
    x_adv = pgd_linf(model, x, y, eps, steps, eps / 10.0, generator=gen)
    with torch.no_grad():
        nat = channel_activation_stats(model.penultimate_features(x))
        adv = channel_activation_stats(model.penultimate_features(x_adv))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"channels_class{class_index}.csv"
    channel_diagnostics_csv(csv_path, model.fc.weight[class_index].detach().numpy(), nat, adv)
    click.echo(f"wrote {csv_path}")


if __name__ == "__main__":
    main()
