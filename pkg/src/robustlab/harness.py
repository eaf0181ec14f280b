"""Experiment orchestration: metrics, persistence, and the run loop.

Experiments are described by a single YAML/JSON config (schema below):
synthetic data, a list of models to train (or reuse from checkpoints), and
a grid of evaluations.  Every evaluation emits one ExperimentRecord into an
append-only JSON-lines file; floats survive the round trip exactly because
JSON uses shortest-repr encoding.  Re-running a config skips grid cells
whose records already exist and reuses model checkpoints, so an interrupted
run resumes where it stopped.

One root seed fans out to named streams (data/noise/attack/init/train/eval)
via SeedSequence spawn keys; per-eval randomness is additionally salted by
the evaluation descriptor so that resuming never shifts another cell's
stream.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import torch
import yaml

from . import datasets
from .attacks import (
    AttackSpec,
    _final_logits,
    adaptive_cifs_attack,
    cw_pgd,
    fgsm,
    obs_atk,
    pgd_linf,
    random_zero_mean,
)
from .common import SEED_STREAMS, ConfigError, config_hash, derive_seed
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .geometry import project_constraint_set, qp_projection_oracle
from .noise import psnr, sample_patches
from .training import (
    ClassifierSpec,
    TrainConfig,
    load_classifier,
    save_classifier,
    train_classifier,
    train_denoiser,
    write_history_jsonl,
)

METRICS = ("robust_accuracy", "avg_psnr", "loss")

FIXED_TIMESTAMP = "1970-01-01T00:00:00Z"


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

RECORD_SCHEMA = {
    "type": "object",
    "required": [
        "experiment_id", "model_id", "config_hash", "attack",
        "metric", "value", "n_samples", "seed", "timestamp",
    ],
    "properties": {
        "experiment_id": {"type": "string"},
        "model_id": {"type": "string"},
        "config_hash": {"type": "string"},
        "attack": {"type": "string"},
        "metric": {"enum": list(METRICS)},
        "value": {"type": "number"},
        "n_samples": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "timestamp": {"type": "string"},
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class ExperimentRecord:
    experiment_id: str
    model_id: str
    config_hash: str
    attack: str
    metric: str
    value: float
    n_samples: int
    seed: int
    timestamp: str

    def validate(self) -> "ExperimentRecord":
        jsonschema.validate(dataclasses.asdict(self), RECORD_SCHEMA)
        if not math.isfinite(self.value):
            raise ValueError(f"record value must be finite, got {self.value}")
        if self.metric == "robust_accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy outside [0, 1]: {self.value}")
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ExperimentRecord":
        return cls(**json.loads(line)).validate()

    def key(self) -> tuple:
        return (self.experiment_id, self.model_id, self.attack, self.metric, self.seed)


def append_record(path, record: ExperimentRecord) -> None:
    record.validate()
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()


def read_records(path) -> list[ExperimentRecord]:
    records = []
    path = Path(path)
    if not path.exists():
        return records
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ExperimentRecord.from_json(line))
    return records


def write_summary_csv(path, records: list[ExperimentRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment_id", "model_id", "attack", "metric", "value", "n_samples", "seed"])
        for r in records:
            writer.writerow([r.experiment_id, r.model_id, r.attack, r.metric, repr(r.value), r.n_samples, r.seed])


def _timestamp(deterministic: bool) -> str:
    if deterministic:
        return FIXED_TIMESTAMP
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def robust_accuracy(model, attack_fn, images, labels, filtered: bool = False,
                    batch_size: int = 128) -> float:
    """Fraction of attacked inputs still classified correctly.

    ``attack_fn(model, x, y) -> x_adv``; pass an identity for clean
    accuracy.  With ``filtered=True`` the denominator is restricted to
    samples whose clean versions the model already classifies correctly
    (the two protocols measure different things and are reported side by
    side, never compared).
    """
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x.shape[0] == 0:
        raise ValueError("robust accuracy of an empty dataset is undefined")
    model.eval()
    if filtered:
        keep = []
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                logits = _final_logits(model(x[start : start + batch_size]))
                keep.append(logits.argmax(dim=1) == y[start : start + batch_size])
        mask = torch.cat(keep)
        if not bool(mask.any()):
            raise ValueError("filtered protocol has an empty denominator: no clean sample is classified correctly")
        x, y = x[mask], y[mask]
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        x_adv = attack_fn(model, xb, yb)
        with torch.no_grad():
            preds = _final_logits(model(x_adv)).argmax(dim=1)
        correct += int((preds == yb).sum())
    return correct / x.shape[0]


def topk_accuracy(model, images, labels, k: int, batch_size: int = 256) -> float:
    """Fraction of samples whose label is among the k largest logits."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    model.eval()
    hits = 0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = _final_logits(model(x[start : start + batch_size]))
            top = logits.topk(k, dim=1).indices
            hits += int((top == y[start : start + batch_size, None]).any(dim=1).sum())
    return hits / x.shape[0]


CORRUPTION_KINDS = ("gaussian", "uniform", "obsatk", "random_zm", "none")


@dataclass(frozen=True)
class Corruption:
    """Test-time degradation of noisy observations for denoiser evaluation.

    The total-noise energy density stays bounded by gamma_hat^2: attacked
    observations start from base noise at level gamma_hat - atk_rate and
    receive a perturbation of l2 norm at most atk_rate * sqrt(m).
    """

    kind: str = "gaussian"
    gamma_hat: float = 25 / 255
    atk_rate: float = 0.0
    steps: int = 5
    eta: float | None = None

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if self.gamma_hat < 0 or self.atk_rate < 0:
            raise ValueError("noise levels must be non-negative")
        if self.kind in ("obsatk", "random_zm") and self.atk_rate > self.gamma_hat:
            raise ValueError(
                f"attack rate {self.atk_rate} exceeds the total budget gamma_hat {self.gamma_hat}"
            )


def eval_denoiser(model, corruption: Corruption, images, rng: np.random.Generator,
                  batch_size: int = 16) -> float:
    """Average reconstruction PSNR over a clean test set under a corruption."""
    x_all = np.asarray(images, dtype=np.float64)
    if x_all.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty image set")
    m = int(np.prod(x_all.shape[1:]))
    model.eval()
    values = []
    for start in range(0, x_all.shape[0], batch_size):
        x = x_all[start : start + batch_size]
        if corruption.kind == "none":
            y_in = x.copy()
        elif corruption.kind == "gaussian":
            y_in = x + rng.normal(0.0, corruption.gamma_hat, size=x.shape)
        elif corruption.kind == "uniform":
            half = math.sqrt(3.0) * corruption.gamma_hat
            y_in = x + rng.uniform(-half, half, size=x.shape)
        else:
            sigma = corruption.gamma_hat - corruption.atk_rate
            eps = corruption.atk_rate * math.sqrt(m)
            y = x + rng.normal(0.0, sigma, size=x.shape)
            if corruption.kind == "obsatk":
                xt = torch.as_tensor(x, dtype=torch.float32)
                yt = torch.as_tensor(y, dtype=torch.float32)
                res = obs_atk(model, xt, yt, eps, steps=corruption.steps, eta=corruption.eta)
                y_in = y + res.delta.numpy()
            else:
                pert = np.stack([random_zero_mean(x.shape[1:], eps, rng) for _ in range(x.shape[0])])
                y_in = y + pert
        with torch.no_grad():
            recon = model(torch.as_tensor(y_in, dtype=torch.float32)).numpy()
        for i in range(x.shape[0]):
            values.append(psnr(recon[i], x[i], max_val=1.0))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Geometry oracle sweep (CLI `project-check` and the acceptance gate)
# ---------------------------------------------------------------------------


def projection_check(n_vectors: int = 1000, dim_range: tuple = (2, 64),
                     eps_values: tuple = (0.1, 1.0, 10.0), seed: int = 0) -> dict:
    """Compare the two-step projection with the KKT solver on random vectors.

    Also measures idempotence drift and non-expansiveness violations.
    Returns the worst deviations; the caller decides pass/fail.
    """
    rng = np.random.default_rng(seed)
    t0 = time.time()
    worst_equiv = 0.0
    worst_idem = 0.0
    worst_expansion = 0.0
    for _ in range(n_vectors):
        dim = int(rng.integers(dim_range[0], dim_range[1] + 1))
        delta = rng.uniform(-10.0, 10.0, size=dim)
        other = rng.uniform(-10.0, 10.0, size=dim)
        for eps in eps_values:
            two_step = project_constraint_set(delta, eps)
            oracle = qp_projection_oracle(delta, eps)
            worst_equiv = max(worst_equiv, float(np.max(np.abs(two_step - oracle))))
            again = project_constraint_set(two_step, eps)
            worst_idem = max(worst_idem, float(np.max(np.abs(again - two_step))))
            proj_other = project_constraint_set(other, eps)
            expansion = float(np.linalg.norm(two_step - proj_other)) - float(np.linalg.norm(delta - other))
            worst_expansion = max(worst_expansion, expansion)
    return {
        "n_vectors": n_vectors,
        "max_equivalence_gap": worst_equiv,
        "max_idempotence_drift": worst_idem,
        "max_expansion": worst_expansion,
        "elapsed_seconds": time.time() - t0,
    }


# ---------------------------------------------------------------------------
# Experiment configs
# ---------------------------------------------------------------------------

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "experiment_id", "seed", "data", "models", "evals"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "experiment_id": {"type": "string", "minLength": 1},
        "seed": {"type": "integer"},
        "deterministic": {"type": "boolean"},
        "data": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["denoising", "shapes"]},
                "channels": {"type": "integer", "enum": [1, 3]},
                "image_size": {"type": "integer", "minimum": 8},
                "train_count": {"type": "integer", "minimum": 0},
                "test_count": {"type": "integer", "minimum": 1},
                "patch_size": {"type": "integer", "minimum": 8},
            },
        },
        "models": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "type"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "type": {"enum": ["denoiser", "classifier"]},
                    "arch": {"type": "object"},
                    "train": {"type": "object"},
                },
            },
        },
        "evals": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["model", "metric"],
                "additionalProperties": False,
                "properties": {
                    "model": {"type": "string"},
                    "metric": {"enum": list(METRICS)},
                    "n_images": {"type": "integer", "minimum": 1},
                    "filtered": {"type": "boolean"},
                    "corruption": {"type": "object"},
                    "attack": {"type": "object"},
                },
            },
        },
    },
}


def load_config(path) -> dict:
    """Parse and schema-validate an experiment config (.yaml/.yml/.json/.cfg)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            config = json.loads(text)
        else:
            config = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        details = "; ".join(
            f"$.{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors
        )
        raise ConfigError(f"config violates schema: {details}")
    model_ids = [m["id"] for m in config["models"]]
    if len(set(model_ids)) != len(model_ids):
        raise ConfigError(f"duplicate model ids in config: {model_ids}")
    known = set(model_ids)
    for i, ev in enumerate(config["evals"]):
        if ev["model"] not in known:
            raise ConfigError(f"$.evals.{i}: unknown model id {ev['model']!r}")


def _descriptor(spec: dict) -> str:
    """Canonical compact string for an attack/corruption dict."""
    return json.dumps(spec, sort_keys=True, separators=(",", ":"))


def _salted_rng(root_seed: int, stream: str, salt: str) -> np.random.Generator:
    salt_int = int.from_bytes(hashlib.sha256(salt.encode()).digest()[:4], "big")
    ss = np.random.SeedSequence(root_seed, spawn_key=(SEED_STREAMS[stream], salt_int))
    return np.random.default_rng(ss)


def _attack_fn_from_spec(spec: dict, seed: int):
    """Build attack_fn(model, x, y) for a classifier evaluation."""
    kind = spec.get("kind", "none")
    eps = float(spec.get("eps", 0.0))
    if kind == "none" or eps == 0.0:
        return lambda model, x, y: x
    pixel_min = float(spec.get("pixel_min", 0.0))
    pixel_max = float(spec.get("pixel_max", 1.0))
    steps = int(spec.get("steps", 20))
    step_size = spec.get("step_size")
    step_size = float(step_size) if step_size is not None else eps / 10.0
    rand_init = bool(spec.get("rand_init", False))

    def make_generator():
        gen = torch.Generator()
        gen.manual_seed(derive_seed(seed, "attack"))
        return gen

    if kind == "fgsm":
        return lambda model, x, y: fgsm(model, x, y, eps, pixel_min, pixel_max)
    if kind == "pgd":
        return lambda model, x, y: pgd_linf(
            model, x, y, eps, steps, step_size, rand_init, pixel_min, pixel_max,
            generator=make_generator(),
        )
    if kind == "cw_pgd":
        return lambda model, x, y: cw_pgd(
            model, x, y, eps, int(spec.get("steps", 30)), step_size, rand_init,
            pixel_min, pixel_max, generator=make_generator(),
        )
    if kind == "adaptive_cifs":
        grid = tuple(spec.get("beta_atk_grid", AttackSpec().beta_atk_grid))
        base = spec.get("base", "pgd")
        return lambda model, x, y: adaptive_cifs_attack(
            model, x, y, base, grid, eps=eps, steps=steps, step_size=step_size,
            rand_init=rand_init, pixel_min=pixel_min, pixel_max=pixel_max,
            generator=make_generator(),
        )
    raise ConfigError(f"unknown attack kind {kind!r}")


def _build_data(config: dict, seed: int):
    data_cfg = dict(config["data"])
    kind = data_cfg["kind"]
    channels = int(data_cfg.get("channels", 1))
    size = int(data_cfg.get("image_size", 64 if kind == "denoising" else 28))
    train_count = int(data_cfg.get("train_count", 160))
    test_count = int(data_cfg.get("test_count", 40))
    data_seed = derive_seed(seed, "data")
    if kind == "denoising":
        train = datasets.denoising_images(train_count, size, channels, seed=data_seed % (2**31))
        test = datasets.denoising_images(test_count, size, channels, seed=(data_seed + 1) % (2**31))
        return {"train_images": train, "test_images": test}
    train_x, train_y = datasets.shape_classification_dataset(train_count, size, channels, seed=data_seed % (2**31))
    test_x, test_y = datasets.shape_classification_dataset(test_count, size, channels, seed=(data_seed + 1) % (2**31))
    return {"train_images": train_x, "train_labels": train_y, "test_images": test_x, "test_labels": test_y}


def _train_or_load_model(entry: dict, config: dict, data: dict, out_dir: Path,
                         seed: int, deterministic: bool):
    model_dir = out_dir / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    ckpt = model_dir / f"{entry['id']}.pt"
    if entry["type"] == "denoiser":
        if ckpt.exists():
            return load_checkpoint(ckpt)
        arch = DenoiserConfig(**entry.get("arch", {}))
        tc = TrainConfig(**{**entry.get("train", {}), "seed": seed, "deterministic": deterministic})
        result = train_denoiser(tc, arch, images=data["train_images"])
        save_checkpoint(ckpt, result.model)
        write_history_jsonl(out_dir / f"history_{entry['id']}.jsonl", result.history)
        return result.model
    if ckpt.exists():
        model, _ = load_classifier(ckpt)
        return model
    arch_dict = dict(entry.get("arch", {}))
    if "widths" in arch_dict:
        arch_dict["widths"] = tuple(arch_dict["widths"])
    if arch_dict.get("cifs") is not None:
        cifs_dict = dict(arch_dict["cifs"])
        if "positions" in cifs_dict:
            cifs_dict["positions"] = tuple(cifs_dict["positions"])
        from .cifs import CifsConfig

        arch_dict["cifs"] = CifsConfig(**cifs_dict)
    spec = ClassifierSpec(**arch_dict)
    tc = TrainConfig(**{**entry.get("train", {}), "seed": seed, "deterministic": deterministic})
    result = train_classifier(
        tc, spec, data["train_images"], data["train_labels"],
        val_images=data["test_images"], val_labels=data["test_labels"],
    )
    save_classifier(ckpt, result.model, spec)
    write_history_jsonl(out_dir / f"history_{entry['id']}.jsonl", result.history)
    return result.model


def run_experiment(config_path, out_dir, seed: int | None = None,
                   deterministic: bool | None = None) -> list[ExperimentRecord]:
    """Execute a config end to end; returns all records (old and new)."""
    config = load_config(config_path) if not isinstance(config_path, dict) else config_path
    if isinstance(config_path, dict):
        validate_config(config)
    chash = config_hash(config)
    seed = config["seed"] if seed is None else seed
    deterministic = config.get("deterministic", False) if deterministic is None else deterministic
    if deterministic:
        torch.use_deterministic_algorithms(True)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.jsonl"
    existing = {r.key(): r for r in read_records(records_path)}

    data = _build_data(config, seed)
    models = {}
    needed = {ev["model"] for ev in config["evals"]}
    for entry in config["models"]:
        if entry["id"] in needed or not config["evals"]:
            models[entry["id"]] = _train_or_load_model(entry, config, data, out_dir, seed, deterministic)

    records = list(existing.values())
    for ev in config["evals"]:
        spec = ev.get("corruption") or ev.get("attack") or {"kind": "none"}
        descriptor = _descriptor(spec)
        key = (config["experiment_id"], ev["model"], descriptor, ev["metric"], seed)
        if key in existing:
            continue
        model = models[ev["model"]]
        n_images = int(ev.get("n_images", 100))
        if ev["metric"] == "avg_psnr":
            corruption = Corruption(**spec)
            rng = _salted_rng(seed, "eval", descriptor)
            patch_size = int(config["data"].get("patch_size", 32))
            patches = sample_patches(data["test_images"], patch_size, n_images, rng)
            value = eval_denoiser(model, corruption, patches, rng)
        elif ev["metric"] == "robust_accuracy":
            attack_fn = _attack_fn_from_spec(spec, seed)
            x = data["test_images"][:n_images]
            y = data["test_labels"][:n_images]
            value = robust_accuracy(model, attack_fn, x, y, filtered=bool(ev.get("filtered", False)))
        else:
            raise ConfigError(f"metric {ev['metric']!r} is not supported by run_experiment")
        record = ExperimentRecord(
            experiment_id=config["experiment_id"],
            model_id=ev["model"],
            config_hash=chash,
            attack=descriptor,
            metric=ev["metric"],
            value=float(value),
            n_samples=n_images,
            seed=seed,
            timestamp=_timestamp(deterministic),
        )
        append_record(records_path, record)
        records.append(record)
    write_summary_csv(out_dir / "summary.csv", records)
    return records


def dump_adversarial_batch(out_dir, x_adv: torch.Tensor, prefix: str = "adv") -> None:
    """Persist an adversarial batch as 8-bit PNGs plus a raw float sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = x_adv.detach().cpu().numpy()
    np.save(out_dir / f"{prefix}_raw.npy", arr)
    clipped = np.clip(arr, 0.0, 1.0)
    datasets.save_png_dataset(out_dir, prefix, clipped, names=[f"{prefix}_{i:04d}" for i in range(arr.shape[0])])
