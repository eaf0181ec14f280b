"""Loss functions and training loops for denoisers and classifiers.

Denoisers train on randomly cropped patches with fresh noise every batch:
normal training (NT) fits reconstructions of common noise, vanilla
adversarial training (vAT) fits reconstructions of attacked observations
only, and hybrid adversarial training (HAT) mixes a reconstruction term
with a clean-vs-adversarial output consistency term weighted alpha/(1+alpha).
Adversarial observations are regenerated every batch with the zero-mean
observation attack.

Classifiers train normally, with Gaussian-noise augmentation, or with
PGD adversarial training; time-invariant ODE models add the steady-state
penalty (coefficient lambda_ss), and probe-carrying models train on the
adaptive loss that averages probe cross-entropies into the objective.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import datasets
from .attacks import AttackSpec, _final_logits, obs_atk, pgd_linf
from .cifs import CifsConfig, SlimResNet
from .common import NumericOverflow, config_hash, derive_rng, derive_seed
from .denoiser import Denoiser, DenoiserConfig
from .node import Classifier, OdeBlockConfig
from .noise import psnr, sample_patches

CLASSIFIER_KINDS = ("cnn", "odenet", "tisode", "resnet", "cifs_resnet")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = ()
    lr_decay: float = 0.1
    seed: int = 0
    deterministic: bool = False
    method: str = "nt"
    # denoiser knobs
    gamma: float = 25 / 255
    hat_alpha: float = 1.0
    hat_eps_rate: float = 5 / 255
    obsatk_steps: int = 1
    obsatk_eta: float | None = None
    patch_size: int = 32
    num_patches: int = 3000
    # classifier knobs
    noise_sigmas: tuple = (50 / 255, 75 / 255, 100 / 255)
    attack_eps: float = 8 / 255
    attack_steps: int = 10
    lambda_ss: float = 0.1
    beta: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.hat_alpha < 0:
            raise ValueError(f"hat_alpha must be non-negative, got {self.hat_alpha}")
        if self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("lr and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    model: nn.Module
    history: list
    best_state: dict | None = None
    best_epoch: int = -1
    best_metric: float = -math.inf

    def best_model(self) -> nn.Module:
        """Copy of the model restored to the best validation epoch."""
        import copy

        model = copy.deepcopy(self.model)
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        model.eval()
        return model


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _per_image_sq_norm(a: torch.Tensor) -> torch.Tensor:
    return a.reshape(a.shape[0], -1).pow(2).sum(dim=1)


def nt_denoiser_loss(f, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Half the squared reconstruction error of the noisy batch."""
    return 0.5 * _per_image_sq_norm(f(y) - x).mean()


def vat_denoiser_loss(f, x: torch.Tensor, y_adv: torch.Tensor) -> torch.Tensor:
    """NT loss evaluated on adversarial observations only."""
    return 0.5 * _per_image_sq_norm(f(y_adv) - x).mean()


def hat_loss(f, x: torch.Tensor, y: torch.Tensor, y_adv: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex mix of reconstruction and clean-vs-adversarial consistency.

    0.5 * (1/(1+alpha) ||f(y) - x||^2 + alpha/(1+alpha) ||f(y) - f(y')||^2),
    per image, averaged over the batch.  alpha = 0 reduces to the NT loss
    exactly (the consistency forward is skipped).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    f_y = f(y)
    recon = _per_image_sq_norm(f_y - x).mean()
    if alpha == 0:
        return 0.5 * recon
    consistency = _per_image_sq_norm(f_y - f(y_adv)).mean()
    return 0.5 * (recon / (1.0 + alpha) + consistency * (alpha / (1.0 + alpha)))


def adaptive_loss(final_logits: torch.Tensor, probe_logits_list, label, beta: float) -> torch.Tensor:
    """Cross-entropy blend over the final head and the probe heads.

    Weights 1/(1+beta) on the final prediction and beta/((1+beta)|I|) on
    each of the |I| probes; they always sum to one.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    probes = list(probe_logits_list)
    if beta > 0 and not probes:
        raise ValueError("adaptive loss with beta > 0 requires at least one probe")
    loss = (1.0 / (1.0 + beta)) * F.cross_entropy(final_logits, label)
    if probes and beta > 0:
        w = beta / ((1.0 + beta) * len(probes))
        for p in probes:
            loss = loss + w * F.cross_entropy(p, label)
    return loss


def pgd_at_classifier_step(model, batch, attack_spec: AttackSpec, optimizer,
                           generator: torch.Generator | None = None) -> float:
    """One adversarial-training step: inner PGD, outer cross-entropy update."""
    x, y = batch
    was_training = model.training
    if attack_spec.eps > 0 and attack_spec.steps > 0:
        model.eval()  # attack forwards must not update BatchNorm statistics
        x_adv = pgd_linf(
            model, x, y, attack_spec.eps, attack_spec.steps, attack_spec.step_size,
            attack_spec.rand_init, attack_spec.pixel_min, attack_spec.pixel_max,
            generator=generator,
        )
        model.train(was_training)
    else:
        x_adv = x
    optimizer.zero_grad()
    loss = F.cross_entropy(_final_logits(model(x_adv)), y)
    if not torch.isfinite(loss):
        raise NumericOverflow("non-finite loss in adversarial training step")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Shared loop plumbing
# ---------------------------------------------------------------------------


def _seed_torch(config: TrainConfig) -> torch.Generator:
    torch.manual_seed(derive_seed(config.seed, "init"))
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    gen = torch.Generator()
    gen.manual_seed(derive_seed(config.seed, "attack"))
    return gen


def _make_optimizer(config: TrainConfig, params):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(
        params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay
    )


def _check_loss(loss: torch.Tensor, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise NumericOverflow(f"non-finite training loss at epoch {epoch}, step {step}")


# ---------------------------------------------------------------------------
# Denoiser training
# ---------------------------------------------------------------------------


def train_denoiser(
    config: TrainConfig,
    model_config: DenoiserConfig | None = None,
    images: np.ndarray | None = None,
    val_images: np.ndarray | None = None,
) -> TrainResult:
    """Train a denoiser with NT, vAT, or HAT on random patches.

    Noise is resampled every batch at per-image levels drawn from
    [0, gamma]; vAT/HAT additionally rebuild the adversarial observation
    each batch via the zero-mean attack with budget hat_eps_rate * sqrt(m).
    Returns the final model, per-epoch history, and the best-PSNR weights.
    """
    if config.method not in ("nt", "vat", "hat"):
        raise ValueError(f"unknown denoiser training method {config.method!r}")
    _seed_torch(config)  # weight init; data/noise randomness comes from numpy streams
    model_config = model_config or DenoiserConfig()
    model = Denoiser(model_config)
    if config.epochs == 0:
        return TrainResult(model=model, history=[])

    data_rng = derive_rng(config.seed, "data")
    noise_rng = derive_rng(config.seed, "noise")
    eval_rng = derive_rng(config.seed, "eval")

    if images is None:
        images = datasets.denoising_images(
            count=max(32, config.num_patches // 12), size=2 * config.patch_size,
            channels=model_config.in_channels, seed=derive_seed(config.seed, "data") % (2**31),
        )
    patches = sample_patches(images, config.patch_size, config.num_patches, data_rng)
    patches_t = torch.as_tensor(patches, dtype=torch.float32)
    if val_images is None:
        val_src = datasets.denoising_images(
            count=16, size=2 * config.patch_size, channels=model_config.in_channels,
            seed=derive_seed(config.seed, "eval") % (2**31),
        )
        val_images = sample_patches(val_src, config.patch_size, 32, eval_rng)
    val_t = torch.as_tensor(val_images, dtype=torch.float32)
    val_noise = torch.as_tensor(
        eval_rng.normal(0.0, config.gamma, size=val_t.shape), dtype=torch.float32
    )

    m = int(np.prod(patches_t.shape[1:]))
    eps = config.hat_eps_rate * math.sqrt(m)
    optimizer = _make_optimizer(config, model.parameters())
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(config.milestones), gamma=config.lr_decay
    )

    history = []
    result = TrainResult(model=model, history=history)
    n = patches_t.shape[0]
    for epoch in range(config.epochs):
        t_start = time.time()
        model.train()
        order = data_rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            x = patches_t[idx]
            sigmas = noise_rng.uniform(0.0, config.gamma, size=len(idx))
            v = noise_rng.normal(size=x.shape) * sigmas[:, None, None, None]
            y = x + torch.as_tensor(v, dtype=torch.float32)

            if config.method == "nt":
                loss = nt_denoiser_loss(model, x, y)
            else:
                model.eval()
                atk = obs_atk(
                    model, x, y, eps, steps=config.obsatk_steps, eta=config.obsatk_eta
                )
                model.train()
                y_adv = y + atk.delta.to(torch.float32)
                if config.method == "vat":
                    loss = vat_denoiser_loss(model, x, y_adv)
                else:
                    loss = hat_loss(model, x, y, y_adv, config.hat_alpha)
            _check_loss(loss, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            batches += 1

        model.eval()
        with torch.no_grad():
            recon = model(val_t + val_noise)
        val_psnr = float(
            np.mean([psnr(recon[i].numpy(), val_t[i].numpy()) for i in range(val_t.shape[0])])
        )
        entry = {
            "epoch": epoch,
            "loss": epoch_loss / max(batches, 1),
            "val_psnr": val_psnr,
            "lr": float(optimizer.param_groups[0]["lr"]),
            "wall_time": time.time() - t_start,
        }
        history.append(entry)
        if val_psnr > result.best_metric:
            result.best_metric = val_psnr
            result.best_epoch = epoch
            result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        scheduler.step()
    model.eval()
    return result


# ---------------------------------------------------------------------------
# Classifier training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierSpec:
    """Architecture selector for the classifier zoo."""

    kind: str = "odenet"
    in_channels: int = 1
    num_classes: int = 10
    width: int = 64
    widths: tuple = (32, 64, 128, 256)
    ode_terminal_time: float = 1.0
    ode_step_size: float = 0.1
    cifs: CifsConfig | None = None

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}; expected one of {CLASSIFIER_KINDS}")


def make_classifier(spec: ClassifierSpec) -> nn.Module:
    if spec.kind in ("cnn", "odenet", "tisode"):
        ode_config = None
        if spec.kind in ("odenet", "tisode"):
            ode_config = OdeBlockConfig(
                terminal_time=spec.ode_terminal_time,
                step_size=spec.ode_step_size,
                time_invariant=spec.kind == "tisode",
            )
        return Classifier(
            kind=spec.kind, in_channels=spec.in_channels, width=spec.width,
            num_classes=spec.num_classes, ode_config=ode_config,
        )
    cifs = spec.cifs
    if spec.kind == "cifs_resnet" and cifs is None:
        cifs = CifsConfig()
    if spec.kind == "resnet":
        cifs = None
    return SlimResNet(
        widths=spec.widths, in_channels=spec.in_channels,
        num_classes=spec.num_classes, cifs=cifs,
    )


def save_classifier(path, model: nn.Module, spec: ClassifierSpec) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(spec),
        "config_hash": config_hash(spec),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_classifier(path) -> tuple[nn.Module, ClassifierSpec]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    raw = dict(payload["spec"])
    if raw.get("cifs") is not None:
        raw["cifs"] = CifsConfig(**{**raw["cifs"], "positions": tuple(raw["cifs"]["positions"])})
    raw["widths"] = tuple(raw["widths"])
    spec = ClassifierSpec(**raw)
    if config_hash(spec) != payload["config_hash"]:
        raise ValueError("checkpoint config hash mismatch; file corrupted or spec schema drifted")
    model = make_classifier(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, spec


def _classifier_loss(model, spec: ClassifierSpec, config: TrainConfig, x, y):
    """Forward in training mode and assemble the objective for one batch."""
    if spec.kind == "tisode":
        logits, steady = model.forward_with_steady(x)
        ce = F.cross_entropy(logits, y)
        return ce + config.lambda_ss * steady, {"ce": float(ce.detach()), "steady": float(steady.detach())}
    if spec.kind == "cifs_resnet":
        logits, probes = model(x, true_label=y)
        beta = config.beta if config.beta is not None else float(max(len(probes), 1))
        loss = adaptive_loss(logits, probes, y, beta)
        return loss, {"ce": float(loss.detach())}
    logits = _final_logits(model(x))
    ce = F.cross_entropy(logits, y)
    return ce, {"ce": float(ce.detach())}


def _adaptive_attack_loss(spec: ClassifierSpec, config: TrainConfig):
    """Inner-maximization objective for adversarial training."""
    if spec.kind != "cifs_resnet":
        return None  # plain cross-entropy on final logits

    def loss_fn(outputs, y):
        logits, probes = outputs if isinstance(outputs, tuple) else (outputs, [])
        beta = config.beta if config.beta is not None else float(max(len(list(probes)), 1))
        return adaptive_loss(logits, list(probes), y, beta)

    return loss_fn


def train_classifier(
    config: TrainConfig,
    spec: ClassifierSpec,
    images: np.ndarray,
    labels: np.ndarray,
    val_images: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
) -> TrainResult:
    """Train a classifier with NT, Gaussian augmentation, or PGD-AT.

    'gauss' doubles every batch with copies perturbed at a level drawn from
    config.noise_sigmas; 'at' maximizes the training objective inside the
    eps ball before each update.  Time-invariant ODE models add
    lambda_ss * steady-state loss; probe-carrying models train with the
    adaptive loss (beta defaults to the probe count).
    """
    if config.method not in ("nt", "gauss", "at"):
        raise ValueError(f"unknown classifier training method {config.method!r}")
    gen = _seed_torch(config)
    model = make_classifier(spec)
    if config.epochs == 0:
        return TrainResult(model=model, history=[])

    data_rng = derive_rng(config.seed, "data")
    noise_rng = derive_rng(config.seed, "noise")
    x_all = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y_all = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    val_x = torch.as_tensor(np.asarray(val_images), dtype=torch.float32) if val_images is not None else None
    val_y = torch.as_tensor(np.asarray(val_labels), dtype=torch.long) if val_labels is not None else None

    optimizer = _make_optimizer(config, model.parameters())
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(config.milestones), gamma=config.lr_decay
    )
    attack_spec = AttackSpec(
        kind="pgd", eps=config.attack_eps, steps=config.attack_steps,
        step_size=config.attack_eps / 4.0, rand_init=True,
    )
    attack_loss = _adaptive_attack_loss(spec, config)

    history = []
    result = TrainResult(model=model, history=history)
    n = x_all.shape[0]
    for epoch in range(config.epochs):
        t_start = time.time()
        model.train()
        order = data_rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        extras_acc: dict = {}
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            x, y = x_all[idx], y_all[idx]

            if config.method == "gauss":
                sig = noise_rng.choice(config.noise_sigmas, size=len(idx))
                noisy = x + torch.as_tensor(
                    noise_rng.normal(size=x.shape) * sig[:, None, None, None], dtype=torch.float32
                )
                x = torch.cat([x, noisy])
                y = torch.cat([y, y])
            elif config.method == "at" and attack_spec.eps > 0 and attack_spec.steps > 0:
                model.eval()  # freeze BatchNorm statistics during the inner max
                x = pgd_linf(
                    model, x, y, attack_spec.eps, attack_spec.steps, attack_spec.step_size,
                    attack_spec.rand_init, loss_fn=attack_loss, generator=gen,
                )
                model.train()

            loss, extras = _classifier_loss(model, spec, config, x, y)
            _check_loss(loss, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            batches += 1
            for k, v in extras.items():
                extras_acc[k] = extras_acc.get(k, 0.0) + v

        entry = {
            "epoch": epoch,
            "loss": epoch_loss / max(batches, 1),
            "lr": float(optimizer.param_groups[0]["lr"]),
            "wall_time": time.time() - t_start,
        }
        for k, v in extras_acc.items():
            entry[f"mean_{k}"] = v / max(batches, 1)
        if val_x is not None:
            entry["val_accuracy"] = evaluate_accuracy(model, val_x, val_y)
            if entry["val_accuracy"] > result.best_metric:
                result.best_metric = entry["val_accuracy"]
                result.best_epoch = epoch
                result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        history.append(entry)
        scheduler.step()
    model.eval()
    return result


def evaluate_accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = _final_logits(model(x[start : start + batch_size]))
            correct += int((logits.argmax(dim=1) == y[start : start + batch_size]).sum())
    model.train(was_training)
    return correct / x.shape[0]


def write_history_jsonl(path, history: list) -> None:
    """One JSON record per epoch."""
    import json

    with open(path, "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry) + "\n")


# re-exported for config plumbing
__all__ = [
    "TrainConfig", "TrainResult", "ClassifierSpec",
    "nt_denoiser_loss", "vat_denoiser_loss", "hat_loss", "adaptive_loss",
    "pgd_at_classifier_step", "train_denoiser", "train_classifier",
    "make_classifier", "save_classifier", "load_classifier",
    "evaluate_accuracy", "write_history_jsonl",
]
