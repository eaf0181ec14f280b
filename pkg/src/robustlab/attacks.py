"""Attack algorithms for classifiers and denoisers.

Classifier attacks (FGSM, l-inf PGD, C&W-margin PGD) follow the usual
signed-gradient recipe with per-step clamping to the eps box and the pixel
range.  The denoiser attack ``obs_atk`` maximizes reconstruction error
under two constraints kept exact at every iteration: the perturbation has
zero mean and l2 norm at most eps.  Projection math runs in float64 on a
shadow copy of the perturbation regardless of the model dtype.

Conventions: sign(0) = 0, so a zero gradient leaves the input unchanged;
attacks never flip a module's train/eval mode.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import project_constraint_set

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "pgd", "cw_pgd", "obsatk", "random_zm", "adaptive_cifs")

#: Attacker-side weights tried by the adaptive sweep; "inf" targets the
#: probe losses only, "inf-k" the k-th probe alone (1-based).
DEFAULT_BETA_ATK_GRID = (0.0, 0.1, 1.0, 2.0, 10.0, 100.0, "inf", "inf-1", "inf-2")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"
    eps: float = 0.0
    steps: int = 0
    step_size: float | None = None
    rand_init: bool = False
    pixel_min: float = 0.0
    pixel_max: float = 1.0
    beta_atk_grid: tuple = field(default_factory=lambda: DEFAULT_BETA_ATK_GRID)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.eps < 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if self.steps > 0 and self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")


def pgd_eval_spec(eps: float, steps: int = 20) -> AttackSpec:
    """Evaluation PGD: 20 steps of eps/10 without random init."""
    return AttackSpec(kind="pgd", eps=eps, steps=steps, step_size=eps / 10.0, rand_init=False)


def pgd_train_spec(eps: float, steps: int = 10) -> AttackSpec:
    """Training PGD: 10 steps of eps/4 with random init."""
    return AttackSpec(kind="pgd", eps=eps, steps=steps, step_size=eps / 4.0, rand_init=True)


def _final_logits(outputs):
    """Models with probes return (logits, [probe logits...]); peel that off."""
    if isinstance(outputs, tuple):
        return outputs[0]
    return outputs


def _model_outputs(model, x) -> tuple[torch.Tensor, list[torch.Tensor]]:
    out = model(x)
    if isinstance(out, tuple):
        logits, probes = out
        return logits, list(probes)
    return out, []


def _ce_loss(outputs, y_label):
    return F.cross_entropy(_final_logits(outputs), y_label)


def cw_margin_loss(logits: torch.Tensor, y_label) -> torch.Tensor:
    """Margin max_{j != y} logit_j - logit_y, per sample.

    Positive iff the sample is misclassified; maximized by the C&W-style
    PGD attack.
    """
    squeeze = logits.dim() == 1
    if squeeze:
        logits = logits[None]
        y_label = torch.as_tensor([int(y_label)], device=logits.device)
    if logits.shape[1] < 2:
        raise ValueError("margin loss needs at least two classes")
    y_label = torch.as_tensor(y_label, device=logits.device, dtype=torch.long)
    true_logit = logits.gather(1, y_label[:, None]).squeeze(1)
    masked = logits.masked_fill(
        F.one_hot(y_label, logits.shape[1]).bool(), float("-inf")
    )
    margin = masked.max(dim=1).values - true_logit
    return margin[0] if squeeze else margin


def _cw_loss(outputs, y_label):
    return cw_margin_loss(_final_logits(outputs), y_label).mean()


def fgsm(model, x, y_label, eps, pixel_min=0.0, pixel_max=1.0, loss_fn=None):
    """Single signed-gradient step, clamped to the pixel range."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if eps == 0:
        return x.detach().clone()
    loss_fn = loss_fn or _ce_loss
    x_adv = x.detach().requires_grad_(True)
    loss = loss_fn(model(x_adv), y_label)
    (grad,) = torch.autograd.grad(loss, x_adv)
    return torch.clamp(x.detach() + eps * torch.sign(grad), pixel_min, pixel_max)


def pgd_linf(
    model,
    x,
    y_label,
    eps,
    steps,
    step_size,
    rand_init=False,
    pixel_min=0.0,
    pixel_max=1.0,
    loss_fn=None,
    generator: torch.Generator | None = None,
):
    """Iterated signed-gradient ascent inside the l-inf eps box.

    With steps=1, rand_init=False, and step_size=eps this reduces exactly
    to FGSM.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    loss_fn = loss_fn or _ce_loss
    x = x.detach()
    if steps == 0 or eps == 0:
        return x.clone()

    if rand_init:
        noise = torch.empty_like(x)
        noise.uniform_(-eps, eps, generator=generator)
        delta = noise
    else:
        delta = torch.zeros_like(x)
    delta = torch.clamp(x + delta, pixel_min, pixel_max) - x

    for _ in range(steps):
        delta.requires_grad_(True)
        loss = loss_fn(model(x + delta), y_label)
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta = delta + step_size * torch.sign(grad)
            delta = torch.clamp(delta, -eps, eps)
            delta = torch.clamp(x + delta, pixel_min, pixel_max) - x
    return x + delta.detach()


def cw_pgd(model, x, y_label, eps, steps=30, step_size=None, rand_init=False,
           pixel_min=0.0, pixel_max=1.0, generator=None):
    """PGD ascent on the margin loss (30 steps of eps/10 by default)."""
    step_size = eps / 10.0 if step_size is None else step_size
    return pgd_linf(
        model, x, y_label, eps, steps, step_size, rand_init,
        pixel_min, pixel_max, loss_fn=_cw_loss, generator=generator,
    )


# ---------------------------------------------------------------------------
# Zero-mean observation attack on denoisers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObsAtkResult:
    """Attack output: final perturbation, its pre-clip version, and the budget.

    ``delta`` already includes the terminal clip of the noisy image to the
    pixel range, so y + delta is always a valid image.  ``pre_clip`` is the
    iterate before that clip and satisfies both constraints exactly.
    Tensors are float64; cast as needed.
    """

    delta: torch.Tensor
    pre_clip: torch.Tensor
    eps: float


def _project_constraints_batch(delta: torch.Tensor, eps: float) -> torch.Tensor:
    """Zero-mean then l2-ball projection on [B, m] float64 rows."""
    delta = delta - delta.mean(dim=1, keepdim=True)
    norms = delta.norm(dim=1, keepdim=True)
    scale = torch.clamp(eps / norms.clamp_min(torch.finfo(torch.float64).tiny), max=1.0)
    return delta * scale


def obs_atk(
    denoiser,
    x_clean: torch.Tensor,
    y_noisy: torch.Tensor,
    eps: float,
    steps: int = 5,
    eta: float | None = None,
    pixel_min: float = 0.0,
    pixel_max: float = 1.0,
) -> ObsAtkResult:
    """Worst-case zero-mean perturbation of a noisy observation.

    Maximizes ||f(y + delta) - x||^2 by normalized-gradient ascent
    (delta += eta * g / ||g||, eta defaults to eps/2), re-projecting onto
    the zero-mean hyperplane and then the eps ball after every step, and
    finally clipping y + delta to the pixel range.  Budgets and projections
    are per image over the flattened [C*H*W] vector.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    eta = eps / 2.0 if eta is None else eta

    batch = y_noisy.shape[0]
    flat = (batch, int(np.prod(y_noisy.shape[1:])))
    zeros = torch.zeros(y_noisy.shape, dtype=torch.float64)
    if steps == 0 or eps == 0:
        return ObsAtkResult(delta=zeros, pre_clip=zeros.clone(), eps=eps)

    model_dtype = y_noisy.dtype
    x64 = x_clean.detach().double()
    y64 = y_noisy.detach().double()
    delta = torch.zeros(flat, dtype=torch.float64)

    for _ in range(steps):
        d_model = delta.reshape(y_noisy.shape).to(model_dtype).requires_grad_(True)
        recon = denoiser(y_noisy.detach() + d_model)
        objective = ((recon - x_clean.detach()) ** 2).sum()
        (grad,) = torch.autograd.grad(objective, d_model)
        g = grad.detach().double().reshape(flat)
        g_norm = g.norm(dim=1, keepdim=True)
        step = torch.where(g_norm > 0, eta * g / g_norm.clamp_min(1e-300), torch.zeros_like(g))
        delta = _project_constraints_batch(delta + step, eps)

    pre_clip = delta.reshape(y_noisy.shape).clone()
    clipped = torch.clamp(y64 + pre_clip, pixel_min, pixel_max) - y64
    post_mean = clipped.reshape(flat).mean(dim=1).abs().max().item()
    post_norm = clipped.reshape(flat).norm(dim=1).max().item()
    logger.debug(
        "post-clip perturbation stats: max |mean|=%.3e, max norm=%.6g (budget %.6g)",
        post_mean, post_norm, eps,
    )
    return ObsAtkResult(delta=clipped, pre_clip=pre_clip, eps=eps)


def random_zero_mean(shape, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Random direction on the zero-mean sphere of radius eps.

    A Gaussian draw is projected onto the constraint set and rescaled to
    norm exactly eps; used as the strength baseline for obs_atk.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    size = int(np.prod(shape))
    if eps == 0 or size == 0:
        return np.zeros(shape)
    for _ in range(8):
        draw = rng.normal(size=size)
        projected = project_constraint_set(draw, eps)
        norm = np.linalg.norm(projected)
        if norm > 1e-12:
            return (projected * (eps / norm)).reshape(shape)
    # Only reachable if every draw was (numerically) constant, which has
    # probability zero for a continuous RNG.
    raise RuntimeError("failed to draw a non-degenerate zero-mean direction")


# ---------------------------------------------------------------------------
# Adaptive attack against probe-carrying classifiers
# ---------------------------------------------------------------------------


def adaptive_loss_weights(beta, n_probes: int) -> tuple[float, list[float]]:
    """Weights (final, per-probe) for an attacker-side beta grid entry."""
    if isinstance(beta, str):
        if beta == "inf":
            return 0.0, [1.0 / n_probes] * n_probes
        if beta.startswith("inf-"):
            idx = int(beta[4:]) - 1
            if not 0 <= idx < n_probes:
                raise ValueError(f"probe index out of range in {beta!r} ({n_probes} probes)")
            return 0.0, [1.0 if j == idx else 0.0 for j in range(n_probes)]
        raise ValueError(f"unrecognized beta entry {beta!r}")
    beta = float(beta)
    if math.isinf(beta):
        return 0.0, [1.0 / n_probes] * n_probes
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    return 1.0 / (1.0 + beta), [beta / ((1.0 + beta) * n_probes)] * n_probes


def _make_adaptive_loss(beta, n_probes):
    def loss_fn(outputs, y_label):
        logits, probes = outputs if isinstance(outputs, tuple) else (outputs, [])
        probes = list(probes)
        if not probes:
            return F.cross_entropy(logits, y_label)
        w_final, w_probes = adaptive_loss_weights(beta, len(probes))
        loss = w_final * F.cross_entropy(logits, y_label)
        for w, p in zip(w_probes, probes):
            if w != 0.0:
                loss = loss + w * F.cross_entropy(p, y_label)
        return loss

    return loss_fn


def adaptive_cifs_attack(
    model,
    x,
    y_label,
    attack_kind: str = "pgd",
    beta_atk_grid=DEFAULT_BETA_ATK_GRID,
    *,
    eps: float,
    steps: int = 20,
    step_size: float | None = None,
    rand_init: bool = False,
    pixel_min: float = 0.0,
    pixel_max: float = 1.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Worst case over attacker loss weightings, per input.

    Runs the base attack once per grid entry and keeps, for every input,
    the first adversarial example that flips the final prediction (falling
    back to the last attempt if none does).  Robust accuracy under the
    returned batch is therefore the pointwise minimum over the grid.
    """
    grid = list(beta_atk_grid)
    if not grid:
        raise ValueError("beta_atk_grid must be non-empty")

    with torch.no_grad():
        _, probes = _model_outputs(model, x[:1])
    n_probes = len(probes)
    if n_probes == 0 and grid != [0.0]:
        warnings.warn("model exposes no probes; collapsing beta grid to {0}")
        grid = [0.0]
    # Drop entries naming probes the model does not have.
    grid = [
        b for b in grid
        if not (isinstance(b, str) and b.startswith("inf-") and int(b[4:]) > max(n_probes, 1))
    ]

    def run(beta):
        if attack_kind == "cw_pgd":
            def loss_fn(outputs, y):
                return _adaptive_margin(outputs, y, beta, n_probes)
        else:
            loss_fn = _make_adaptive_loss(beta, n_probes)
        if attack_kind == "fgsm":
            return fgsm(model, x, y_label, eps, pixel_min, pixel_max, loss_fn=loss_fn)
        if attack_kind in ("pgd", "cw_pgd"):
            ss = eps / 10.0 if step_size is None else step_size
            return pgd_linf(model, x, y_label, eps, steps, ss, rand_init,
                            pixel_min, pixel_max, loss_fn=loss_fn, generator=generator)
        raise ValueError(f"unsupported base attack {attack_kind!r}")

    y_label = torch.as_tensor(y_label, dtype=torch.long)
    best = None
    fooled = torch.zeros(x.shape[0], dtype=torch.bool)
    for beta in grid:
        candidate = run(beta)
        with torch.no_grad():
            preds = _final_logits(model(candidate)).argmax(dim=1)
        if best is None:
            best = candidate.clone()
        else:
            # Rows already fooled keep their example; the rest take the
            # latest attempt, so any grid entry that fools a row wins.
            best[~fooled] = candidate[~fooled]
        fooled |= preds != y_label
        if bool(fooled.all()):
            break
    return best


def _adaptive_margin(outputs, y_label, beta, n_probes):
    logits, probes = outputs if isinstance(outputs, tuple) else (outputs, [])
    probes = list(probes)
    if not probes:
        return cw_margin_loss(logits, y_label).mean()
    w_final, w_probes = adaptive_loss_weights(beta, len(probes))
    loss = w_final * cw_margin_loss(logits, y_label).mean()
    for w, p in zip(w_probes, probes):
        if w != 0.0:
            loss = loss + w * cw_margin_loss(p, y_label).mean()
    return loss
