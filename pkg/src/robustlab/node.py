"""Neural-ODE classifier blocks and flow property checkers.

The representation-mapping block integrates dz/dt = f(z, t) from 0 to a
terminal time T with the fixed-step Euler method.  In time-dependent mode
the dynamics sees the scalar time as one extra broadcast channel; the
time-invariant variant omits it, which makes the flow autonomous and gives
the shift identity z~(t) = z(t + T') exactly on a shared Euler grid.  The
steady-state penalty accumulates |f| over [T, 2T] with the same left
Riemann quadrature as the solver.

The property checkers (shift identity, curve non-intersection, the
exponential separation bound for Lipschitz dynamics, first-order
convergence) are pure functions used by tests and the CLI.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .common import NumericOverflow


@dataclass(frozen=True)
class OdeBlockConfig:
    terminal_time: float = 1.0
    step_size: float = 0.1
    time_invariant: bool = False
    steady_coeff: float = 0.1

    def __post_init__(self):
        if not 0 < self.step_size <= self.terminal_time:
            raise ValueError(
                f"need 0 < step_size <= terminal_time, got {self.step_size} / {self.terminal_time}"
            )
        _num_steps(0.0, self.terminal_time, self.step_size)

    @property
    def num_steps(self) -> int:
        return _num_steps(0.0, self.terminal_time, self.step_size)


def _num_steps(t0: float, t1: float, step: float) -> int:
    ratio = (t1 - t0) / step
    n = round(ratio)
    if n < 0 or abs(ratio - n) > 1e-9:
        raise ValueError(f"interval [{t0}, {t1}] is not an integer number of steps of {step}")
    return n


def _check_finite(z, index: int):
    if torch.is_tensor(z):
        finite = bool(torch.isfinite(z).all())
    else:
        finite = bool(np.all(np.isfinite(z)))
    if not finite:
        raise NumericOverflow(f"non-finite state at Euler step {index}")


@dataclass
class StateTrajectory:
    """Euler trajectory: times[k] and the state at each grid point.

    states[0] is the initial value and states[k+1] = states[k]
    + step * f(states[k], times[k]) exactly.
    """

    times: np.ndarray
    states: list

    @property
    def terminal(self):
        return self.states[-1]

    def state_at(self, t: float):
        idx = _num_steps(float(self.times[0]), t, float(self.times[1] - self.times[0]))
        return self.states[idx]


def euler_integrate(dynamics, z0, t0: float, t1: float, step: float) -> StateTrajectory:
    """Fixed-step explicit Euler from t0 to t1, recording every state.

    ``dynamics(z, t)`` must return dz/dt with the same shape as z; numpy
    arrays and torch tensors both work (gradients flow through tensors).
    """
    n = _num_steps(t0, t1, step)
    z = z0
    _check_finite(z, 0)
    times = t0 + step * np.arange(n + 1)
    states = [z]
    for k in range(n):
        z = z + step * dynamics(z, float(times[k]))
        _check_finite(z, k + 1)
        states.append(z)
    return StateTrajectory(times=times, states=states)


def trajectory_to_csv(trajectory: StateTrajectory, path) -> None:
    """Dump (t, state components...) rows for plotting flow figures."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        first = np.asarray(
            trajectory.states[0].detach() if torch.is_tensor(trajectory.states[0]) else trajectory.states[0]
        )
        writer.writerow(["t"] + [f"z{i}" for i in range(first.size)])
        for t, z in zip(trajectory.times, trajectory.states):
            flat = np.asarray(z.detach() if torch.is_tensor(z) else z, dtype=np.float64).ravel()
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in flat])


def _with_time_channel(z: torch.Tensor, t: float) -> torch.Tensor:
    """Append the raw scalar time as one broadcast channel/feature."""
    if z.dim() == 4:
        t_map = torch.full_like(z[:, :1], t)
        return torch.cat([z, t_map], dim=1)
    if z.dim() == 2:
        t_col = torch.full_like(z[:, :1], t)
        return torch.cat([z, t_col], dim=1)
    raise ValueError(f"expected [B, C, H, W] or [B, D] state, got shape {tuple(z.shape)}")


def make_dynamics_fn(config: OdeBlockConfig, dynamics):
    """Adapt a module to the solver signature f(z, t).

    Time-dependent blocks feed the time as an extra channel; invariant
    blocks call the module on the bare state.
    """
    if config.time_invariant:
        return lambda z, t: dynamics(z)
    return lambda z, t: dynamics(_with_time_channel(z, t))


def ode_block_forward(config: OdeBlockConfig, dynamics, z_in: torch.Tensor) -> torch.Tensor:
    """Euler solution at the terminal time, starting from z_in."""
    fn = make_dynamics_fn(config, dynamics)
    probe = fn(z_in, 0.0)
    if probe.shape != z_in.shape:
        raise ValueError(
            f"dynamics must preserve state shape, got {tuple(probe.shape)} from {tuple(z_in.shape)}"
        )
    traj = euler_integrate(fn, z_in, 0.0, config.terminal_time, config.step_size)
    return traj.terminal


def steady_state_loss(config: OdeBlockConfig, dynamics, z_in_batch: torch.Tensor) -> torch.Tensor:
    """Sum over the batch of ||integral of |f| over [T, 2T]||_2.

    Requires an autonomous (time-invariant) block.  The state is advanced
    from z_in to T and then to 2T, accumulating step * |f| elementwise at
    every left grid point of [T, 2T); each sample contributes the l2 norm
    of its accumulated vector.
    """
    if not config.time_invariant:
        raise ValueError("steady-state loss is defined for time-invariant blocks only")
    fn = make_dynamics_fn(config, dynamics)
    z = euler_integrate(fn, z_in_batch, 0.0, config.terminal_time, config.step_size).terminal
    _, acc = _continue_with_abs_accumulation(config, fn, z)
    return acc


def _continue_with_abs_accumulation(config: OdeBlockConfig, fn, z_T: torch.Tensor):
    """Advance z from T to 2T while accumulating step * |f|; return (z_2T, loss)."""
    step = config.step_size
    n = config.num_steps
    acc = torch.zeros_like(z_T)
    z = z_T
    t = config.terminal_time
    for k in range(n):
        f = fn(z, t)
        _check_finite(f, n + k)
        acc = acc + step * f.abs()
        z = z + step * f
        t += step
    per_sample = acc.reshape(acc.shape[0], -1).norm(dim=1)
    return z, per_sample.sum()


def _vec_norm(diff) -> float:
    if torch.is_tensor(diff):
        return float(diff.norm())
    return float(np.linalg.norm(diff))

def _as_solver_fn(dynamics):
    """Property checkers accept f(z, t) callables or autonomous nn.Modules."""
    if isinstance(dynamics, nn.Module):
        return lambda z, t: dynamics(z)
    return dynamics

def check_shift_property(dynamics, z0, t_shift: float, horizon: float, step: float = 0.1) -> float:
    """Max deviation between the restarted and the shifted trajectory.

    For autonomous dynamics integrated on a shared Euler grid the restart
    from z(t_shift) reproduces z(t + t_shift) exactly, so the deviation is
    zero up to floating-point noise.  t_shift and horizon must sit on the
    step grid.
    """
    shift_steps = _num_steps(0.0, t_shift, step)
    fn = _as_solver_fn(dynamics)
    with torch.no_grad():
        base = euler_integrate(fn, z0, 0.0, horizon + t_shift, step)
        restarted = euler_integrate(fn, base.states[shift_steps], 0.0, horizon, step)
        worst = 0.0
        for k, z in enumerate(restarted.states):
            diff = z - base.states[shift_steps + k]
            worst = max(worst, _vec_norm(diff))
    return worst


def check_non_intersection(dynamics, z0_a, z0_b, horizon: float, step: float = 0.1) -> float:
    """Minimum gap between two integral curves on a 10x refined grid."""
    fine = step / 10.0
    fn = _as_solver_fn(dynamics)
    with torch.no_grad():
        traj_a = euler_integrate(fn, z0_a, 0.0, horizon, fine)
        traj_b = euler_integrate(fn, z0_b, 0.0, horizon, fine)
        gaps = [_vec_norm(za - zb) for za, zb in zip(traj_a.states, traj_b.states)]
    return min(gaps)


def gronwall_bound_check(
    dynamics, lipschitz_const: float, z0_a, z0_b, horizon: float,
    step: float = 0.1, slack: float = 1e-6,
) -> bool:
    """Does ||z_a(t) - z_b(t)|| <= ||z_a(0) - z_b(0)|| * exp(C t) hold on the grid?

    The caller supplies C; for linear dynamics A z the spectral norm of A
    is a valid constant.
    """
    fn = _as_solver_fn(dynamics)
    with torch.no_grad():
        traj_a = euler_integrate(fn, z0_a, 0.0, horizon, step)
        traj_b = euler_integrate(fn, z0_b, 0.0, horizon, step)
        gap0 = _vec_norm(traj_a.states[0] - traj_b.states[0])
        for t, za, zb in zip(traj_a.times, traj_a.states, traj_b.states):
            if _vec_norm(za - zb) > gap0 * math.exp(lipschitz_const * float(t)) + slack:
                return False
    return True


# ---------------------------------------------------------------------------
# Classifier architectures: feature extractor -> representation mapping -> head
# ---------------------------------------------------------------------------


class ConvDynamics(nn.Module):
    """Two conv+GroupNorm+ReLU stages defining the block dynamics.

    GroupNorm (not BatchNorm) keeps each sample's dynamics independent of
    the rest of the mini-batch.  With ``time_dependent=True`` the first conv
    consumes one extra channel carrying the time.
    """

    def __init__(self, channels: int, time_dependent: bool, groups: int = 8):
        super().__init__()
        in_ch = channels + 1 if time_dependent else channels
        self.time_dependent = time_dependent
        self.conv1 = nn.Conv2d(in_ch, channels, 3, padding=1)
        self.gn1 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.gn2 = nn.GroupNorm(groups, channels)

    def forward(self, z):
        h = torch.relu(self.gn1(self.conv1(z)))
        return torch.relu(self.gn2(self.conv2(h)))


class OdeBlock(nn.Module):
    """Dimension-preserving representation mapping driven by an ODE."""

    def __init__(self, config: OdeBlockConfig, dynamics: nn.Module):
        super().__init__()
        self.config = config
        self.dynamics = dynamics

    def forward(self, z_in):
        return ode_block_forward(self.config, self.dynamics, z_in)

    def forward_with_steady(self, z_in):
        """(terminal state, steady-state loss) in one pass over [0, 2T]."""
        if not self.config.time_invariant:
            raise ValueError("steady-state loss requires a time-invariant block")
        fn = make_dynamics_fn(self.config, self.dynamics)
        z_T = euler_integrate(fn, z_in, 0.0, self.config.terminal_time, self.config.step_size).terminal
        _, loss = _continue_with_abs_accumulation(self.config, fn, z_T)
        return z_T, loss


class ResidualMapping(nn.Module):
    """CNN counterpart of the ODE block: one residual application of the stack."""

    def __init__(self, dynamics: nn.Module):
        super().__init__()
        self.dynamics = dynamics

    def forward(self, z):
        return z + self.dynamics(z)


class Classifier(nn.Module):
    """Conv feature extractor, a representation mapping, then pool + linear.

    ``kind`` selects the mapping: 'cnn' (residual block), 'odenet'
    (time-dependent ODE), or 'tisode' (time-invariant ODE trained with the
    steady-state penalty).
    """

    def __init__(
        self,
        kind: str = "odenet",
        in_channels: int = 1,
        width: int = 64,
        num_classes: int = 10,
        ode_config: OdeBlockConfig | None = None,
        groups: int = 8,
    ):
        super().__init__()
        if kind not in ("cnn", "odenet", "tisode"):
            raise ValueError(f"unknown classifier kind {kind!r}")
        self.kind = kind
        self.feature_extractor = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.GroupNorm(groups, width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 4, stride=2, padding=1),
            nn.GroupNorm(groups, width),
            nn.ReLU(inplace=True),
        )
        if kind == "cnn":
            self.mapping = ResidualMapping(ConvDynamics(width, time_dependent=False, groups=groups))
            self.ode_config = None
        else:
            time_invariant = kind == "tisode"
            self.ode_config = ode_config or OdeBlockConfig(time_invariant=time_invariant)
            if self.ode_config.time_invariant != time_invariant:
                raise ValueError(f"ode_config.time_invariant must be {time_invariant} for kind {kind!r}")
            self.mapping = OdeBlock(
                self.ode_config, ConvDynamics(width, time_dependent=not time_invariant, groups=groups)
            )
        self.head = nn.Linear(width, num_classes)

    def features(self, x):
        return self.feature_extractor(x)

    def classify(self, z):
        return self.head(z.mean(dim=(2, 3)))

    def forward(self, x):
        return self.classify(self.mapping(self.features(x)))

    def forward_with_steady(self, x):
        """(logits, steady-state loss); only meaningful for 'tisode'."""
        z_in = self.features(x)
        z_T, loss = self.mapping.forward_with_steady(z_in)
        return self.classify(z_T), loss


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
