"""Unrolled DeMUN, PGD, Nesterov and AMP networks with trainable projectors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dncnn import DnCNNConfig, ProjectorParams, build_projector, project
from .operators import MeasurementOperator
from .tensor import NonFiniteError, ShapeError, Tensor, concat, conv2d, mul, no_grad, stack, tsum

ALGORITHMS = ("demun", "pgd", "nesterov", "amp")


@dataclass
class MemoryWeights:
    """alpha[i] has shape (1,), beta[i] has shape (i + 1,)."""

    alpha: list[Tensor]
    beta: list[Tensor]

    @classmethod
    def init(cls, T: int) -> "MemoryWeights":
        alpha = [Tensor(np.ones(1), requires_grad=True) for _ in range(T)]
        beta = []
        for i in range(T):
            b = np.zeros(i + 1)
            b[i] = 1.0
            beta.append(Tensor(b, requires_grad=True))
        return cls(alpha, beta)


@dataclass
class UnrollPlan:
    algorithm: str
    T: int
    residual: bool = False
    projector_config: DnCNNConfig = field(default_factory=DnCNNConfig)
    mu: Optional[list[Tensor]] = None
    memory: Optional[MemoryWeights] = None
    amp_probe_eps: float = 1e-3
    amp_backprop_divergence: bool = False
    tie_weights: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if (self.mu is not None) != (self.algorithm in ("pgd", "nesterov")):
            raise ValueError("step sizes mu are required for pgd/nesterov and only for them")
        if (self.memory is not None) != (self.algorithm == "demun"):
            raise ValueError("memory weights are required for demun and only for it")

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        if self.mu is not None:
            for i, m in enumerate(self.mu):
                named[f"mu{i}"] = m
        if self.memory is not None:
            for i, (a, b) in enumerate(zip(self.memory.alpha, self.memory.beta)):
                named[f"alpha{i}"] = a
                named[f"beta{i}"] = b
        return named


def make_plan(
    algorithm: str,
    T: int,
    projector_config: DnCNNConfig,
    residual: bool = False,
    **options,
) -> UnrollPlan:
    """Plan with initial step sizes mu = 1 or memory weights at the PGD point."""
    mu = [Tensor(np.ones(1), requires_grad=True) for _ in range(T)] if algorithm in ("pgd", "nesterov") else None
    memory = MemoryWeights.init(T) if algorithm == "demun" else None
    return UnrollPlan(algorithm, T, residual, projector_config, mu=mu, memory=memory, **options)


def build_projectors(plan: UnrollPlan, seed: int) -> list[ProjectorParams]:
    if plan.tie_weights:
        shared = build_projector(plan.projector_config, [seed, 0], plan.residual)
        return [shared] * plan.T
    return [build_projector(plan.projector_config, [seed, i], plan.residual) for i in range(plan.T)]


@dataclass
class Trajectory:
    states: list[Tensor]  # x^1 .. x^T, each (B, n)
    intermediates: list[Tensor]  # x~^0 .. x~^{T-1}
    gradients: list[Tensor] = field(default_factory=list)  # A^T(y - A x^j), DeMUN only
    t: list[float] = field(default_factory=list)  # Nesterov t_1 .. t_{T+1}
    z: list[Tensor] = field(default_factory=list)  # AMP z^0 .. z^{T-1}
    divergences: list[np.ndarray] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.states)


def demun_combine(x_i: Tensor, gradient_stack: Sequence[Tensor], alpha: Tensor, beta: Tensor) -> Tensor:
    """alpha * x_i + sum_j beta[j] * gradient_stack[j], as a 1x1 convolution over stacked images."""
    if len(gradient_stack) != beta.shape[0]:
        raise ShapeError(f"memory stack has {len(gradient_stack)} entries, beta has {beta.shape[0]}")
    B, n = x_i.shape
    images = stack([x_i, *gradient_stack], axis=1).reshape(B, len(gradient_stack) + 1, n, 1)
    kernel = concat([alpha, beta]).reshape(1, len(gradient_stack) + 1, 1, 1)
    return conv2d(images, kernel).reshape(B, n)


def nesterov_t_sequence(count: int) -> list[float]:
    """t_1 .. t_count with t_1 = 1 and t_{i+1} = (1 + sqrt(1 + 4 t_i^2)) / 2."""
    t = [1.0]
    while len(t) < count:
        t.append((1.0 + math.sqrt(1.0 + 4.0 * t[-1] ** 2)) / 2.0)
    return t


def nesterov_step(x_next: Tensor, x_prev: Tensor, t_cur: float, t_next: float) -> Tensor:
    """x_n = x_next + ((t_cur - 1) / t_next) (x_next - x_prev); the coefficient is a constant."""
    return x_next + (x_next - x_prev) * ((t_cur - 1.0) / t_next)


def probe_scale(u: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample probe step eps * rms(u), rounded to a power of two."""
    rms = np.sqrt(np.mean(u * u, axis=-1))
    raw = eps * np.where(rms > 0, rms, 1.0)
    return np.exp2(np.round(np.log2(raw)))


def mc_divergence(
    fn: Callable[[np.ndarray], np.ndarray],
    u: np.ndarray,
    rng: np.random.Generator,
    eps: float = 1e-3,
    base: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Single-probe Monte-Carlo divergence of ``fn`` at each row of ``u``.

    div = sum_i (fn(u + s p) - fn(u))_i / d_i with p a Rademacher probe,
    s from ``probe_scale`` and d = (u + s p) - u the step actually taken,
    which is s p up to rounding. Dividing by d rather than s p makes the
    identity map give exactly n. ``base`` may carry a precomputed fn(u).
    """
    u = np.atleast_2d(u)
    probe = rng.choice(np.array([-1.0, 1.0]), size=u.shape)
    v = u + probe_scale(u, eps)[:, None] * probe
    f0 = fn(u) if base is None else base
    f1 = fn(v)
    return np.sum((f1 - f0) / (v - u), axis=-1)


def _as_batch(y) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(y)
    if y.data.ndim == 1:
        y = y.reshape(1, -1)
    if y.data.ndim != 2:
        raise ShapeError(f"measurements must be (m,) or (B, m), got {y.shape}")
    return y


def run_unrolled(
    plan: UnrollPlan,
    projectors: Sequence[ProjectorParams],
    y,
    op: MeasurementOperator,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    divergences: Optional[Sequence[np.ndarray]] = None,
) -> Trajectory:
    """Unroll ``plan.T`` steps from x^0 = 0 on measurements y of shape (B, m).

    ``rng`` drives the AMP divergence probes. ``divergences`` replaces the
    AMP estimates with given per-step values (used to hold them fixed).
    """
    if len(projectors) != plan.T:
        raise ShapeError(f"plan has T={plan.T} but {len(projectors)} projectors were given")
    y = _as_batch(y)
    if y.shape[1] != op.m:
        raise ShapeError(f"measurements have length {y.shape[1]}, operator m={op.m}")
    B, n = y.shape[0], op.n
    k = plan.projector_config.image_k
    if k * k != n:
        raise ShapeError(f"projector image side {k} does not match operator n={n}")
    rng = rng if rng is not None else np.random.default_rng(0)

    def P(i: int, u: Tensor, update_stats: bool = True) -> Tensor:
        return project(projectors[i], u.reshape(B, 1, k, k), training, update_stats).reshape(B, n)

    def grad_term(x: Tensor) -> Tensor:
        return op.apply_adjoint(y - op.apply(x))

    x = Tensor(np.zeros((B, n)))
    traj = Trajectory(states=[], intermediates=[])
    alg = plan.algorithm
    if alg == "nesterov":
        traj.t = nesterov_t_sequence(plan.T + 1)
        x_n = x
    if alg == "amp":
        z = y
    for i in range(plan.T):
        if alg == "pgd":
            x_tilde = x + mul(grad_term(x), plan.mu[i])
        elif alg == "nesterov":
            x_tilde = x_n + mul(grad_term(x_n), plan.mu[i])
        elif alg == "demun":
            traj.gradients.append(grad_term(x))
            x_tilde = demun_combine(x, traj.gradients, plan.memory.alpha[i], plan.memory.beta[i])
        else:
            traj.z.append(z)
            x_tilde = x + op.apply_adjoint(z)
        x_next = P(i, x_tilde)
        if not np.all(np.isfinite(x_next.data)):
            raise NonFiniteError(f"{alg} state x^{i + 1} is not finite")
        traj.intermediates.append(x_tilde)
        traj.states.append(x_next)
        if alg == "nesterov":
            x_n = nesterov_step(x_next, x, traj.t[i], traj.t[i + 1])
        elif alg == "amp" and i + 1 < plan.T:
            z = _amp_residual(plan, P, i, x_tilde, x_next, z, y, op, rng, divergences, traj)
        x = x_next
    return traj


def _amp_residual(plan, P, i, x_tilde, x_next, z, y, op, rng, divergences, traj) -> Tensor:
    """z^{i+1} = y - A x^{i+1} + z^i div / m, with div held constant unless configured otherwise."""
    B = x_tilde.shape[0]
    if divergences is not None:
        div = np.asarray(divergences[i], dtype=np.float64)
        onsager = mul(z, (div / op.m)[:, None])
    elif plan.amp_backprop_divergence:
        probe = rng.choice(np.array([-1.0, 1.0]), size=x_tilde.shape)
        step = probe_scale(x_tilde.data, plan.amp_probe_eps)[:, None] * probe
        shifted_in = x_tilde + step
        realized = shifted_in.data - x_tilde.data
        shifted = P(i, shifted_in, update_stats=False)
        div_t = tsum(mul(shifted - x_next, 1.0 / realized), axis=1).reshape(B, 1)
        div = div_t.data[:, 0].copy()
        onsager = mul(z, div_t * (1.0 / op.m))
    else:
        with no_grad():
            div = mc_divergence(
                lambda u: P(i, Tensor(u), update_stats=False).data,
                x_tilde.data,
                rng,
                plan.amp_probe_eps,
                base=x_next.data,
            )
        onsager = mul(z, (div / op.m)[:, None])
    traj.divergences.append(div)
    if not np.all(np.isfinite(div)):
        raise NonFiniteError(f"AMP divergence at step {i} is not finite")
    return y - op.apply(x_next) + onsager


@dataclass
class UnrolledNetwork:
    """A plan together with its per-step projectors."""

    plan: UnrollPlan
    projectors: list[ProjectorParams]

    @classmethod
    def build(cls, plan: UnrollPlan, seed: int) -> "UnrolledNetwork":
        return cls(plan, build_projectors(plan, seed))

    def _unique_projectors(self) -> list[tuple[str, ProjectorParams]]:
        if self.plan.tie_weights:
            return [("proj", self.projectors[0])]
        return [(f"proj{i}", p) for i, p in enumerate(self.projectors)]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for prefix, p in self._unique_projectors():
            for name, t in p.named_parameters().items():
                named[f"{prefix}.{name}"] = t
        named.update(self.plan.named_parameters())
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, p in self._unique_projectors():
            for name, arr in p.buffers().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v.data.copy() for k, v in self.named_parameters().items()}
        state.update({f"buffer/{k}": v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters().items():
            arr = np.asarray(state[f"param/{name}"], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape}, model shape {t.shape}")
            t.data = arr.copy()
        for prefix, p in self._unique_projectors():
            p.load_buffers({name: state[f"buffer/{prefix}.{name}"] for name in p.buffers()})

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def __call__(self, y, op, training=False, rng=None, divergences=None) -> Trajectory:
        return run_unrolled(self.plan, self.projectors, y, op, training, rng, divergences)
