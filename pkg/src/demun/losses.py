"""Trajectory losses: last-layer, omega-weighted intermediate, and skip-L.

All losses are sums of squared errors over every sample in the batch;
the trainer divides by the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor, as_tensor, mse
from .unrolled import Trajectory


class LossSpecError(ValueError):
    pass


def loss_last_layer(traj: Trajectory, x_star) -> Tensor:
    return mse(traj.states[-1], as_tensor(x_star))


def loss_intermediate(traj: Trajectory, x_star, omega: float) -> Tensor:
    """sum_{i=1}^T omega^(T-i) ||x^i - x*||^2."""
    if not (0.0 < omega <= 1.0):
        raise LossSpecError(f"omega must be in (0, 1], got {omega}")
    x_star = as_tensor(x_star)
    T = traj.T
    total = None
    for i, x in enumerate(traj.states, start=1):
        term = mse(x, x_star)
        if omega != 1.0:
            term = term * omega ** (T - i)
        total = term if total is None else total + term
    return total


def skip_layers(T: int, skip_L: int) -> list[int]:
    """1-based projection indices T, T - L, ..., L."""
    if skip_L < 1 or T % skip_L:
        raise LossSpecError(f"skip_L must be a positive divisor of T={T}, got {skip_L}")
    return sorted(T - j * skip_L for j in range(T // skip_L))


def loss_skip(traj: Trajectory, x_star, skip_L: int) -> Tensor:
    """sum_{j=0}^{T/L-1} ||x^(T - jL) - x*||^2."""
    x_star = as_tensor(x_star)
    total = None
    for idx in skip_layers(traj.T, skip_L):
        term = mse(traj.states[idx - 1], x_star)
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class LossSpec:
    family: str  # "last_layer" | "intermediate" | "skip"
    omega: float = 1.0
    skip_L: int = 1

    @classmethod
    def parse(cls, ident: str) -> "LossSpec":
        """Parse "ll", "iw:<omega>" or "skip:<L>"."""
        ident = str(ident).strip()
        if ident == "ll":
            return cls("last_layer")
        family, _, arg = ident.partition(":")
        if family == "iw":
            try:
                omega = float(arg)
            except ValueError:
                raise LossSpecError(f"bad intermediate loss id {ident!r}; expected iw:<omega>") from None
            if not (0.0 < omega <= 1.0):
                raise LossSpecError(f"bad intermediate loss id {ident!r}: omega must be in (0, 1]")
            return cls("intermediate", omega=omega)
        if family == "skip":
            try:
                L = int(arg)
            except ValueError:
                raise LossSpecError(f"bad skip loss id {ident!r}; expected skip:<L>") from None
            if L < 1:
                raise LossSpecError(f"bad skip loss id {ident!r}: L must be a positive integer")
            return cls("skip", skip_L=L)
        raise LossSpecError(f"unknown loss id {ident!r}; expected 'll', 'iw:<omega>' or 'skip:<L>'")

    @property
    def ident(self) -> str:
        if self.family == "last_layer":
            return "ll"
        if self.family == "intermediate":
            return f"iw:{self.omega:g}"
        return f"skip:{self.skip_L}"

    def validate(self, T: int) -> None:
        if self.family == "skip":
            skip_layers(T, self.skip_L)

    def __call__(self, traj: Trajectory, x_star) -> Tensor:
        if self.family == "last_layer":
            return loss_last_layer(traj, x_star)
        if self.family == "intermediate":
            return loss_intermediate(traj, x_star, self.omega)
        return loss_skip(traj, x_star, self.skip_L)
