"""Forward operators y = A'x (+ w): Gaussian and undersampled 2D-DCT."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

from .tensor import ShapeError, Tensor, linear_map, matvec, matvec_T

DCT_RATES = (0.1, 0.2, 0.3, 0.4)


class OperatorError(ValueError):
    pass


def normalize(A_raw: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide A by its maximum row l2 norm; return (A', factor)."""
    A_raw = np.asarray(A_raw, dtype=np.float64)
    factor = float(np.sqrt((A_raw * A_raw).sum(axis=1)).max()) if A_raw.size else 0.0
    if factor == 0.0:
        raise OperatorError("cannot normalize an all-zero matrix")
    if factor == 1.0:
        return A_raw.copy(), 1.0
    return A_raw / factor, factor


def dct_matrix(k: int) -> np.ndarray:
    """Orthonormal 1D DCT-II matrix C with C @ C.T == I."""
    u = np.arange(k)[:, None]
    j = np.arange(k)[None, :]
    C = np.cos(np.pi * (2 * j + 1) * u / (2 * k)) * np.sqrt(2.0 / k)
    C[0] /= np.sqrt(2.0)
    return C


def low_frequency_order(k: int) -> np.ndarray:
    """Flat indices u*k + v ordered by (u + v, u)."""
    u, v = np.divmod(np.arange(k * k), k)
    return np.lexsort((u, u + v))


def dct_index_set(k: int, m: int, seed: int) -> np.ndarray:
    """Fixed low-frequency block of round(0.1 n) indices plus seeded random extras."""
    n = k * k
    base = min(m, int(round(0.1 * n)))
    order = low_frequency_order(k)
    fixed = order[:base]
    extra = m - base
    if extra == 0:
        return fixed.copy()
    complement = np.sort(order[base:])
    draws = np.random.default_rng(seed).permutation(complement)[:extra]
    return np.concatenate([fixed, draws])


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    kind: str
    m: int
    n: int
    seed: int
    norm_factor: float
    matrix_: Optional[np.ndarray] = None  # normalized dense matrix (gaussian)
    k: Optional[int] = None
    indices: Optional[np.ndarray] = None  # dct row selection

    @cached_property
    def _C(self) -> np.ndarray:
        return dct_matrix(self.k)

    # array-level maps, x is (n,) or (B, n)
    def forward_array(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n:
            raise ShapeError(f"operator expects length {self.n}, got {x.shape}")
        if self.kind == "gaussian":
            return x @ self.matrix_.T
        k, C = self.k, self._C
        X = x.reshape(x.shape[:-1] + (k, k))
        coeffs = (C @ X @ C.T).reshape(x.shape)
        return coeffs[..., self.indices] / self.norm_factor

    def adjoint_array(self, r: np.ndarray) -> np.ndarray:
        if r.shape[-1] != self.m:
            raise ShapeError(f"adjoint expects length {self.m}, got {r.shape}")
        if self.kind == "gaussian":
            return r @ self.matrix_
        k, C = self.k, self._C
        full = np.zeros(r.shape[:-1] + (self.n,))
        full[..., self.indices] = r / self.norm_factor
        X = full.reshape(r.shape[:-1] + (k, k))
        return (C.T @ X @ C).reshape(full.shape)

    def apply(self, x: Tensor) -> Tensor:
        if self.kind == "gaussian":
            return matvec(self.matrix_, x)
        return linear_map(x, self.forward_array, self.adjoint_array, "dct")

    def apply_adjoint(self, r: Tensor) -> Tensor:
        if self.kind == "gaussian":
            return matvec_T(self.matrix_, r)
        return linear_map(r, self.adjoint_array, self.forward_array, "dct_adjoint")

    def matrix(self) -> np.ndarray:
        """Dense normalized A'. For DCT this is the explicit S F product."""
        if self.kind == "gaussian":
            return self.matrix_
        C = self._C
        return np.kron(C, C)[self.indices] / self.norm_factor

    def descriptor(self) -> dict:
        d = {"kind": self.kind, "m": self.m, "n": self.n, "seed": self.seed, "norm_factor": self.norm_factor}
        if self.kind == "dct":
            d["k"] = self.k
            d["indices"] = [int(i) for i in self.indices]
        return d

    def to_json(self) -> str:
        return json.dumps(self.descriptor(), sort_keys=True)


def make_gaussian(m: int, n: int, seed: int) -> MeasurementOperator:
    """i.i.d. N(0, 1/m) entries, normalized to unit maximum row norm."""
    if not (0 < m <= n):
        raise OperatorError(f"need 0 < m <= n, got m={m}, n={n}")
    raw = gaussian_raw(m, n, seed)
    A, factor = normalize(raw)
    return MeasurementOperator("gaussian", m, n, seed, factor, matrix_=A)


def gaussian_raw(m: int, n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((m, n)) / math.sqrt(m)


def rate_to_m(rate: float, n: int) -> int:
    return int(round(rate * n))


def make_dct(k: int, rate: float, seed: int = 0, m: Optional[int] = None) -> MeasurementOperator:
    """A = S F with F the orthonormal 2D-DCT on k x k images.

    ``rate`` must lie in (0, 1]; ``m`` overrides the rounded ``rate * n``.
    """
    n = k * k
    if m is None:
        if not (0 < rate <= 1):
            raise OperatorError(f"DCT sampling rate must be in (0, 1], got {rate}")
        m = rate_to_m(rate, n)
    if not (0 < m <= n):
        raise OperatorError(f"need 0 < m <= n, got m={m}, n={n}")
    idx = dct_index_set(k, m, seed)
    # rows of S F are rows of an orthonormal matrix, so the max row norm is 1
    return MeasurementOperator("dct", m, n, seed, 1.0, k=k, indices=idx)


def from_descriptor(d: dict) -> MeasurementOperator:
    if d["kind"] == "gaussian":
        op = make_gaussian(d["m"], d["n"], d["seed"])
        if not math.isclose(op.norm_factor, d["norm_factor"], rel_tol=1e-12):
            raise OperatorError("reconstructed Gaussian operator does not match stored norm factor")
        return op
    if d["kind"] == "dct":
        idx = np.asarray(d["indices"], dtype=np.int64)
        return MeasurementOperator("dct", d["m"], d["n"], d["seed"], d["norm_factor"], k=d["k"], indices=idx)
    raise OperatorError(f"unknown operator kind {d['kind']!r}")


def make_operator(kind: str, k: int, rate: Optional[float] = None, seed: int = 0, m: Optional[int] = None) -> MeasurementOperator:
    n = k * k
    if m is None:
        if rate is None:
            raise OperatorError("either rate or m is required")
        m = rate_to_m(rate, n)
    if kind == "gaussian":
        return make_gaussian(m, n, seed)
    if kind == "dct":
        return make_dct(k, m / n, seed, m=m)
    raise OperatorError(f"unknown operator kind {kind!r}")


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise OperatorError(f"noise sigma must be >= 0, got {self.sigma}")


def add_noise(y: np.ndarray, model: NoiseModel) -> np.ndarray:
    """y + sigma * z with z i.i.d. standard normal drawn from ``model.seed``."""
    y = np.asarray(y, dtype=np.float64)
    if model.sigma == 0:
        return y.copy()
    z = np.random.default_rng(model.seed).standard_normal(y.shape)
    return y + model.sigma * z


def input_snr(op: MeasurementOperator, images: Iterable[np.ndarray], model: NoiseModel) -> float:
    """10 log10 of the mean over images of ||A'x||^2 / (m sigma^2)."""
    if model.sigma <= 0:
        raise OperatorError("input SNR is undefined for sigma = 0")
    X = np.atleast_2d(np.asarray(list(images) if not isinstance(images, np.ndarray) else images, dtype=np.float64))
    Y = op.forward_array(X)
    ratios = (Y * Y).sum(axis=1) / (op.m * model.sigma**2)
    return float(10.0 * np.log10(ratios.mean()))
