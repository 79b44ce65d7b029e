"""Training loop, checkpoint selection, PSNR evaluation and classical baselines."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, DatasetError
from .dncnn import DnCNNConfig
from .losses import LossSpec
from .operators import MeasurementOperator, NoiseModel, add_noise, from_descriptor, make_operator
from .optim import Adam
from .tensor import NonFiniteError, Tensor, backward
from .unrolled import UnrolledNetwork, make_plan

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    algorithm: str = "demun"
    T: int = 5
    residual: bool = False
    depth_L: int = 5
    channels: int = 64
    kernel: int = 3
    tie_weights: bool = False
    amp_probe_eps: float = 1e-3
    amp_backprop_divergence: bool = False
    loss: str = "iw:1.0"
    operator: str = "gaussian"
    rate: Optional[float] = 0.1
    m: Optional[int] = None
    operator_seed: int = 0
    sigma: float = 0.0
    noise_seed: int = 0
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.loss_spec().validate(self.T)

    def loss_spec(self) -> LossSpec:
        return LossSpec.parse(self.loss)

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.sigma, self.noise_seed)

    def build_operator(self, k: int) -> MeasurementOperator:
        return make_operator(self.operator, k, self.rate, self.operator_seed, self.m)

    def build_network(self, k: int) -> UnrolledNetwork:
        proj = DnCNNConfig(self.depth_L, self.channels, self.kernel, k)
        plan = make_plan(
            self.algorithm,
            self.T,
            proj,
            residual=self.residual,
            amp_probe_eps=self.amp_probe_eps,
            amp_backprop_divergence=self.amp_backprop_divergence,
            tie_weights=self.tie_weights,
        )
        return UnrolledNetwork.build(plan, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{key: v for key, v in d.items() if key in known})


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    operator: dict
    config: dict
    k: int
    best_epoch: int
    val_history: list[float] = field(default_factory=list)
    train_history: list[float] = field(default_factory=list)

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "operator": self.operator,
            "config": self.config,
            "k": self.k,
            "best_epoch": self.best_epoch,
            "val_history": self.val_history,
            "train_history": self.train_history,
        }
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **self.state)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            state = {key: z[key].astype(np.float64) for key in z.files if key != "__meta__"}
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        return cls(
            state,
            meta["operator"],
            meta["config"],
            meta["k"],
            meta["best_epoch"],
            meta["val_history"],
            meta["train_history"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def network(self) -> UnrolledNetwork:
        net = self.train_config().build_network(self.k)
        net.load_state_dict(self.state)
        return net

    def build_operator(self) -> MeasurementOperator:
        return from_descriptor(self.operator)


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; ``checkpoint`` holds the last good parameters."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def measurements(op: MeasurementOperator, tiles: np.ndarray, noise: NoiseModel) -> np.ndarray:
    """Fixed y = A'x + w for every tile; one noise draw for the whole array."""
    return add_noise(op.forward_array(tiles), noise)


def psnr(x_hat, x_star, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical inputs."""
    x_hat = np.asarray(x_hat.data if isinstance(x_hat, Tensor) else x_hat, dtype=np.float64)
    x_star = np.asarray(x_star.data if isinstance(x_star, Tensor) else x_star, dtype=np.float64)
    if x_hat.shape != x_star.shape:
        raise ValueError(f"psnr: shapes {x_hat.shape} and {x_star.shape} differ")
    err = float(np.mean((x_hat - x_star) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def capped(value: float) -> float:
    return min(value, PSNR_CAP)


def baseline_reconstructions(op: MeasurementOperator, y, reg: float = 1e-10) -> dict[str, np.ndarray]:
    """Adjoint A'^T y and minimum-norm least squares A'^T (A'A'^T)^-1 y."""
    y = np.asarray(y, dtype=np.float64)
    A = op.matrix()
    gram = A @ A.T
    if np.linalg.matrix_rank(gram) < op.m:
        gram = gram + reg * np.eye(op.m)
    coef = np.linalg.solve(gram, y.T).T
    return {"adjoint": op.adjoint_array(y), "min_norm_ls": coef @ A}


def _snapshot(net: UnrolledNetwork) -> dict[str, np.ndarray]:
    return net.state_dict()


def _clip(params, max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale


def _eval_rng(config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, 2])


def run_batches(net, op, Y, batch_size, rng):
    """Inference-mode trajectories over Y in order, yielding (start, Trajectory)."""
    for start in range(0, len(Y), batch_size):
        yield start, net(Y[start : start + batch_size], op, training=False, rng=rng)


def validation_mse(net, op, X, Y, batch_size, rng) -> float:
    total = 0.0
    for start, traj in run_batches(net, op, Y, batch_size, rng):
        diff = traj.states[-1].data - X[start : start + batch_size]
        total += float((diff * diff).sum())
    return total / X.size


def train(config: TrainConfig, dataset: Dataset, op: Optional[MeasurementOperator] = None) -> Checkpoint:
    """ADAM training; returns the parameters of the lowest-validation-loss epoch."""
    if "train" not in dataset.splits:
        raise DatasetError("dataset has no splits; call data.split first")
    k = dataset.k
    op = op if op is not None else config.build_operator(k)
    Y_all = measurements(op, dataset.tiles, config.noise_model())
    train_idx = np.asarray(dataset.split_range("train"))
    val_idx = np.asarray(dataset.split_range("val")) if "val" in dataset.splits else np.array([], dtype=int)
    if len(train_idx) == 0:
        raise DatasetError("training split is empty")
    X, Y = dataset.tiles, Y_all
    loss_spec = config.loss_spec()
    net = config.build_network(k)
    params = net.parameters()
    opt = Adam(params, lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 0])
    amp_rng = np.random.default_rng([config.seed, 1])
    bs = min(config.batch_size, len(train_idx))
    n_batches = len(train_idx) // bs

    def checkpoint(state, best_epoch, val_hist, train_hist) -> Checkpoint:
        return Checkpoint(state, op.descriptor(), config.to_dict(), k, best_epoch, list(val_hist), list(train_hist))

    best_state, best_epoch, best_val = _snapshot(net), 0, math.inf
    val_hist: list[float] = []
    train_hist: list[float] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(train_idx)
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * bs : (b + 1) * bs]
            opt.zero_grad()
            try:
                traj = net(Y[idx], op, training=True, rng=amp_rng)
                loss = loss_spec(traj, X[idx]) * (1.0 / len(idx))
                backward(loss)
            except NonFiniteError as exc:
                last = checkpoint(best_state, best_epoch, val_hist, train_hist)
                raise TrainingDivergedError(f"epoch {epoch} batch {b}: {exc}", last) from exc
            if config.clip_norm is not None:
                _clip(params, config.clip_norm)
            opt.step()
            epoch_loss += loss.item()
        train_hist.append(epoch_loss / n_batches)
        if len(val_idx):
            val = validation_mse(net, op, X[val_idx], Y[val_idx], config.batch_size, _eval_rng(config))
            val_hist.append(val)
            if val < best_val:
                best_val, best_epoch, best_state = val, epoch, _snapshot(net)
        else:
            best_epoch, best_state = epoch, _snapshot(net)
        logger.info("epoch %d train %.6g val %s", epoch, train_hist[-1], f"{val_hist[-1]:.6g}" if val_hist else "-")
    return checkpoint(best_state, best_epoch, val_hist, train_hist)


@dataclass
class MetricsReport:
    mean_psnr: float
    curve: list[float]  # mean capped PSNR after projection 1..T
    per_image: list[float]  # capped PSNR of x^T per image
    per_image_curve: np.ndarray  # (N, T)
    images: list[tuple[str, int]]
    wall_clock: float
    config: dict

    def write_report_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "source", "tile", "psnr"])
            for i, ((src, tile), value) in enumerate(zip(self.images, self.per_image)):
                w.writerow([i, src, tile, repr(value)])

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "psnr"])
            for step, value in enumerate(self.curve, start=1):
                w.writerow([step, repr(value)])


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    split: str = "test",
    batch_size: Optional[int] = None,
) -> MetricsReport:
    """Inference-mode PSNR after every projection, averaged over ``split``."""
    started = time.perf_counter()
    if checkpoint.k != dataset.k:
        raise DatasetError(f"checkpoint resolution {checkpoint.k} does not match dataset resolution {dataset.k}")
    idx = np.asarray(dataset.split_range(split))
    if len(idx) == 0:
        raise DatasetError(f"split {split!r} is empty")
    config = checkpoint.train_config()
    op = checkpoint.build_operator()
    net = checkpoint.network()
    X = dataset.tiles
    Y = measurements(op, X, config.noise_model())[idx]
    X = X[idx]
    bs = batch_size or config.batch_size
    per_step = np.empty((len(idx), config.T))
    for start, traj in run_batches(net, op, Y, bs, _eval_rng(config)):
        for t, state in enumerate(traj.states):
            for j, row in enumerate(state.data):
                per_step[start + j, t] = capped(psnr(row, X[start + j]))
    curve = [float(v) for v in per_step.mean(axis=0)]
    per_image = [float(v) for v in per_step[:, -1]]
    return MetricsReport(
        mean_psnr=curve[-1],
        curve=curve,
        per_image=per_image,
        per_image_curve=per_step,
        images=[dataset.manifest[i] for i in idx],
        wall_clock=time.perf_counter() - started,
        config=checkpoint.config,
    )


def baseline_psnr(op: MeasurementOperator, dataset: Dataset, split: str, noise: NoiseModel) -> dict[str, float]:
    """Mean capped PSNR of the adjoint and min-norm baselines on ``split``."""
    idx = np.asarray(dataset.split_range(split))
    Y = measurements(op, dataset.tiles, noise)[idx]
    X = dataset.tiles[idx]
    recs = baseline_reconstructions(op, Y)
    return {name: float(np.mean([capped(psnr(r, x)) for r, x in zip(rec, X)])) for name, rec in recs.items()}


def save_run(run_dir, checkpoint: Checkpoint, report: MetricsReport) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint.save(run_dir / "checkpoint.npz")
    report.write_report_csv(run_dir / "report.csv")
    report.write_curve_csv(run_dir / "curve.csv")
    summary = {
        "mean_psnr": report.mean_psnr,
        "curve": report.curve,
        "best_epoch": checkpoint.best_epoch,
        "val_history": checkpoint.val_history,
        "train_history": checkpoint.train_history,
        "wall_clock": report.wall_clock,
        "config": report.config,
        "operator": {k: v for k, v in checkpoint.operator.items() if k != "indices"},
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return run_dir
