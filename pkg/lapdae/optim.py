"""
Adam, the step learning-rate schedule and the LapDAE training loop

Each training sample is corrupted once per entry of the corruption set C; the
reconstructions of those corrupted versions form the sub-mini-batch whose
summed reconstruction losses drive one Adam step per mini-batch.
"""

import concurrent.futures
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from lapdae.data import BatchIterator, iterate
from lapdae.errors import ConfigError, DimensionError, NonFiniteLossError, NumericError
from lapdae.model import ModelParams, autoencode
from lapdae.pyramid import CorruptionSpec, lap_corrupt, spatial_corrupt
from lapdae.tensor_core import GradTape, Tensor, add, mse_loss

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LAPLACIAN = "laplacian"
SPATIAL = "spatial"
CLEAN = "none"

# mode -> (training corruption, evaluation corruption)
MODES = {
    "lapdae": (LAPLACIAN, LAPLACIAN),
    "dae_spatial": (SPATIAL, SPATIAL),
    "dae_on_lap_noise": (SPATIAL, LAPLACIAN),
    "lapdae_on_spatial_noise": (LAPLACIAN, SPATIAL),
}

LOSS_LOG_COLUMNS = ["iter", "epoch", "mode", "loss", "lr", "level"]
HELD_OUT_COLUMNS = ["epoch", "mode", "clean_mse", "corrupted_mse", "lr"]
HELD_OUT_SEED_OFFSET = 7919


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 20
    batch_size: int = 128
    epochs: int = 30
    corruptions: Tuple[CorruptionSpec, ...] = (CorruptionSpec(),)
    pyramid_levels: int = 5
    mode: str = "lapdae"
    seed: int = 0
    flip: bool = False
    workers: int = 1
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def validate(self) -> "TrainConfig":
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.corruptions:
            raise ConfigError("The corruption set C needs at least one entry")
        if self.mode not in MODES:
            raise ConfigError(f"Unknown mode '{self.mode}' (valid: {', '.join(MODES)})")
        if self.epochs < 0 or self.lr_decay_every_epochs < 1 or self.pyramid_levels < 1 or self.workers < 1:
            raise ConfigError("epochs >= 0, lr_decay_every_epochs >= 1, pyramid_levels >= 1, workers >= 1 required")
        return self

    @property
    def train_corruption(self) -> str:
        return MODES[self.mode][0]

    @property
    def eval_corruption(self) -> str:
        return MODES[self.mode][1]


@dataclass
class AdamState:
    """First/second moment estimates per parameter name and the step counter"""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def fresh(cls, params: Mapping, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )

    def copy(self) -> "AdamState":
        return AdamState({name: m.copy() for name, m in self.m.items()}, {name: v.copy() for name, v in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: Union[ModelParams, Mapping[str, Tensor]], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float):
    """
    Bias-corrected Adam update applied in place

    Args:
        params: Named learnable tensors
        grads: Gradient per parameter name; missing names count as zero gradient
        state: Moment estimates, updated in place
        lr: Step size

    Raises:
        NumericError: A gradient holds NaN/Inf; no parameter is touched
    """
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NumericError(f"Non-finite gradient for parameter '{name}'; step aborted")
        if grad.shape != params[name].shape:
            raise DimensionError(f"Gradient for '{name}' has shape {grad.shape}, parameter has {params[name].shape}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        tensor.data -= update.astype(tensor.dtype)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """base_lr * decay ** floor(epoch / every)"""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


def derive_seed(*parts: int) -> int:
    """Order-independent per-sample seed from (run seed, epoch, sample index, corruption index)"""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def corrupt_sample(image: np.ndarray, kind: str, spec: CorruptionSpec, levels: int) -> Tuple[np.ndarray, int]:
    """Corrupt one image; the level is -1 for spatial noise and the image itself when kind is 'none'"""
    if kind == LAPLACIAN:
        return lap_corrupt(image, spec, levels)
    if kind == SPATIAL:
        return spatial_corrupt(image, spec.sigma, spec.seed), -1
    if kind == CLEAN:
        return image, -1
    raise ConfigError(f"Unknown corruption '{kind}' (valid: {LAPLACIAN}, {SPATIAL}, {CLEAN})")


def corrupt_batch(images: np.ndarray, indices: Sequence[int], corruptions: Sequence[CorruptionSpec],
                  kind: str, levels: int, seed: int, epoch: int,
                  executor: Optional[concurrent.futures.Executor] = None) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Build the sub-mini-batch: one corrupted copy of the batch per corruption in C

    Args:
        images: Clean batch (B, C, H, W)
        indices: Dataset index of each sample (seeds are derived from it)
        corruptions: Corruption set C
        kind: laplacian, spatial or none
        levels: Pyramid depth
        seed: Run seed
        epoch: Epoch number
        executor: Optional pool to corrupt samples concurrently

    Returns:
        (list of |C| corrupted batches, realized levels with shape (|C|, B))
    """
    jobs = [
        (c_index, row, spec.with_seed(derive_seed(seed, epoch, index, c_index)))
        for c_index, spec in enumerate(corruptions)
        for row, index in enumerate(indices)
    ]

    def _run(job):
        c_index, row, spec = job
        return corrupt_sample(images[row], kind, spec, levels)

    results = list(executor.map(_run, jobs)) if executor is not None else [_run(job) for job in jobs]
    batch_size = len(indices)
    corrupted = []
    realized = np.empty((len(corruptions), batch_size), dtype=np.int64)
    for c_index in range(len(corruptions)):
        chunk = results[c_index * batch_size:(c_index + 1) * batch_size]
        corrupted.append(np.stack([image for image, _ in chunk]).astype(np.float32))
        realized[c_index] = [level for _, level in chunk]
    return corrupted, realized


def sub_batch_loss(params: ModelParams, corrupted: Sequence[np.ndarray], clean: np.ndarray) -> Tensor:
    """Sum over the corruption set of the mean squared reconstruction error"""
    loss = None
    for x_tilde in corrupted:
        term = mse_loss(autoencode(params, x_tilde), clean)
        loss = term if loss is None else add(loss, term)
    return loss


def named_gradients(params: ModelParams, grads: Mapping[Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: grads[tensor] for name, tensor in params.items() if tensor in grads}


def format_levels(indices: Sequence[int], levels: np.ndarray) -> str:
    """
    Realized corruption level of every sample in one step as 'index:level' pairs

    With several corruptions per sample the levels are comma-joined in corruption order,
    e.g. '17:2 4:0,3'. Spatial noise has no level and logs as 'spatial'.
    """
    if (levels < 0).all():
        return SPATIAL
    return " ".join(f"{int(index)}:" + ",".join(str(int(level)) for level in levels[:, row])
                    for row, index in enumerate(indices))


def held_out_mse(params: Optional[ModelParams], images: np.ndarray, kind: str, spec: CorruptionSpec, levels: int,
                 seed: int, batch_size: int = 256,
                 forward: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """
    Mean squared error between reconstructions of corrupted inputs and the clean images

    Corruption seeds depend only on (seed, sample index), so the corrupted set is fixed
    across calls. ``forward`` replaces the autoencoder (e.g. an identity oracle).
    """
    images = np.asarray(images, dtype=np.float32)
    if forward is None:
        def forward(batch):
            return autoencode(params, batch).data

    total, count = 0.0, 0
    for start in range(0, images.shape[0], batch_size):
        clean = images[start:start + batch_size]
        indices = np.arange(start, start + clean.shape[0])
        corrupted, _ = corrupt_batch(clean, indices, (spec,), kind, levels, seed, HELD_OUT_SEED_OFFSET)
        z = np.asarray(forward(corrupted[0]), dtype=np.float64)
        total += float(np.sum((z - clean.astype(np.float64)) ** 2))
        count += clean.size
    return total / max(count, 1)


class LossLogWriter:
    """Single writer thread appending loss-log rows to a CSV file"""

    def __init__(self, path: Union[str, Path], columns: Sequence[str] = tuple(LOSS_LOG_COLUMNS)):
        self.path = Path(path)
        self.columns = list(columns)
        self.queue: "queue.Queue" = queue.Queue()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(columns=self.columns).to_csv(self.path, index=False)
        self.thread = threading.Thread(target=self._drain, daemon=True)
        self.thread.start()

    def _drain(self):
        while True:
            row = self.queue.get()
            if row is None:
                break
            pd.DataFrame([row], columns=self.columns).to_csv(self.path, mode="a", header=False, index=False)
            self.queue.task_done()

    def put(self, row: Dict):
        self.queue.put(row)

    def close(self):
        self.queue.put(None)
        self.thread.join()


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    loss_log: pd.DataFrame
    held_out: pd.DataFrame


def train(params: ModelParams, images: np.ndarray, cfg: TrainConfig,
          held_out: Optional[np.ndarray] = None,
          log_path: Optional[Union[str, Path]] = None,
          state: Optional[AdamState] = None,
          on_epoch_end: Optional[Callable[[int, ModelParams, AdamState], None]] = None,
          progress_callback: Optional[Callable[[str], None]] = None) -> TrainResult:
    """
    Optimise the encoder/decoder on unlabeled images

    Args:
        params: Parameters, updated in place
        images: Clean training images (N, C, H, W); labels never reach this function
        cfg: Training configuration
        held_out: Optional fixed images scored after every epoch (clean and corrupted MSE)
        log_path: Optional CSV path for the per-iteration loss log
        state: Adam state to resume from
        on_epoch_end: Hook called as (epochs_done, params, state), e.g. for checkpoints
        progress_callback: Optional callable receiving one status line per epoch

    Returns:
        TrainResult with the loss log and held-out curve as DataFrames

    Raises:
        NonFiniteLossError: Loss or gradients became non-finite; carries the last
            parameters that completed an epoch, their epoch count and the matching Adam state
    """
    cfg.validate()
    images = np.asarray(images, dtype=np.float32)
    if images.shape[0] == 0:
        raise ConfigError("Training set is empty")
    state = state or AdamState.fresh(params, cfg.beta1, cfg.beta2, cfg.eps)
    iterator = BatchIterator(cfg.batch_size, cfg.seed, cfg.flip)
    writer = LossLogWriter(log_path) if log_path else None
    executor = concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    rows: List[Dict] = []
    curve: List[Dict] = []
    last_good, last_good_state, last_good_epoch = params.copy(), state.copy(), 0
    iteration = 0
    logger.info(f"Training mode={cfg.mode} on {images.shape[0]} images for {cfg.epochs} epochs "
                f"(|C|={len(cfg.corruptions)}, levels={cfg.pyramid_levels}, batch={cfg.batch_size})")
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for batch in iterate(images, iterator, epoch):
                corrupted, levels = corrupt_batch(batch.images, batch.indices, cfg.corruptions,
                                                  cfg.train_corruption, cfg.pyramid_levels, cfg.seed, epoch, executor)
                with GradTape() as tape:
                    loss = sub_batch_loss(params, corrupted, batch.images)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteLossError(f"Non-finite loss {value} at iteration {iteration}",
                                             last_good=last_good, iteration=iteration,
                                             epoch=last_good_epoch, state=last_good_state)
                grads = tape.backward(loss)
                try:
                    adam_step(params, named_gradients(params, grads), state, lr)
                except NumericError as e:
                    raise NonFiniteLossError(str(e), last_good=last_good, iteration=iteration,
                                             epoch=last_good_epoch, state=last_good_state) from e

                row = {
                    "iter": iteration, "epoch": epoch, "mode": cfg.mode, "loss": value, "lr": lr,
                    "level": format_levels(batch.indices, levels),
                }
                rows.append(row)
                if writer:
                    writer.put(row)
                logger.debug(f"iter {iteration} epoch {epoch} loss {value:.6f}")
                iteration += 1

            epoch_rows = [r["loss"] for r in rows if r["epoch"] == epoch]
            message = f"epoch {epoch + 1}/{cfg.epochs} mode={cfg.mode} loss={np.mean(epoch_rows):.6f} lr={lr:g}"
            if held_out is not None and len(held_out):
                spec = cfg.corruptions[0]
                clean = held_out_mse(params, held_out, CLEAN, spec, cfg.pyramid_levels, cfg.seed)
                corrupt = held_out_mse(params, held_out, cfg.eval_corruption, spec, cfg.pyramid_levels, cfg.seed)
                curve.append({"epoch": epoch + 1, "mode": cfg.mode, "clean_mse": clean,
                              "corrupted_mse": corrupt, "lr": lr})
                message += f" held-out clean={clean:.6f} {cfg.eval_corruption}={corrupt:.6f}"
            logger.info(message)
            if progress_callback:
                progress_callback(message)

            last_good, last_good_state, last_good_epoch = params.copy(), state.copy(), epoch + 1
            if on_epoch_end:
                on_epoch_end(epoch + 1, params, state)
    finally:
        if executor is not None:
            executor.shutdown()
        if writer:
            writer.close()

    return TrainResult(
        params=params,
        state=state,
        loss_log=pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS),
        held_out=pd.DataFrame(curve, columns=HELD_OUT_COLUMNS),
    )
