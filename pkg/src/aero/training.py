"""Two-stage offline training with early stopping.

Stage 1 fits the shared temporal reconstruction network by minimizing the
mean squared short-window residual over all variates. Stage 2 freezes stage 1
and fits the graph convolution to the remaining residual. Early stopping
monitors the loss on a chronological validation tail and restores the
best-epoch weights.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import WindowInstance
from .noisegraph import (NoiseModule, batch_graph_messages,
                         complete_graph_messages, noise_forward)
from .temporal import TemporalModule, forward_window_batch


@dataclass
class TrainConfig:
    """Hyperparameters of both stages (defaults per the published setup)."""

    w: int = 200
    omega: int = 60
    d_m: int = 32
    heads: int = 4
    layers: int = 1
    lr: float = 0.001
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 16
    stride: int = 1
    seed: int = 0
    val_fraction: float = 0.1
    grad_clip: float = 5.0
    dtype: str = "float64"
    # stage 2 is a few thousand parameters on precomputed inputs, so its
    # epochs are nearly free; give it a longer leash than stage 1 by default
    stage2_max_epochs: int | None = None
    stage2_patience: int | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.layers != 1:
            raise ValueError("only single-layer encoder/decoder stacks are supported")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type


@dataclass
class TrainReport:
    """Per-epoch record of one training stage."""

    stage: int
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 = never improved
    aborted: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)


def hold_out_split(windows: list[WindowInstance], fraction: float
                   ) -> tuple[list[WindowInstance], list[WindowInstance]]:
    """Chronological split: validation is the tail, never shuffled across time."""
    if not 0.0 < fraction <= 0.5:
        raise ValueError("validation fraction must lie in (0, 0.5]")
    if len(windows) < 2:
        raise ValueError("need at least 2 windows to split")
    n_val = max(1, int(np.ceil(len(windows) * fraction)))
    return windows[:-n_val], windows[-n_val:]


def scattered_split(windows: list[WindowInstance], fraction: float, seed: int
                    ) -> tuple[list[WindowInstance], list[WindowInstance]]:
    """Seeded random split used for stage 2.

    Stage-2 samples are precomputed per-window (message, residual) pairs, and
    concurrent-noise windows are rare and clustered in time: a chronological
    tail can easily contain none of them, which would make validation blind to
    the one phenomenon the noise module exists to model. A scattered split
    keeps every phase of the series represented on both sides.
    """
    if not 0.0 < fraction <= 0.5:
        raise ValueError("validation fraction must lie in (0, 0.5]")
    if len(windows) < 2:
        raise ValueError("need at least 2 windows to split")
    n_val = max(1, int(np.ceil(len(windows) * fraction)))
    order = np.random.default_rng(seed).permutation(len(windows))
    val_idx = set(order[:n_val].tolist())
    train = [w for i, w in enumerate(windows) if i not in val_idx]
    val = [w for i, w in enumerate(windows) if i in val_idx]
    return train, val


def _stack_windows(windows: list[WindowInstance], dtype
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack instances into (n, N, W), (n, N, omega), (n, W), (n, W) arrays."""
    longs = np.stack([w.long for w in windows]).astype(dtype)
    shorts = np.stack([w.short for w in windows]).astype(dtype)
    pos = np.stack([w.positions for w in windows]).astype(np.float64)
    deltas = np.stack([w.deltas for w in windows]).astype(dtype)
    return longs, shorts, pos, deltas


def _flatten_variates(longs, shorts, pos, deltas, idx):
    """Merge selected windows and their variates into one sequence batch."""
    n_var, w = longs.shape[1], longs.shape[2]
    omega = shorts.shape[2]
    x = longs[idx].reshape(-1, w)
    y = shorts[idx].reshape(-1, omega)
    p = np.repeat(pos[idx], n_var, axis=0)
    d = np.repeat(deltas[idx], n_var, axis=0)
    return x, y, p, d


class _EpochLogger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, stage: int, epoch: int, train: float, val: float,
                 seconds: float) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"stage={stage} epoch={epoch} train_loss={train:.8f} "
                     f"val_loss={val:.8f} seconds={seconds:.3f}\n")


def _stage1_val_loss(module: TemporalModule, arrays, chunk: int = 16) -> float:
    longs, shorts, pos, deltas = arrays
    total, count = 0.0, 0
    with nn.no_grad():
        for lo in range(0, longs.shape[0], chunk):
            idx = np.arange(lo, min(lo + chunk, longs.shape[0]))
            x, y, p, d = _flatten_variates(longs, shorts, pos, deltas, idx)
            pred = forward_window_batch(module, x, y, p, d).data
            total += float(((pred - y) ** 2).sum())
            count += y.size
    return total / count


def train_stage1(windows: list[WindowInstance], config: TrainConfig,
                 log_path: str | Path | None = None
                 ) -> tuple[TemporalModule, TrainReport]:
    """Fit the temporal reconstruction module; returns best-epoch weights."""
    dtype = config.np_dtype
    train_wins, val_wins = hold_out_split(windows, config.val_fraction)
    train_arrays = _stack_windows(train_wins, dtype)
    val_arrays = _stack_windows(val_wins, dtype)

    module = TemporalModule(d_m=config.d_m, heads=config.heads,
                            seed=config.seed, dtype=dtype)
    optimizer = nn.Adam(module.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    log = _EpochLogger(log_path)
    report = TrainReport(stage=1)

    best_val = np.inf
    best_state = {k: t.data.copy() for k, t in module.p.items()}
    stale = 0
    n_train = len(train_wins)

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        order = rng.permutation(n_train)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x, y, p, d = _flatten_variates(*train_arrays, idx)
            optimizer.zero_grad()
            pred = forward_window_batch(module, x, y, p, d)
            loss = nn.mse(pred, nn.Tensor(y))
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                warnings.warn("stage 1: non-finite loss; reverting to last good "
                              "checkpoint", stacklevel=2)
                report.aborted = True
                break
            loss.backward()
            nn.clip_global_norm(module.parameters(), config.grad_clip)
            optimizer.step()
            epoch_loss += loss_value
            n_batches += 1
        if report.aborted:
            break

        val_loss = _stage1_val_loss(module, val_arrays)
        seconds = time.time() - t0
        report.train_losses.append(epoch_loss / max(1, n_batches))
        report.val_losses.append(val_loss)
        report.epoch_seconds.append(seconds)
        log(1, epoch, report.train_losses[-1], val_loss, seconds)

        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: t.data.copy() for k, t in module.p.items()}
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    for k, t in module.p.items():
        t.data = best_state[k]
    return module, report


def stage1_outputs(module: TemporalModule, windows: list[WindowInstance],
                   chunk: int = 16) -> np.ndarray:
    """Frozen stage-1 reconstructions for many windows -> (n, N, omega)."""
    dtype = module.dtype
    longs, shorts, pos, deltas = _stack_windows(windows, dtype)
    n, n_var, omega = shorts.shape
    out = np.empty((n, n_var, omega), dtype=np.float64)
    with nn.no_grad():
        for lo in range(0, n, chunk):
            idx = np.arange(lo, min(lo + chunk, n))
            x, y, p, d = _flatten_variates(longs, shorts, pos, deltas, idx)
            pred = forward_window_batch(module, x, y, p, d).data
            out[idx] = pred.reshape(len(idx), n_var, omega)
    return out


def _stage2_inputs(windows: list[WindowInstance], temporal_module: TemporalModule,
                   graph: str) -> tuple[np.ndarray, np.ndarray]:
    """Precompute (messages, residual targets) with stage-1 detached."""
    shorts = np.stack([w.short for w in windows])
    y1 = stage1_outputs(temporal_module, windows)
    residuals = shorts - y1
    if graph == "window":
        messages = batch_graph_messages(residuals, shorts)
    elif graph == "complete":
        messages = complete_graph_messages(shorts)
    else:
        raise ValueError(f"unknown graph mode {graph!r}")
    return messages, residuals


def train_stage2(windows: list[WindowInstance], temporal_module: TemporalModule,
                 config: TrainConfig, log_path: str | Path | None = None,
                 graph: str = "window") -> tuple[NoiseModule, TrainReport]:
    """Fit the noise reconstruction module against the frozen stage-1 residual."""
    dtype = config.np_dtype
    train_wins, val_wins = scattered_split(windows, config.val_fraction,
                                           seed=config.seed + 3)
    msg_tr, res_tr = _stage2_inputs(train_wins, temporal_module, graph)
    msg_va, res_va = _stage2_inputs(val_wins, temporal_module, graph)
    msg_tr = msg_tr.astype(dtype)
    res_tr = res_tr.astype(dtype)

    module = NoiseModule(omega=config.omega, dtype=dtype)
    optimizer = nn.Adam(module.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 2)
    log = _EpochLogger(log_path)
    report = TrainReport(stage=2)

    best_val = np.inf
    best_state = (module.w_theta.data.copy(), module.b_theta.data.copy())
    stale = 0
    n_train = msg_tr.shape[0]
    max_epochs = (config.stage2_max_epochs if config.stage2_max_epochs is not None
                  else config.max_epochs)
    patience = (config.stage2_patience if config.stage2_patience is not None
                else config.patience)

    for epoch in range(1, max_epochs + 1):
        t0 = time.time()
        order = rng.permutation(n_train)
        epoch_loss, n_batches = 0.0, 0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            optimizer.zero_grad()
            pred = noise_forward(msg_tr[idx], module)
            loss = nn.mse(pred, nn.Tensor(res_tr[idx]))
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                warnings.warn("stage 2: non-finite loss; reverting to last good "
                              "checkpoint", stacklevel=2)
                report.aborted = True
                break
            loss.backward()
            nn.clip_global_norm(module.parameters(), config.grad_clip)
            optimizer.step()
            epoch_loss += loss_value
            n_batches += 1
        if report.aborted:
            break

        with nn.no_grad():
            val_pred = noise_forward(msg_va.astype(dtype), module).data
        val_loss = float(((val_pred - res_va) ** 2).mean())
        seconds = time.time() - t0
        report.train_losses.append(epoch_loss / max(1, n_batches))
        report.val_losses.append(val_loss)
        report.epoch_seconds.append(seconds)
        log(2, epoch, report.train_losses[-1], val_loss, seconds)

        if val_loss < best_val:
            best_val = val_loss
            best_state = (module.w_theta.data.copy(), module.b_theta.data.copy())
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break

    module.w_theta.data, module.b_theta.data = best_state
    return module, report
