"""Filtered-MSE + entropy loss, Adam, and the incremental-learning loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import generate_pairs, split_validation
from .net import NetConfig, Params, backward, forward, init_params, load_weights, save_weights
from .numerics import gaussian_filter, make_rng
from .optics import SceneConfig

log = logging.getLogger(__name__)

# child-stream tags under the run seed
_INIT, _SHUFFLE, _DROPOUT = 1, 2, 3
ENTROPY_CLAMP = 1e-30


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-5
    filter_sigma: float = 1.5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not self.filter_sigma > 0:
            raise ValueError("filter_sigma must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs_per_iteration: int = 50
    iterations: int = 130
    samples_per_iteration: int = 5000
    validation_fraction: float = 0.25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs_per_iteration", "iterations",
                     "samples_per_iteration", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def total_pairs(self) -> int:
        return self.iterations * self.samples_per_iteration


def normalize_frame(frame) -> np.ndarray:
    """Min-max scale a camera frame (or a stack of frames) to [0, 1].

    The network sees relative intensities only; this makes the photon scale
    and the background level irrelevant to the first layer.
    """
    frame = np.asarray(frame, dtype=np.float64)
    lo = frame.min(axis=(-2, -1), keepdims=True)
    span = frame.max(axis=(-2, -1), keepdims=True) - lo
    return np.where(span > 0, (frame - lo) / np.where(span > 0, span, 1.0), 0.0)


def loss_and_grad(pred, target, cfg: LossConfig = LossConfig()):
    """Loss and its gradient with respect to ``pred``.

    Per image: ``sum((G*(target - pred))**2) + epsilon * sum(pred * log(pred))``
    with ``0 log 0 = 0``. A stack ``(N, H, W)`` is averaged over ``N``; the
    returned gradient is that of the averaged loss.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if pred.min() < -1e-12:
        raise ValueError("prediction has negative pixels")
    n = pred.shape[0] if pred.ndim == 3 else 1
    resid = gaussian_filter(pred - target, cfg.filter_sigma)
    mse = float(np.sum(resid ** 2))
    safe = np.maximum(pred, ENTROPY_CLAMP)
    entropy = float(np.sum(np.where(pred > 0, pred * np.log(safe), 0.0)))
    loss = (mse + cfg.epsilon * entropy) / n
    grad = 2.0 * gaussian_filter(resid, cfg.filter_sigma) + cfg.epsilon * (np.log(safe) + 1.0)
    return loss, grad / n


def filtered_mse(pred, target, sigma: float = 1.5) -> float:
    return float(np.sum(gaussian_filter(np.asarray(pred) - np.asarray(target), sigma) ** 2))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params.tensors()],
                   [np.zeros_like(p) for p in params.tensors()], 0)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Inputs are left untouched."""
    ps, gs = params.tensors(), grads.tensors()
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ValueError("params, grads and Adam state have different layer counts")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        g = g.astype(p.dtype, copy=False)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return Params.from_tensors(new_p), AdamState(new_m, new_v, t)


def _stack(pairs):
    x = normalize_frame(np.stack([p.input for p in pairs]))
    y = np.stack([p.target for p in pairs])
    return x, y


def validate(params: Params, net_cfg: NetConfig, pairs, cfg: LossConfig = LossConfig(),
             batch_size: int = 16) -> float:
    """Mean eval-mode loss over ``pairs`` (no dropout, no parameter change)."""
    if not pairs:
        raise ValueError("validation set is empty")
    total = 0.0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        x, y = _stack(chunk)
        out, _ = forward(params, net_cfg, x)
        loss, _ = loss_and_grad(out, y, cfg)
        total += loss * len(chunk)
    return total / len(pairs)


def train_step(params: Params, net_cfg: NetConfig, state: AdamState, x, y,
               cfg: TrainConfig, loss_cfg: LossConfig, rng):
    out, cache = forward(params, net_cfg, x, train=True, rng=rng)
    loss, grad = loss_and_grad(out, y, loss_cfg)
    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss at Adam step {state.t + 1}; output range "
            f"[{out.min():.3g}, {out.max():.3g}]")
    grads, _ = backward(params, net_cfg, cache, grad, input_grad=False)
    params, state = adam_step(params, grads, state, cfg.learning_rate,
                              cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return params, state, loss


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("iteration", "epoch", "train_loss", "val_loss", "seconds")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                                 for k in self.FIELDS})


@dataclass
class _RunState:
    params: Params
    adam: AdamState
    best: Params
    best_val: float
    next_iteration: int
    log: TrainLog


def _save_checkpoint(out_dir: Path, run: _RunState, net_cfg: NetConfig) -> None:
    it = run.next_iteration - 1
    save_weights(out_dir / f"ckpt_iter{it:04d}.qsrw", run.params, net_cfg)
    save_weights(out_dir / "adam_m.qsrw", Params.from_tensors(run.adam.m), net_cfg)
    save_weights(out_dir / "adam_v.qsrw", Params.from_tensors(run.adam.v), net_cfg)
    save_weights(out_dir / "best.qsrw", run.best, net_cfg)
    state = {"next_iteration": run.next_iteration, "adam_t": run.adam.t,
             "best_val": run.best_val, "checkpoint": f"ckpt_iter{it:04d}.qsrw",
             "log": run.log.rows}
    tmp = out_dir / "state.json.tmp"
    tmp.write_text(json.dumps(state))
    tmp.replace(out_dir / "state.json")


def _load_checkpoint(out_dir: Path, net_cfg: NetConfig) -> _RunState | None:
    path = out_dir / "state.json"
    if not path.exists():
        return None
    state = json.loads(path.read_text())
    params, _ = load_weights(out_dir / state["checkpoint"], net_cfg)
    m, _ = load_weights(out_dir / "adam_m.qsrw", net_cfg)
    v, _ = load_weights(out_dir / "adam_v.qsrw", net_cfg)
    best, _ = load_weights(out_dir / "best.qsrw", net_cfg)
    return _RunState(params, AdamState(m.tensors(), v.tensors(), state["adam_t"]), best,
                     state["best_val"], state["next_iteration"], TrainLog(state["log"]))


def train_incremental(config: TrainConfig, scene: SceneConfig, net_cfg: NetConfig,
                      loss_cfg: LossConfig = LossConfig(), out_dir=None,
                      stop_after: int | None = None, progress=None, workers: int = 1):
    """Incremental learning: fresh simulated pairs every iteration.

    Iteration ``k`` uses pairs ``k * samples_per_iteration`` onwards of the run
    seed, so every pair is unique. Each iteration splits off a validation
    share, trains ``epochs_per_iteration`` shuffled epochs and records one log
    row per epoch. Returns the best-validation parameters and the log.

    With ``out_dir`` set, a checkpoint is written after every iteration and an
    existing checkpoint there is resumed. ``stop_after`` ends the run after that
    many iterations have completed in total (used to simulate interruptions).
    """
    seed = config.seed
    dtype = np.dtype(config.dtype)
    run = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        run = _load_checkpoint(out_dir, net_cfg)
        if run is not None:
            log.info("resuming from iteration %d", run.next_iteration)
    if run is None:
        params = init_params(make_rng(seed, _INIT), net_cfg, dtype)
        run = _RunState(params, AdamState.zeros(params), params.copy(), math.inf, 0, TrainLog())

    n = config.samples_per_iteration
    last = config.iterations if stop_after is None else min(config.iterations, stop_after)
    for it in range(run.next_iteration, last):
        pairs = generate_pairs(seed, scene, n, start=it * n, workers=workers)
        train, val = split_validation(pairs, config.validation_fraction, seed + it)
        if not train or not val:
            raise ValueError("samples_per_iteration too small for a train/validation split")
        for epoch in range(config.epochs_per_iteration):
            t0 = time.perf_counter()
            order = make_rng(seed, _SHUFFLE, it, epoch).permutation(len(train))
            losses = []
            for b in range(0, len(order), config.batch_size):
                x, y = _stack([train[i] for i in order[b:b + config.batch_size]])
                rng = make_rng(seed, _DROPOUT, run.adam.t)
                try:
                    run.params, run.adam, loss = train_step(
                        run.params, net_cfg, run.adam, x, y, config, loss_cfg, rng)
                except FloatingPointError:
                    if out_dir is not None:
                        save_weights(out_dir / "diverged.qsrw", run.params, net_cfg)
                        log.error("dumped parameters before divergence to %s",
                                  out_dir / "diverged.qsrw")
                    raise
                losses.append(loss)
            val_loss = validate(run.params, net_cfg, val, loss_cfg)
            if not math.isfinite(val_loss):
                raise FloatingPointError(f"non-finite validation loss at iteration {it}")
            if val_loss < run.best_val:
                run.best_val, run.best = val_loss, run.params.copy()
            row = {"iteration": it, "epoch": epoch, "train_loss": float(np.mean(losses)),
                   "val_loss": val_loss, "seconds": time.perf_counter() - t0}
            run.log.rows.append(row)
            log.info("iter %d epoch %d train %.6g val %.6g (%.1fs)", it, epoch,
                     row["train_loss"], val_loss, row["seconds"])
            if progress is not None:
                progress(row)
        run.next_iteration = it + 1
        if out_dir is not None:
            _save_checkpoint(out_dir, run, net_cfg)
    return run.best, run.log
