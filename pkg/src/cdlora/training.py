"""Training loops: the guided diffusion teacher, consistency distillation
into low-rank adapter factors, and style fine-tuning of adapters.

The distillation loop follows the distilled-consistency recipe verbatim:
sample (z, c), a timestep n, and a guidance scale; noise z to t_{n+k}; run
the frozen teacher's guided solver one skipping interval down to t_n to get
the target point; regress the adapter-bearing consistency function at
t_{n+k} onto the EMA shadow's output at t_n (stop-gradient); update only the
adapter factors; update the EMA shadow.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from cdlora.datasets import Dataset2D
from cdlora.denoiser import ConsistencyHead, DenoiserNet, consistency_forward
from cdlora.lora import AdapterBundle, AdapterError, LoraAdapter
from cdlora.rng import substream
from cdlora.schedule import NoiseSchedule, add_noise
from cdlora.solvers import SOLVER_KINDS, cfg_target
from cdlora.tensor import GradTape, Tensor, add, mean_all, sqrt, square, sub, sum_rows


class DivergenceError(ArithmeticError):
    """Training went non-finite; carries the step index."""

    def __init__(self, step: int, value):
        super().__init__(f"non-finite loss ({value}) at step {step}")
        self.step = step


class _step_guard:
    """Re-raise non-finite failures inside a training step as divergence."""

    def __init__(self, step: int):
        self.step = step

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, ArithmeticError) \
                and not issubclass(exc_type, DivergenceError):
            raise DivergenceError(self.step, exc) from exc
        return False


# ---------------------------------------------------------------------------
# configuration


def lr_factor(schedule: str, step: int, total: int) -> float:
    """Per-step learning-rate multiplier; "cosine" decays to ~0 at the end."""
    if schedule == "constant":
        return 1.0
    if schedule == "cosine":
        return 0.5 * (1.0 + np.cos(np.pi * (step - 1) / max(total, 1)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


@dataclass
class TrainOpts:
    """Plain diffusion-loss training options (teacher and style phases)."""

    steps: int = 20_000
    lr: float = 1e-3
    batch: int = 256
    p_uncond: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    lr_schedule: str = "constant"

    def validate(self):
        if not (0.0 <= self.p_uncond < 1.0):
            raise ValueError(f"p_uncond {self.p_uncond} outside [0, 1)")
        if self.steps < 0 or self.batch < 1 or self.lr <= 0.0:
            raise ValueError("steps must be >= 0, batch >= 1, lr > 0")
        lr_factor(self.lr_schedule, 1, 1)


@dataclass
class DistillConfig:
    """All distillation hyperparameters."""

    eta: float = 3e-4
    mu: float = 0.95
    k: int = 5
    guidance_mode: str = "fixed"      # "fixed" | "range"
    omega_fixed: float = 7.5
    omega_min: float = 2.0
    omega_max: float = 14.0
    distance: str = "l2"              # "l2" | "pseudo-huber"
    huber_c: float = 0.01
    solver: str = "ddim"
    steps: int = 10_000
    batch_size: int = 256
    seed: int = 0
    optimizer: str = "adam"
    lr_schedule: str = "constant"

    def validate(self, N: int):
        if not (1 <= self.k <= N - 1):
            raise ValueError(f"skipping interval k={self.k} outside [1, {N - 1}]")
        if not (0.0 <= self.mu <= 1.0):
            raise ValueError(f"EMA rate mu={self.mu} outside [0, 1]")
        if self.omega_min > self.omega_max:
            raise ValueError(f"omega range [{self.omega_min}, {self.omega_max}] is empty")
        if self.eta <= 0.0:
            raise ValueError(f"learning rate eta={self.eta} must be positive")
        if self.guidance_mode not in ("fixed", "range"):
            raise ValueError(f"unknown guidance mode {self.guidance_mode!r}")
        if self.distance not in ("l2", "pseudo-huber"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.solver not in SOLVER_KINDS:
            raise ValueError(f"unknown solver {self.solver!r}")
        lr_factor(self.lr_schedule, 1, 1)


# ---------------------------------------------------------------------------
# encoder


class Encoder:
    """Latent encoder: identity by default, or an invertible affine map."""

    def __init__(self, matrix=None, offset=None):
        if matrix is None:
            self.matrix = None
            self.offset = None
        else:
            self.matrix = np.asarray(matrix, dtype=np.float64)
            self.offset = (np.zeros(self.matrix.shape[0]) if offset is None
                           else np.asarray(offset, dtype=np.float64))
            if abs(np.linalg.det(self.matrix)) < 1e-12:
                raise ValueError("affine encoder matrix must be invertible")
            self._inv = np.linalg.inv(self.matrix)

    @classmethod
    def identity(cls) -> "Encoder":
        return cls()

    @classmethod
    def affine(cls, matrix, offset=None) -> "Encoder":
        return cls(matrix, offset)

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.matrix is None:
            return np.asarray(x, dtype=np.float64)
        return np.asarray(x, dtype=np.float64) @ self.matrix.T + self.offset

    def decode(self, z: np.ndarray) -> np.ndarray:
        if self.matrix is None:
            return np.asarray(z, dtype=np.float64)
        return (np.asarray(z, dtype=np.float64) - self.offset) @ self._inv.T


# ---------------------------------------------------------------------------
# EMA shadow and optimizers


class EmaShadow:
    """Exponential moving average of the trainable adapter factors.

    Initialized as a copy of the live factors; updated with no gradient flow.
    The shadow doubles as a frozen adapter for target evaluation.
    """

    def __init__(self, adapter: LoraAdapter):
        self.adapter = adapter.detached_clone()
        self.params = self.adapter.trainable_params()


def ema_update(shadow: EmaShadow, params: list, mu: float) -> EmaShadow:
    """shadow <- mu * shadow + (1 - mu) * params, exactly, off-tape."""
    if not (0.0 <= mu <= 1.0):
        raise ValueError(f"EMA rate mu={mu} outside [0, 1]")
    if len(shadow.params) != len(params):
        raise ValueError("shadow and parameter lists differ in length")
    for s, p in zip(shadow.params, params):
        if s.data.shape != p.data.shape:
            raise ValueError(f"shadow shape {s.data.shape} != param shape {p.data.shape}")
        if mu == 1.0:
            continue
        if mu == 0.0:
            s.data = p.data.copy()
        else:
            s.data = mu * s.data + (1.0 - mu) * p.data
    return shadow


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params):
        for p in params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for i, p in enumerate(params):
            if p.grad is None:
                continue
            m = self.m.get(i)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[i] = np.zeros_like(p.data)
            v = self.v[i]
            m = b1 * m + (1.0 - b1) * p.grad
            v = b2 * v + (1.0 - b2) * p.grad * p.grad
            self.m[i], self.v[i] = m, v
            p.data = p.data - self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return Sgd(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# metrics


class MetricsLog:
    """Per-step training metrics, written as CSV (step, loss, ema_loss, wall_ms)."""

    EMA_RATE = 0.99

    def __init__(self):
        self.rows: list[tuple] = []
        self._ema: Optional[float] = None

    def add(self, step: int, loss: float, wall_ms: float):
        self._ema = loss if self._ema is None else (
            self.EMA_RATE * self._ema + (1.0 - self.EMA_RATE) * loss
        )
        self.rows.append((step, loss, self._ema, wall_ms))

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "ema_loss", "wall_ms"])
            for step, loss, ema, wall in self.rows:
                writer.writerow([step, repr(loss), repr(ema), f"{wall:.3f}"])

    @staticmethod
    def read(path) -> list[tuple]:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in reader]


# ---------------------------------------------------------------------------
# losses


def diffusion_loss(net: DenoiserNet, z_noised, eps_true, cond, t, adapter=None) -> Tensor:
    """Mean squared noise-prediction residual over the batch."""
    eps_hat = net.forward(z_noised, 0.0, cond, t, adapter=adapter)
    residual = sub(eps_hat, Tensor(eps_true))
    return mean_all(sum_rows(square(residual)))


def consistency_distance(f: Tensor, target: np.ndarray, kind: str, huber_c: float) -> Tensor:
    """Batch-mean distance between consistency outputs and frozen targets."""
    diff = sub(f, Tensor(target))
    per_sample = sum_rows(square(diff))
    if kind == "l2":
        return mean_all(per_sample)
    if kind == "pseudo-huber":
        return sub(mean_all(sqrt(add(per_sample, huber_c * huber_c))), huber_c)
    raise ValueError(f"unknown distance {kind!r}")


# ---------------------------------------------------------------------------
# training loops


def _check_finite(loss_val: float, step: int):
    if not np.isfinite(loss_val):
        raise DivergenceError(step, loss_val)


def train_teacher(dataset: Dataset2D, net: DenoiserNet, encoder: Encoder,
                  sched: NoiseSchedule, opts: TrainOpts,
                  metrics: Optional[MetricsLog] = None,
                  checkpoint_cb=None, checkpoint_every: int = 0) -> DenoiserNet:
    """Standard noise-prediction training with condition dropout.

    The teacher ignores the guidance scale: its guidance embedding is fed a
    fixed sentinel 0. Conditions are replaced by the null id with probability
    p_uncond so the unconditional branch is trained for guidance.
    """
    opts.validate()
    if len(dataset.x) == 0:
        raise ValueError("empty dataset")
    if opts.steps == 0:
        return net
    net.set_trainable(True)
    params = net.trainable_params()
    opt = make_optimizer(opts.optimizer, opts.lr)
    z_data = encoder.encode(dataset.x)
    cond_data = dataset.cond

    s_batch = substream(opts.seed, "teacher/batch")
    s_time = substream(opts.seed, "teacher/timestep")
    s_noise = substream(opts.seed, "teacher/noise")
    s_drop = substream(opts.seed, "teacher/dropout")

    for step in range(1, opts.steps + 1):
        tic = time.perf_counter()
        idx = s_batch.integers(opts.batch, 0, len(z_data) - 1)
        z = z_data[idx]
        cond = cond_data[idx].copy()
        n = s_time.integers(opts.batch, 1, sched.N)
        eps = s_noise.normal((opts.batch, net.data_dim))
        if opts.p_uncond > 0.0:
            cond[s_drop.uniform(opts.batch) < opts.p_uncond] = net.null_id
        z_n = add_noise(z, n, eps, sched)
        for p in params:
            p.grad = None
        with _step_guard(step), GradTape() as tape:
            loss = diffusion_loss(net, z_n, eps, cond, sched.t_of(n))
            tape.backward(loss)
        loss_val = float(loss.data)
        _check_finite(loss_val, step)
        opt.lr = opts.lr * lr_factor(opts.lr_schedule, step, opts.steps)
        opt.step(params)
        if metrics is not None:
            metrics.add(step, loss_val, (time.perf_counter() - tic) * 1e3)
        if checkpoint_cb is not None and checkpoint_every > 0 and step % checkpoint_every == 0:
            checkpoint_cb(step)
    return net


def lcd_distill(teacher: DenoiserNet, adapter: LoraAdapter, dataset: Dataset2D,
                encoder: Encoder, sched: NoiseSchedule, cfg: DistillConfig,
                head: Optional[ConsistencyHead] = None,
                metrics: Optional[MetricsLog] = None,
                stats: Optional[dict] = None,
                checkpoint_cb=None, checkpoint_every: int = 0) -> AdapterBundle:
    """Distill the frozen guided teacher into the adapter factors.

    Per step: draw (z, c), n ~ U[1, N-k], and a guidance scale; noise to
    t_{n+k}; compute the guided solver target z_hat at t_n from the frozen
    teacher only (no adapter on that path); minimize
    d(f_theta(z_{t_{n+k}}), f_{theta_minus}(z_hat)) over the adapter factors
    with the EMA branch stop-gradiented; update the EMA shadow.
    """
    cfg.validate(sched.N)
    for name, entry in adapter.entries.items():
        param = teacher.params.get(name)
        if param is None:
            raise AdapterError(f"adapter targets {name!r}, absent from the teacher")
        if (entry.a.shape[1], entry.b.shape[0]) != param.shape:
            raise AdapterError(
                f"adapter entry {name!r} ({entry.b.shape[0]}x{entry.a.shape[1]}) does not "
                f"match teacher layer {param.shape}"
            )
    if len(dataset.x) == 0:
        raise ValueError("empty dataset")
    teacher.set_trainable(False)
    if head is None:
        head = ConsistencyHead.for_schedule(sched)
    params = adapter.trainable_params()
    opt = make_optimizer(cfg.optimizer, cfg.eta)
    shadow = EmaShadow(adapter)  # theta_minus <- theta
    z_data = encoder.encode(dataset.x)
    cond_data = dataset.cond

    s_batch = substream(cfg.seed, "distill/batch")
    s_time = substream(cfg.seed, "distill/timestep")
    s_noise = substream(cfg.seed, "distill/noise")
    s_omega = substream(cfg.seed, "distill/omega")

    n_counts = np.zeros(sched.N + 1, dtype=np.int64)
    omega_seen = [np.inf, -np.inf]

    def teacher_eps(x, t, cond_ids):
        return teacher.forward(x, 0.0, cond_ids, t).data

    for step in range(1, cfg.steps + 1):
        tic = time.perf_counter()
        batch = cfg.batch_size
        idx = s_batch.integers(batch, 0, len(z_data) - 1)
        z = z_data[idx]
        cond = cond_data[idx]
        n = s_time.integers(batch, 1, sched.N - cfg.k)
        if cfg.guidance_mode == "fixed":
            omega = np.full(batch, cfg.omega_fixed)
        else:
            omega = cfg.omega_min + (cfg.omega_max - cfg.omega_min) * s_omega.uniform(batch)
        eps = s_noise.normal((batch, teacher.data_dim))
        z_hi = add_noise(z, n + cfg.k, eps, sched)

        with _step_guard(step):
            z_hat = cfg_target(z_hi, n + cfg.k, n, cond, teacher.null_id, omega,
                               teacher_eps, sched, kind=cfg.solver)
            # stop-gradient branch: evaluated off-tape through the EMA adapter
            target = consistency_forward(teacher, head, sched, z_hat, omega, cond, n,
                                         adapter=shadow.adapter).data

        for p in params:
            p.grad = None
        with _step_guard(step), GradTape() as tape:
            f = consistency_forward(teacher, head, sched, z_hi, omega, cond,
                                    n + cfg.k, adapter=adapter)
            loss = consistency_distance(f, target, cfg.distance, cfg.huber_c)
            tape.backward(loss)
        loss_val = float(loss.data)
        _check_finite(loss_val, step)
        opt.lr = cfg.eta * lr_factor(cfg.lr_schedule, step, cfg.steps)
        opt.step(params)
        ema_update(shadow, params, cfg.mu)

        n_counts += np.bincount(n, minlength=sched.N + 1)
        omega_seen[0] = min(omega_seen[0], float(omega.min()))
        omega_seen[1] = max(omega_seen[1], float(omega.max()))
        if metrics is not None:
            metrics.add(step, loss_val, (time.perf_counter() - tic) * 1e3)
        if checkpoint_cb is not None and checkpoint_every > 0 and step % checkpoint_every == 0:
            checkpoint_cb(step)

    if stats is not None:
        stats["n_counts"] = n_counts
        stats["omega_min_seen"] = omega_seen[0]
        stats["omega_max_seen"] = omega_seen[1]
        stats["ema_shadow"] = shadow
        stats["adapter"] = adapter
    return AdapterBundle(adapter=adapter, role="acceleration",
                         provenance={"solver": cfg.solver, "k": cfg.k,
                                     "guidance_mode": cfg.guidance_mode})


def finetune_style_lora(teacher: DenoiserNet, adapter: LoraAdapter, dataset: Dataset2D,
                        encoder: Encoder, sched: NoiseSchedule, opts: TrainOpts,
                        metrics: Optional[MetricsLog] = None) -> AdapterBundle:
    """Diffusion-loss fine-tuning with only the adapter factors trainable."""
    opts.validate()
    if len(dataset.x) == 0:
        raise ValueError("empty dataset")
    for entry in adapter.entries.values():
        if np.any(entry.b.data != 0.0):
            raise AdapterError("style fine-tuning expects a fresh adapter (B = 0)")
    teacher.set_trainable(False)
    if opts.steps == 0:
        return AdapterBundle(adapter=adapter, role="style", provenance={})
    params = adapter.trainable_params()
    opt = make_optimizer(opts.optimizer, opts.lr)
    z_data = encoder.encode(dataset.x)
    cond_data = dataset.cond

    s_batch = substream(opts.seed, "style/batch")
    s_time = substream(opts.seed, "style/timestep")
    s_noise = substream(opts.seed, "style/noise")
    s_drop = substream(opts.seed, "style/dropout")

    for step in range(1, opts.steps + 1):
        tic = time.perf_counter()
        idx = s_batch.integers(opts.batch, 0, len(z_data) - 1)
        z = z_data[idx]
        cond = cond_data[idx].copy()
        n = s_time.integers(opts.batch, 1, sched.N)
        eps = s_noise.normal((opts.batch, teacher.data_dim))
        if opts.p_uncond > 0.0:
            cond[s_drop.uniform(opts.batch) < opts.p_uncond] = teacher.null_id
        z_n = add_noise(z, n, eps, sched)
        for p in params:
            p.grad = None
        with _step_guard(step), GradTape() as tape:
            loss = diffusion_loss(teacher, z_n, eps, cond, sched.t_of(n), adapter=adapter)
            tape.backward(loss)
        loss_val = float(loss.data)
        _check_finite(loss_val, step)
        opt.lr = opts.lr * lr_factor(opts.lr_schedule, step, opts.steps)
        opt.step(params)
        if metrics is not None:
            metrics.add(step, loss_val, (time.perf_counter() - tic) * 1e3)
    return AdapterBundle(adapter=adapter, role="style", provenance={})
