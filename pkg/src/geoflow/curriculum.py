"""Two-stage training: teacher forcing, then flow forcing on partially denoised rollouts.

Stage 1 samples windows of ``k + m`` frames, conditions on the clean first ``k``
and regresses the clean last ``m`` through the flow model.

Stage 2 samples windows of ``k + m + 1`` frames. The first hop integrates the
flow ODE from noise down to an intermediate time ``tau_mid`` under the clean
context (no gradient). The next condition shifts by one frame: the clean frames
``1..k-1`` plus frame ``k`` mixed as ``(1 - lam) Z + lam Z_partial``. The
second hop predicts frames ``k+1..k+m`` and is the only part that receives
gradient.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import NonFiniteError, TrainingAborted, ValidationError
from .flowformer import ConditionTokens, ModelConfig, forward, make_predictor
from .flowmatch import TAU_CLAMP, SolverConfig, corrupt, loss_mse, loss_s1, ode_solve
from .toyworld import WorldConfig, generate_trajectory

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "stage", "lambda", "tau_mean", "loss", "grad_norm", "rollout_err")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.05
    grad_clip_l2: float = 1.0
    clip: bool = True
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_stage1: int = 8
    batch_stage2: int = 8
    steps_stage1: int = 1000
    steps_stage2: int = 1000
    tau_mid_low: float = 0.1
    tau_mid_high: float = 0.9
    lambda_schedule: str | float = "linear"
    stage1_weighting: str = "s1"
    stage2_weighting: str = "mse"
    partial_steps: int = 20
    n_episodes: int = 64
    episode_frames: int = 16
    ckpt_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.grad_clip_l2 <= 0:
            raise ValidationError("train.lr and train.grad_clip_l2 must be > 0")
        if self.batch_stage1 < 1 or self.batch_stage2 < 1:
            raise ValidationError("train batch sizes must be >= 1")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ValidationError("train step counts must be >= 0")
        if not 0.0 < self.tau_mid_low <= self.tau_mid_high < 1.0:
            raise ValidationError("train.tau_mid bounds must satisfy 0 < low <= high < 1")
        if self.stage1_weighting not in ("s1", "mse") or self.stage2_weighting not in ("s1", "mse"):
            raise ValidationError("stage weightings must be 's1' or 'mse'")
        if isinstance(self.lambda_schedule, str):
            if self.lambda_schedule != "linear":
                raise ValidationError(f"unknown lambda schedule {self.lambda_schedule!r}")
        elif not 0.0 <= float(self.lambda_schedule) <= 1.0:
            raise ValidationError("static lambda must lie in [0, 1]")
        if self.partial_steps < 1 or self.n_episodes < 1 or self.episode_frames < 2:
            raise ValidationError("train.partial_steps, n_episodes >= 1 and episode_frames >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ dataset

@dataclass
class Dataset:
    """Clean latent episodes, each ``(T, N, d)``."""

    episodes: list[np.ndarray]
    grid: int
    seeds: list[int] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return self.episodes[0].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.episodes[0].shape[2]

    @classmethod
    def generate(cls, world: WorldConfig, seeds: Iterable[int], frames: int) -> "Dataset":
        seeds = list(seeds)
        eps = [generate_trajectory(world, s, frames).tokens for s in seeds]
        return cls(eps, world.grid, seeds)

    def check_length(self, need: int) -> None:
        short = [i for i, e in enumerate(self.episodes) if e.shape[0] < need]
        if not self.episodes or short:
            raise ValidationError(f"dataset episodes {short} shorter than the {need} frames required")


def _windows(dataset: Dataset, rng: np.random.Generator, batch: int, length: int):
    dataset.check_length(length)
    ep = rng.integers(len(dataset.episodes), size=batch)
    starts = np.array([rng.integers(dataset.episodes[e].shape[0] - length + 1) for e in ep])
    frames = np.stack([dataset.episodes[e][s:s + length] for e, s in zip(ep, starts)])
    return ep, starts, frames


def _flat(frames: np.ndarray) -> np.ndarray:
    """``(B, F, N, d) -> (B, F*N, d)``."""
    B, F, N, d = frames.shape
    return frames.reshape(B, F * N, d)


@dataclass
class Stage1Batch:
    cond: np.ndarray      # (B, k*N, d)
    target: np.ndarray    # (B, m*N, d)
    tau: np.ndarray       # (B,)
    eps: np.ndarray       # (B, m*N, d)
    episodes: np.ndarray
    starts: np.ndarray

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for a in (self.cond, self.target, self.tau, self.eps):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def sample_stage1_batch(dataset: Dataset, rng: np.random.Generator, batch: int,
                        k: int, m: int) -> Stage1Batch:
    ep, starts, frames = _windows(dataset, rng, batch, k + m)
    target = _flat(frames[:, k:])
    tau = rng.uniform(0.0, TAU_CLAMP, size=batch)
    eps = rng.standard_normal(target.shape)
    return Stage1Batch(_flat(frames[:, :k]), target, tau, eps, ep, starts)


@dataclass
class Stage2Batch:
    frames: np.ndarray     # (B, k+m+1, N, d)
    tau_mid: np.ndarray    # (B,)
    eps_roll: np.ndarray   # (B, m*N, d)
    tau: np.ndarray        # (B,)
    eps: np.ndarray        # (B, m*N, d)


def sample_stage2_batch(dataset: Dataset, rng: np.random.Generator, batch: int, k: int, m: int,
                        tau_mid_range: tuple[float, float] = (0.1, 0.9)) -> Stage2Batch:
    _, _, frames = _windows(dataset, rng, batch, k + m + 1)
    N, d = frames.shape[2:]
    tau_mid = rng.uniform(*tau_mid_range, size=batch)
    eps_roll = rng.standard_normal((batch, m * N, d))
    tau = rng.uniform(0.0, TAU_CLAMP, size=batch)
    eps = rng.standard_normal((batch, m * N, d))
    return Stage2Batch(frames, tau_mid, eps_roll, tau, eps)


# -------------------------------------------------------------------- losses

def token_mask(mcfg: ModelConfig, n_tokens: int):
    """Per-row loss mask for a chunk, or None when every token is supervised."""
    if mcfg.predict_registers:
        return None
    row = np.ones(n_tokens)
    row[1:5] = 0.0
    return np.tile(row, mcfg.m)


def teacher_forced_loss(params, mcfg: ModelConfig, cond, target, tau, eps, grid: int,
                        weighting: str = "s1") -> nx.Tensor:
    """Loss of predicting ``target`` from clean ``cond`` at flow times ``tau``."""
    k, m = mcfg.k, mcfg.m
    z_tau = corrupt(target, eps, tau)
    pred = forward(params, mcfg, z_tau, tau, ConditionTokens(cond, tuple(range(k))),
                   range(k, k + m), grid)
    mask = token_mask(mcfg, target.shape[1] // m)
    if weighting == "s1":
        return loss_s1(pred, target, tau, mask)
    return loss_mse(pred, target, mask)


def stage1_loss(params, mcfg: ModelConfig, batch: Stage1Batch, grid: int,
                weighting: str = "s1") -> nx.Tensor:
    return teacher_forced_loss(params, mcfg, batch.cond, batch.target, batch.tau, batch.eps,
                               grid, weighting)


def zero_init_loss_oracle(batch: Stage1Batch) -> float:
    """Stage-1 loss of a network that outputs exactly zero, computed directly."""
    per = np.mean(batch.target ** 2, axis=(1, 2))
    return float(np.mean(per / (1.0 - batch.tau) ** 2))


def make_partial_rollout(params, mcfg: ModelConfig, cond: np.ndarray, eps: np.ndarray,
                         tau_mid, solver_steps: int, grid: int) -> np.ndarray:
    """Integrate from noise at ``tau = 1`` down to ``tau_mid`` under a clean context.

    Runs with frozen parameter arrays and no graph, so nothing upstream of the
    returned state can receive gradient.
    """
    tau_mid = np.asarray(tau_mid, dtype=np.float64)
    if np.any(tau_mid <= 0) or np.any(tau_mid > 1):
        raise ValidationError("tau_mid must lie in (0, 1]")
    k, m = mcfg.k, mcfg.m
    predict = make_predictor(params, mcfg, ConditionTokens(cond, tuple(range(k))),
                             range(k, k + m), grid)
    return ode_solve(predict, eps, SolverConfig(steps=solver_steps), tau_end=tau_mid)


@dataclass
class MixedCondition:
    tokens: np.ndarray
    lam: float
    tau_mid: np.ndarray | float | None
    rollout_error_norm: float


def mix_condition(Z: np.ndarray, Z_partial: np.ndarray, lam: float,
                  tau_mid=None) -> MixedCondition:
    """``(1 - lam) Z + lam Z_partial``; exact at both ends of ``lam``."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    Z = np.asarray(Z, dtype=np.float64)
    Z_partial = np.asarray(Z_partial, dtype=np.float64)
    if Z.shape != Z_partial.shape:
        raise ValidationError(f"mix_condition: {Z.shape} vs {Z_partial.shape}")
    tokens = (1.0 - lam) * Z + lam * Z_partial
    err = Z_partial - Z
    if err.ndim >= 3:
        norm = float(np.mean(np.sqrt(np.sum(err ** 2, axis=tuple(range(1, err.ndim))))))
    else:
        norm = float(np.sqrt(np.sum(err ** 2)))
    return MixedCondition(tokens, lam, tau_mid, norm)


def lambda_at(step: int, total_steps: int, schedule: str | float = "linear") -> float:
    if not isinstance(schedule, str):
        return float(schedule)
    if schedule != "linear":
        raise ValidationError(f"unknown lambda schedule {schedule!r}")
    if total_steps <= 0:
        raise ValidationError("linear lambda schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return step / total_steps


def stage2_loss(params, rollout_params, mcfg: ModelConfig, batch: Stage2Batch, lam: float,
                grid: int, solver_steps: int = 20, weighting: str = "mse"):
    """Flow-forcing loss for one batch; returns ``(loss, MixedCondition)``.

    ``rollout_params`` drive the detached first hop, ``params`` the supervised
    second hop. Normally both are the same weights.
    """
    k, m = mcfg.k, mcfg.m
    B, _, N, d = batch.frames.shape
    cond1 = _flat(batch.frames[:, :k])
    partial = make_partial_rollout(rollout_params, mcfg, cond1, batch.eps_roll, batch.tau_mid,
                                   solver_steps, grid)
    # only the first predicted frame enters the shifted condition
    first_pred = partial[:, :N]
    mixed = mix_condition(batch.frames[:, k], first_pred, lam, batch.tau_mid)
    mixed.rollout_error_norm = float(np.mean(np.sqrt(np.sum(
        (partial - _flat(batch.frames[:, k:k + m])) ** 2, axis=(1, 2)))))
    cond2 = np.concatenate([_flat(batch.frames[:, 1:k]), mixed.tokens], axis=1)
    target = _flat(batch.frames[:, k + 1:k + 1 + m])
    loss = teacher_forced_loss(params, mcfg, cond2, target, batch.tau, batch.eps, grid, weighting)
    return loss, mixed


# ----------------------------------------------------------------- optimizer

def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / (norm + 1e-12)
    return {n: g * factor for n, g in grads.items()}, norm


class AdamW:
    """Adaptive moments with decoupled weight decay (applied to matrices only)."""

    def __init__(self, lr: float, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p = params[name]
            if self.wd and p.ndim >= 2:
                p = p - self.lr * self.wd * p
            params[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _grad_step(params, loss_fn):
    with nx.Graph() as g:
        leaves = {n: g.leaf(n, a) for n, a in params.items()}
        out = loss_fn(leaves)
        loss = out[0] if isinstance(out, tuple) else out
    grads = nx.backward(g, loss)
    return out, float(loss.data), grads


LogFn = Callable[[dict], None]
CkptFn = Callable[[int, dict], None]


def _train(params, tcfg: TrainConfig, steps: int, stage: int, step_fn, log_fn, ckpt_fn):
    params = {n: np.array(a, dtype=np.float64) for n, a in params.items()}
    opt = AdamW(tcfg.lr, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps, tcfg.weight_decay)
    rows = []
    for step in range(steps):
        before = {n: a.copy() for n, a in params.items()}
        try:
            row, grads = step_fn(step, params)
            grads, norm = clip_gradients(grads, tcfg.grad_clip_l2 if tcfg.clip else None)
            opt.step(params, grads)
            if not all(np.all(np.isfinite(a)) for a in params.values()):
                raise NonFiniteError("parameters became non-finite")
        except NonFiniteError as exc:
            raise TrainingAborted(step, before, exc) from exc
        row.update(step=step, stage=stage, grad_norm=norm)
        rows.append(row)
        if log_fn is not None:
            log_fn(row)
        if ckpt_fn is not None and tcfg.ckpt_every and (step + 1) % tcfg.ckpt_every == 0:
            ckpt_fn(step + 1, params)
    return params, rows


def train_stage1(params, mcfg: ModelConfig, tcfg: TrainConfig, dataset: Dataset,
                 steps: int | None = None, log_fn: LogFn | None = None,
                 ckpt_fn: CkptFn | None = None, rng: np.random.Generator | None = None):
    """Teacher-forced training; returns ``(params, log_rows)``."""
    steps = tcfg.steps_stage1 if steps is None else steps
    rng = rng if rng is not None else np.random.default_rng(tcfg.seed)

    def step_fn(step, p):
        batch = sample_stage1_batch(dataset, rng, tcfg.batch_stage1, mcfg.k, mcfg.m)
        _, loss, grads = _grad_step(
            p, lambda L: stage1_loss(L, mcfg, batch, dataset.grid, tcfg.stage1_weighting))
        return {"lambda": 0.0, "tau_mean": float(batch.tau.mean()), "loss": loss,
                "rollout_err": float("nan")}, grads

    return _train(params, tcfg, steps, 1, step_fn, log_fn, ckpt_fn)


def train_stage2(params, mcfg: ModelConfig, tcfg: TrainConfig, dataset: Dataset,
                 steps: int | None = None, log_fn: LogFn | None = None,
                 ckpt_fn: CkptFn | None = None, rng: np.random.Generator | None = None):
    """Flow-forcing finetuning from Stage-1 weights; returns ``(params, log_rows)``."""
    steps = tcfg.steps_stage2 if steps is None else steps
    rng = rng if rng is not None else np.random.default_rng(tcfg.seed + 1)

    def step_fn(step, p):
        # the last step sees lambda = 1 exactly
        lam = lambda_at(step, max(steps - 1, 1), tcfg.lambda_schedule)
        batch = sample_stage2_batch(dataset, rng, tcfg.batch_stage2, mcfg.k, mcfg.m,
                                    (tcfg.tau_mid_low, tcfg.tau_mid_high))
        frozen = {n: a for n, a in p.items()}
        (_, mixed), loss, grads = _grad_step(
            p, lambda L: stage2_loss(L, frozen, mcfg, batch, lam, dataset.grid,
                                     tcfg.partial_steps, tcfg.stage2_weighting))
        return {"lambda": lam, "tau_mean": float(batch.tau.mean()), "loss": loss,
                "rollout_err": mixed.rollout_error_norm}, grads

    return _train(params, tcfg, steps, 2, step_fn, log_fn, ckpt_fn)


def evaluate_loss(params, mcfg: ModelConfig, batch: Stage1Batch, grid: int,
                  weighting: str = "s1") -> float:
    """Stage-1 loss of a fixed batch without building a graph."""
    return float(stage1_loss(params, mcfg, batch, grid, weighting).data)


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
