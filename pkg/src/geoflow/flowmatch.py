"""Linear-path flow matching: corruption, losses, Euler integration, latent SNR.

The path runs from data at ``tau = 0`` to noise at ``tau = 1``:
``Z_tau = (1 - tau) Z + tau eps``, with velocity ``dZ_tau/dtau = eps - Z``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import NonFiniteError, ShapeError, ValidationError

TAU_CLAMP = 0.995
SNR_CAP_DB = 120.0

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    steps: int = 20
    tau_start: float = 1.0
    tau_end: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("solver steps must be >= 1")
        if not (0.0 <= self.tau_end <= self.tau_start <= 1.0):
            raise ValidationError(
                f"solver bounds must satisfy 0 <= tau_end <= tau_start <= 1, "
                f"got {self.tau_start} -> {self.tau_end}")


@dataclass
class FlowSample:
    Z: np.ndarray
    eps: np.ndarray
    tau: np.ndarray
    Z_tau: np.ndarray


def _tau_column(tau, ndim: int) -> np.ndarray:
    """Broadcast scalar or per-sample flow times against ``(B, ...)`` arrays."""
    tau = np.asarray(tau, dtype=np.float64)
    return tau.reshape(tau.shape + (1,) * (ndim - tau.ndim)) if tau.ndim else tau


def corrupt(Z, eps, tau) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if Z.shape != eps.shape:
        raise ShapeError(f"corrupt: Z {Z.shape} and eps {eps.shape} differ")
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValidationError(f"corrupt: tau outside [0, 1]: {tau}")
    t = _tau_column(t, Z.ndim)
    return (1.0 - t) * Z + t * eps


def sample_flow(Z: np.ndarray, rng: np.random.Generator, tau_max: float = TAU_CLAMP) -> FlowSample:
    """Draw ``tau ~ U[0, tau_max]`` per sample and ``eps ~ N(0, I)``."""
    tau = rng.uniform(0.0, tau_max, size=Z.shape[0])
    eps = rng.standard_normal(Z.shape)
    return FlowSample(Z, eps, tau, corrupt(Z, eps, tau))


def _sample_weights(tau, batch: int) -> np.ndarray:
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (batch,))
    return 1.0 / np.maximum(1.0 - tau, 1.0 - TAU_CLAMP) ** 2


def _masked_sq_mean(diff, token_mask):
    """Mean of squared entries per sample; ``token_mask`` selects token rows."""
    sq = nx.mul(diff, diff)
    if token_mask is None:
        return nx.mean(sq, axis=(1, 2))
    mask = np.asarray(token_mask, dtype=np.float64)[None, :, None]
    denom = mask.sum() * diff.shape[2]
    return nx.scale(nx.total(nx.mul(sq, mask), axis=(1, 2)), 1.0 / denom)


def _batched(x):
    x = nx.as_tensor(x)
    return nx.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def loss_s1(Z_hat, Z, tau, token_mask=None) -> nx.Tensor:
    """Teacher-forced z-prediction loss, ``mean |Z_hat - Z|^2 / (1 - tau)^2``.

    Equals the two-fraction form ``|(F - Z_tau)/(1-tau) - (Z - Z_tau)/(1-tau)|^2``
    algebraically. The denominator is clamped at ``(1 - 0.995)^2``.
    """
    Z_hat, Z = _batched(Z_hat), _batched(np.asarray(Z, dtype=np.float64))
    if Z_hat.shape != Z.shape:
        raise ShapeError(f"loss_s1: prediction {Z_hat.shape} vs target {Z.shape}")
    per = _masked_sq_mean(nx.sub(Z_hat, Z), token_mask)
    loss = nx.mean(nx.mul(per, _sample_weights(tau, Z.shape[0])))
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss_s1 is non-finite")
    return loss


def loss_mse(Z_hat, Z, token_mask=None) -> nx.Tensor:
    """Unweighted clean-target MSE (the flow-forcing finetuning objective)."""
    Z_hat, Z = _batched(Z_hat), _batched(np.asarray(Z, dtype=np.float64))
    if Z_hat.shape != Z.shape:
        raise ShapeError(f"loss_mse: prediction {Z_hat.shape} vs target {Z.shape}")
    return nx.mean(_masked_sq_mean(nx.sub(Z_hat, Z), token_mask))


def loss_vpred(v_hat, Z, eps, token_mask=None) -> nx.Tensor:
    """Velocity-prediction loss ``mean |v_hat - (eps - Z)|^2``."""
    v_hat = _batched(v_hat)
    Z, eps = np.asarray(Z, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if Z.shape != eps.shape:
        raise ShapeError(f"loss_vpred: Z {Z.shape} vs eps {eps.shape}")
    target = _batched(eps - Z)
    if v_hat.shape != target.shape:
        raise ShapeError(f"loss_vpred: prediction {v_hat.shape} vs target {target.shape}")
    return nx.mean(_masked_sq_mean(nx.sub(v_hat, target), token_mask))


def zpred_to_velocity(Z_hat, Z_tau, tau) -> np.ndarray:
    """Velocity implied by a clean-target estimate: ``(Z_tau - Z_hat) / tau``."""
    Z_hat = np.asarray(Z_hat, dtype=np.float64)
    Z_tau = np.asarray(Z_tau, dtype=np.float64)
    if Z_hat.shape != Z_tau.shape:
        raise ShapeError(f"zpred_to_velocity: {Z_hat.shape} vs {Z_tau.shape}")
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t <= 0):
        raise ValidationError("zpred_to_velocity: tau must be > 0")
    return (Z_tau - Z_hat) / _tau_column(t, Z_hat.ndim)


def ode_solve(predictor: Predictor, Z_init, cfg: SolverConfig, tau_end=None,
              parameterization: str = "z") -> np.ndarray:
    """Integrate the flow ODE from ``cfg.tau_start`` down to ``tau_end``.

    ``predictor(Z_tau, tau_vec)`` returns a clean-target estimate (``"z"``) or
    a velocity (``"v"``). ``tau_end`` may be a per-sample array (it overrides
    ``cfg.tau_end``); the grid is uniform per sample with ``cfg.steps`` steps.
    For z-prediction, a step that lands on ``tau = 0`` is replaced by the
    assignment ``Z <- Z_hat`` so the ``1/tau`` singularity is never touched.
    """
    if parameterization not in ("z", "v"):
        raise ValidationError(f"unknown parameterization {parameterization!r}")
    Z = np.array(Z_init, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise NonFiniteError("ode_solve: non-finite initial state")
    B = Z.shape[0]
    end = np.broadcast_to(np.asarray(cfg.tau_end if tau_end is None else tau_end, dtype=np.float64),
                          (B,))
    if np.any(end < 0) or np.any(end > cfg.tau_start):
        raise ValidationError("ode_solve: tau_end must lie in [0, tau_start]")
    if np.all(end == cfg.tau_start):
        return Z
    start = np.full(B, cfg.tau_start)
    grid = [start + (end - start) * j / cfg.steps for j in range(cfg.steps + 1)]
    for j in range(cfg.steps):
        t_now, t_next = grid[j], grid[j + 1]
        active = t_now > t_next
        if not np.any(active):
            continue
        out = np.asarray(predictor(Z, t_now), dtype=np.float64)
        if parameterization == "v":
            Z = Z + _tau_column(t_next - t_now, Z.ndim) * out
        else:
            safe = np.where(t_now > 0, t_now, 1.0)
            vel = (Z - out) / _tau_column(safe, Z.ndim)
            stepped = Z + _tau_column(t_next - t_now, Z.ndim) * vel
            land = _tau_column((t_next == 0) & active, Z.ndim)
            Z = np.where(land, out, stepped)
        if not np.all(np.isfinite(Z)):
            raise NonFiniteError(f"ode_solve: non-finite state at step {j}")
    return Z


def latent_snr(Z_hat, Z) -> float:
    """``10 log10(|Z|^2 / |Z_hat - Z|^2)`` in dB, capped at +120 dB."""
    Z_hat = np.asarray(Z_hat, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Z_hat.shape != Z.shape:
        raise ShapeError(f"latent_snr: {Z_hat.shape} vs {Z.shape}")
    signal = float(np.sum(Z * Z))
    if signal == 0.0:
        raise ValidationError("latent_snr: target is all zero")
    noise = float(np.sum((Z_hat - Z) ** 2))
    if noise == 0.0 or signal / noise > 10 ** (SNR_CAP_DB / 10):
        return SNR_CAP_DB
    return 10.0 * np.log10(signal / noise)
