"""Sliding-window autoregressive forecasting and joint decoding."""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ValidationError
from .flowformer import ConditionTokens, ModelConfig, make_predictor
from .flowmatch import SolverConfig, ode_solve
from .toyworld import GeometryState, WorldConfig, decode_states

# (window of k states, noise (m*N, d)) -> predicted chunk (m, N, d)
ChunkFn = Callable[[Sequence[GeometryState], np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RolloutPlan:
    k: int = 2
    m: int = 2
    stride: int = 1
    horizon: int = 8
    steps: int = 20
    seed: int = 0
    commit: str = "first"
    deterministic_noise: bool = False

    def __post_init__(self):
        if self.k < 1 or self.m < 1:
            raise ValidationError("rollout.k and rollout.m must be >= 1")
        if not 1 <= self.stride <= self.m:
            raise ValidationError(f"rollout.stride={self.stride} must lie in [1, m={self.m}]")
        if self.horizon < 0:
            raise ValidationError("rollout.horizon must be >= 0")
        if self.commit not in ("first", "all"):
            raise ValidationError("rollout.commit must be 'first' or 'all'")
        if self.steps < 1:
            raise ValidationError("rollout.steps must be >= 1")

    @property
    def advance(self) -> int:
        """Frames committed (and window shift) per predictor call."""
        return self.m if self.commit == "all" else self.stride

    def to_dict(self) -> dict:
        return asdict(self)


def flow_chunk_fn(params, mcfg: ModelConfig, grid: int, steps: int = 20) -> ChunkFn:
    """Chunk sampler backed by the flow model: Euler from noise to ``tau = 0``."""
    k, m = mcfg.k, mcfg.m
    solver = SolverConfig(steps=steps)

    def chunk(window: Sequence[GeometryState], eps: np.ndarray) -> np.ndarray:
        tokens = np.concatenate([s.tokens for s in window], axis=0)[None]
        predict = make_predictor(params, mcfg, ConditionTokens(tokens, tuple(range(k))),
                                 range(k, k + m), grid)
        z = ode_solve(predict, eps[None], solver)[0]
        return z.reshape(m, -1, z.shape[-1])

    return chunk


def rollout(chunk_fn: ChunkFn, context: Sequence[GeometryState], plan: RolloutPlan,
            trace: list | None = None) -> list[GeometryState]:
    """Forecast ``plan.horizon`` frames after ``context``.

    Each call sees exactly the latest ``k`` frames; the first ``plan.advance``
    predicted frames are committed and the rest are discarded. When ``trace``
    is a list, the window's frame indices are appended to it per call.
    """
    context = list(context)
    if len(context) != plan.k:
        raise ValidationError(f"rollout needs exactly k={plan.k} context states, got {len(context)}")
    N, d = context[0].tokens.shape
    rng = np.random.default_rng(plan.seed)
    fixed = rng.standard_normal((plan.m * N, d)) if plan.deterministic_noise else None
    window = deque(context, maxlen=plan.k)
    out: list[GeometryState] = []
    next_frame = context[-1].frame_index + 1
    call = 0
    while len(out) < plan.horizon:
        eps = fixed if fixed is not None else rng.standard_normal((plan.m * N, d))
        if trace is not None:
            trace.append([s.frame_index for s in window])
        pred = np.asarray(chunk_fn(list(window), eps), dtype=np.float64)
        if pred.shape != (plan.m, N, d):
            raise ValidationError(f"chunk predictor returned {pred.shape}, expected {(plan.m, N, d)}")
        if not np.all(np.isfinite(pred)):
            raise NonFiniteError(f"non-finite predicted state at rollout step {call}")
        for j in range(min(plan.advance, plan.horizon - len(out))):
            state = GeometryState(pred[j].copy(), next_frame)
            next_frame += 1
            out.append(state)
            window.append(state)
        call += 1
    return out


def assemble_full(context: Sequence[GeometryState],
                  predicted: Sequence[GeometryState]) -> list[GeometryState]:
    full = list(context) + list(predicted)
    idx = [s.frame_index for s in full]
    if any(b != a + 1 for a, b in zip(idx, idx[1:])):
        raise ValidationError(f"frame indices {idx} are not contiguous and increasing")
    return full


def joint_decode(world: WorldConfig, full: Sequence[GeometryState]):
    """Decode the whole assembled trajectory at once (shared scene scale)."""
    return decode_states(world, full)
