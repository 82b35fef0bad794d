"""Desk-scale experiments: z- vs v-prediction latent SNR, and the flow-forcing ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .curriculum import (Dataset, TrainConfig, AdamW, clip_gradients, sample_stage1_batch,
                         train_stage1, train_stage2)
from .flowformer import ConditionTokens, ModelConfig, forward, init_params
from .flowmatch import SolverConfig, corrupt, latent_snr, loss_s1, loss_vpred, ode_solve
from .rollout import RolloutPlan, flow_chunk_fn, rollout
from .toyworld import WorldConfig, generate_trajectory

log = logging.getLogger(__name__)

HELDOUT_SEED_BASE = 1_000_000


# --------------------------------------------------------------- SNR study

@dataclass
class SnrResult:
    rows: list[dict] = field(default_factory=list)           # iteration, parameterization, dim, snr_db
    batch_hashes: dict[tuple[str, int], list[str]] = field(default_factory=dict)


def _snr_eval(params, mcfg, batch, grid, parameterization, steps):
    k, m = mcfg.k, mcfg.m
    cond = ConditionTokens(batch.cond, tuple(range(k)))

    def predict(z, tau):
        return forward(params, mcfg, z, tau, cond, range(k, k + m), grid).data

    z0 = ode_solve(predict, batch.eps, SolverConfig(steps=steps), parameterization=parameterization)
    return latent_snr(z0, batch.target)


def run_snr_arm(world: WorldConfig, mcfg: ModelConfig, tcfg: TrainConfig, parameterization: str,
                iters: int, log_every: int, n_episodes: int = 32, frames: int = 12,
                eval_batch: int = 16, steps: int = 20):
    """Train one arm; returns ``([(iteration, snr_db)], [batch digests])``."""
    data = Dataset.generate(world, range(n_episodes), frames)
    evb = sample_stage1_batch(data, np.random.default_rng(tcfg.seed + 7), eval_batch, mcfg.k, mcfg.m)
    params = init_params(mcfg, world.d, world.n_tokens, tcfg.seed)
    opt = AdamW(tcfg.lr, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps, tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    k, m = mcfg.k, mcfg.m
    curve = [(0, _snr_eval(params, mcfg, evb, world.grid, parameterization, steps))]
    hashes = []
    for it in range(1, iters + 1):
        batch = sample_stage1_batch(data, rng, tcfg.batch_stage1, k, m)
        hashes.append(batch.digest())
        z_tau = corrupt(batch.target, batch.eps, batch.tau)
        with nx.Graph() as g:
            leaves = {n: g.leaf(n, a) for n, a in params.items()}
            out = forward(leaves, mcfg, z_tau, batch.tau, ConditionTokens(batch.cond, tuple(range(k))),
                          range(k, k + m), world.grid)
            loss = (loss_s1(out, batch.target, batch.tau) if parameterization == "z"
                    else loss_vpred(out, batch.target, batch.eps))
        grads, _ = clip_gradients(nx.backward(g, loss), tcfg.grad_clip_l2 if tcfg.clip else None)
        opt.step(params, grads)
        if it % log_every == 0 or it == iters:
            curve.append((it, _snr_eval(params, mcfg, evb, world.grid, parameterization, steps)))
            log.info("snr %s d=%d it=%d %.2f dB", parameterization, world.d, it, curve[-1][1])
    return curve, hashes


def run_snr_study(world: WorldConfig, mcfg: ModelConfig, tcfg: TrainConfig, dims, iters: int,
                  log_every: int, params=("z", "v"), **kw) -> SnrResult:
    result = SnrResult()
    for dim in dims:
        w = replace(world, d=int(dim))
        for p in params:
            curve, hashes = run_snr_arm(w, mcfg, tcfg, p, iters, max(1, log_every), **kw)
            result.batch_hashes[(p, int(dim))] = hashes
            result.rows.extend({"iteration": it, "parameterization": p, "dim": int(dim), "snr_db": float(s)}
                               for it, s in curve)
    return result


# ------------------------------------------------------ flow-forcing ablation

def horizon_mse(params, mcfg: ModelConfig, world: WorldConfig, seeds, horizon: int,
                steps: int = 20, seed: int = 0) -> float:
    """Mean latent MSE of the frame ``horizon`` steps past a k-frame context."""
    k = mcfg.k
    plan = RolloutPlan(k=k, m=mcfg.m, stride=1, horizon=horizon, steps=steps, seed=seed)
    chunk = flow_chunk_fn(params, mcfg, world.grid, steps)
    errs = []
    for s in seeds:
        traj = generate_trajectory(world, s, k + horizon)
        pred = rollout(chunk, traj.states[:k], plan)
        errs.append(float(np.mean((pred[-1].tokens - traj.states[k + horizon - 1].tokens) ** 2)))
    return float(np.mean(errs))


@dataclass
class AblationResult:
    mse: dict[str, float]
    logs: dict[str, list[dict]]


def run_forcing_ablation(world: WorldConfig, mcfg: ModelConfig, tcfg: TrainConfig,
                         horizon: int = 8, n_heldout: int = 20, arms=None,
                         rollout_steps: int = 20) -> AblationResult:
    """Compare Stage-1-only, Stage-1 + linear-lambda Stage 2 and static-lambda arms.

    Every arm spends ``steps_stage1 + steps_stage2`` optimizer steps; the
    Stage-1-only arm spends all of them on teacher forcing.
    """
    arms = arms or {"stage1_only": None, "curriculum": "linear", "static_0.7": 0.7}
    data = Dataset.generate(world, range(tcfg.n_episodes), tcfg.episode_frames)
    heldout = range(HELDOUT_SEED_BASE, HELDOUT_SEED_BASE + n_heldout)
    init = init_params(mcfg, world.d, world.n_tokens, tcfg.seed)
    base, log1 = train_stage1(init, mcfg, tcfg, data)
    mse, logs = {}, {}
    for name, schedule in arms.items():
        if schedule is None:
            params, extra = train_stage1(base, mcfg, replace(tcfg, seed=tcfg.seed + 101), data,
                                         steps=tcfg.steps_stage2)
        else:
            params, extra = train_stage2(base, mcfg, replace(tcfg, lambda_schedule=schedule), data)
        logs[name] = log1 + extra
        mse[name] = horizon_mse(params, mcfg, world, heldout, horizon, rollout_steps, tcfg.seed)
        log.info("ablation %s: horizon-%d latent MSE %.5f", name, horizon, mse[name])
    return AblationResult(mse, logs)
