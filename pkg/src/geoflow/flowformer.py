"""Flow transformer that predicts the clean latent chunk (z-prediction).

The network is a stack of dual-stream blocks, where the noisy chunk attends
over ``[itself; clean condition]``, followed by single-stream blocks doing
self-attention within the chunk. Flow time enters every block through adaLN
(shift, scale, gate) computed from a sinusoidal time embedding. Positions are
injected with 3-axis rotary embeddings over (frame, row, col).

Parameters are a flat ``dict[str, ndarray]``; ``forward`` accepts either raw
arrays (no-grad) or graph leaves from :class:`~geoflow.numerics.Graph`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import NonFiniteError, ShapeError, ValidationError

TIME_FREQS = 256
TIME_SCALE = 1000.0
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d_model: int | None = None     # None -> latent width of the world
    n_heads: int = 4
    L_d: int = 2
    L_s: int = 2
    mlp_ratio: int = 4
    k: int = 2
    m: int = 2
    rope_base: float = 10000.0
    predict_registers: bool = True

    def __post_init__(self):
        if self.L_d < 1 or self.L_s < 1:
            raise ValidationError("model.L_d and model.L_s must be >= 1")
        if self.k < 1 or self.m < 1:
            raise ValidationError("model.k and model.m must be >= 1")
        if self.n_heads < 1 or self.mlp_ratio < 1:
            raise ValidationError("model.n_heads and model.mlp_ratio must be >= 1")
        if self.d_model is not None:
            self.check_width(self.d_model)

    def check_width(self, width: int) -> None:
        if width % self.n_heads:
            raise ValidationError(f"model.d_model={width} not divisible by n_heads={self.n_heads}")
        if (width // self.n_heads) % 2:
            raise ValidationError(f"head_dim={width // self.n_heads} must be even for rotary pairs")

    def width(self, latent_dim: int) -> int:
        w = self.d_model if self.d_model is not None else latent_dim
        self.check_width(w)
        return w

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConditionTokens:
    tokens: np.ndarray            # (B, k*N, d) or (k*N, d)
    frame_indices: tuple[int, ...]

    def __post_init__(self):
        fi = tuple(int(f) for f in self.frame_indices)
        if any(b <= a for a, b in zip(fi, fi[1:])):
            raise ValidationError(f"condition frame indices {fi} must be strictly increasing")
        object.__setattr__(self, "frame_indices", fi)


def block_names(cfg: ModelConfig) -> list[str]:
    return [f"dual{i}" for i in range(cfg.L_d)] + [f"single{i}" for i in range(cfg.L_s)]


# ------------------------------------------------------------------- params

def init_params(cfg: ModelConfig, latent_dim: int, n_tokens: int, seed: int = 0,
                zero_init: bool = True) -> dict[str, np.ndarray]:
    """Initial parameters.

    With ``zero_init`` every adaLN modulation map and the output projection
    start at zero, so each block is an identity residual and the network
    output is exactly 0. ``zero_init=False`` draws those from N(0, 0.3^2) and
    widens the timestep MLP to N(0, 0.1^2); this is the gradient-check init,
    where all-zero or near-zero paths give finite differences nothing to measure.
    """
    D = cfg.width(latent_dim)
    hidden = cfg.mlp_ratio * D
    rng = np.random.default_rng(seed)

    def xavier(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    time_std = 0.02 if zero_init else 0.1

    def zeros_or_small(*shape):
        return np.zeros(shape) if zero_init else 0.3 * rng.standard_normal(shape)

    p: dict[str, np.ndarray] = {
        "in.w": xavier(latent_dim, D),
        "in.b": np.zeros(D),
        "slot": 0.02 * rng.standard_normal((n_tokens, D)),
        "time.w1": time_std * rng.standard_normal((2 * TIME_FREQS, D)),
        "time.b1": np.zeros(D),
        "time.w2": time_std * rng.standard_normal((D, D)),
        "time.b2": np.zeros(D),
    }
    for name in block_names(cfg):
        p[f"{name}.mod.w"] = zeros_or_small(D, 6 * D)
        p[f"{name}.mod.b"] = zeros_or_small(6 * D)
        for proj in ("q", "k", "v", "o"):
            p[f"{name}.{proj}.w"] = xavier(D, D)
            if proj != "k":     # a key bias only shifts each score row by a near-constant
                p[f"{name}.{proj}.b"] = np.zeros(D)
        p[f"{name}.mlp1.w"] = xavier(D, hidden)
        p[f"{name}.mlp1.b"] = np.zeros(hidden)
        p[f"{name}.mlp2.w"] = xavier(hidden, D)
        p[f"{name}.mlp2.b"] = np.zeros(D)
    p["final.mod.w"] = zeros_or_small(D, 2 * D)
    p["final.mod.b"] = zeros_or_small(2 * D)
    p["out.w"] = zeros_or_small(D, latent_dim)
    p["out.b"] = zeros_or_small(latent_dim)
    return p


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(a).size for a in params.values()))


# ------------------------------------------------------------ building blocks

def _linear(x, params, name):
    out = nx.matmul(x, params[f"{name}.w"])
    bias = params.get(f"{name}.b")
    return out if bias is None else nx.add(out, bias)


def sinusoidal(tau: np.ndarray) -> np.ndarray:
    freqs = np.exp(-np.log(10000.0) * np.arange(TIME_FREQS) / TIME_FREQS)
    args = TIME_SCALE * np.asarray(tau, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _check_tau(tau) -> np.ndarray:
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    if tau.ndim != 1 or np.any(tau < 0) or np.any(tau > 1) or not np.all(np.isfinite(tau)):
        raise ValidationError(f"flow time must lie in [0, 1], got {tau}")
    return tau


def time_features(params, tau) -> nx.Tensor:
    """Shared time embedding ``(B, D)``: sinusoid -> linear -> SiLU -> linear."""
    tau = _check_tau(tau)
    h = nx.silu(nx.add(nx.matmul(sinusoidal(tau), params["time.w1"]), params["time.b1"]))
    return nx.add(nx.matmul(h, params["time.w2"]), params["time.b2"])


def modulation(params, prefix: str, temb, parts: int) -> list[nx.Tensor]:
    """Split ``SiLU(temb) @ W + b`` into ``parts`` tensors of shape ``(B, 1, D)``."""
    mod = _linear(nx.silu(temb), params, f"{prefix}.mod")
    B, total = mod.shape
    D = total // parts
    return [nx.reshape(nx.slice_axis(mod, -1, i * D, (i + 1) * D), (B, 1, D)) for i in range(parts)]


def time_embed(params, cfg: ModelConfig, tau) -> dict[str, list[nx.Tensor]]:
    """Per-block adaLN modulation for flow time(s) ``tau``.

    Dual/single blocks get ``[shift1, scale1, gate1, shift2, scale2, gate2]``;
    ``"final"`` gets ``[shift, scale]``.
    """
    temb = time_features(params, tau)
    mods = {name: modulation(params, name, temb, 6) for name in block_names(cfg)}
    mods["final"] = modulation(params, "final", temb, 2)
    return mods


def adaln(x, shift, scale) -> nx.Tensor:
    """``layer_norm(x) * (1 + scale) + shift`` over the channel axis."""
    return nx.add(nx.mul(nx.layer_norm(x, LN_EPS), nx.add(scale, 1.0)), shift)


# -------------------------------------------------------------------- rotary

def axis_pairs(head_dim: int) -> tuple[int, int, int]:
    """Rotary pair counts for the (frame, row, col) axis groups.

    Pairs are split into thirds; the remainder goes to the frame axis.
    """
    pairs = head_dim // 2
    third = pairs // 3
    return pairs - 2 * third, third, third


def token_positions(frames: Sequence[int], grid: int, n_special: int = 5) -> np.ndarray:
    """``(len(frames) * N, 3)`` (frame, row, col) triples.

    Special tokens sit at (frame, 0, 0); patch tokens at (frame, r + 1, c + 1).
    """
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    per_frame = []
    for f in frames:
        pos = np.zeros((n_special + grid * grid, 3))
        pos[:, 0] = f
        pos[n_special:, 1] = rows + 1
        pos[n_special:, 2] = cols + 1
        per_frame.append(pos)
    return np.concatenate(per_frame, axis=0)


@lru_cache(maxsize=64)
def _pair_swap(head_dim: int) -> np.ndarray:
    # (x @ P)[2j] = -x[2j+1], (x @ P)[2j+1] = x[2j]
    P = np.zeros((head_dim, head_dim))
    for j in range(head_dim // 2):
        P[2 * j + 1, 2 * j] = -1.0
        P[2 * j, 2 * j + 1] = 1.0
    return P


def rope_tables(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``(T, head_dim)`` for the given positions."""
    angles = np.zeros((positions.shape[0], head_dim // 2))
    col = 0
    for axis, n in enumerate(axis_pairs(head_dim)):
        if n == 0:
            continue
        inv_freq = base ** (-np.arange(n) / n)
        angles[:, col:col + n] = positions[:, axis:axis + 1] * inv_freq
        col += n
    angles = np.repeat(angles, 2, axis=1)
    return np.cos(angles), np.sin(angles)


def rope_apply(x, cos: np.ndarray, sin: np.ndarray) -> nx.Tensor:
    """Rotate adjacent channel pairs of ``x (..., T, head_dim)``."""
    x = nx.as_tensor(x)
    P = _pair_swap(x.shape[-1])
    return nx.add(nx.mul(x, cos), nx.mul(nx.matmul(x, P), sin))


def _heads(x, n_heads):
    B, T, D = x.shape
    return nx.transpose(nx.reshape(x, (B, T, n_heads, D // n_heads)), (0, 2, 1, 3))


def attention(q, k, v, n_heads: int, q_rope, k_rope) -> nx.Tensor:
    """Multi-head softmax attention with rotary positions on q and k."""
    B, Tq, D = q.shape
    hd = D // n_heads
    qh = rope_apply(_heads(q, n_heads), *q_rope)
    kh = rope_apply(_heads(k, n_heads), *k_rope)
    vh = _heads(v, n_heads)
    w = nx.softmax(nx.scale(nx.matmul(qh, nx.transpose(kh)), 1.0 / np.sqrt(hd)))
    out = nx.matmul(w, vh)
    return nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (B, Tq, D))


def _mlp_sublayer(params, name, z, shift, scale, gate):
    h = adaln(z, shift, scale)
    h = _linear(nx.gelu(_linear(h, params, f"{name}.mlp1")), params, f"{name}.mlp2")
    return nx.add(z, nx.mul(gate, h))


def dual_block(params, name: str, z, cond, mods, n_heads: int, chunk_rope, kv_rope) -> nx.Tensor:
    """Chunk queries attend over ``[adaLN(z); cond]``; ``cond`` is read, never written."""
    shift1, scale1, gate1, shift2, scale2, gate2 = mods
    h = adaln(z, shift1, scale1)
    kv = nx.concat([h, cond], axis=-2)
    a = attention(_linear(h, params, f"{name}.q"), _linear(kv, params, f"{name}.k"),
                  _linear(kv, params, f"{name}.v"), n_heads, chunk_rope, kv_rope)
    z = nx.add(z, nx.mul(gate1, _linear(a, params, f"{name}.o")))
    return _mlp_sublayer(params, name, z, shift2, scale2, gate2)


def single_block(params, name: str, z, mods, n_heads: int, chunk_rope) -> nx.Tensor:
    """Self-attention within the chunk; Q, K and V all come from ``adaLN(z)``."""
    shift1, scale1, gate1, shift2, scale2, gate2 = mods
    h = adaln(z, shift1, scale1)
    a = attention(_linear(h, params, f"{name}.q"), _linear(h, params, f"{name}.k"),
                  _linear(h, params, f"{name}.v"), n_heads, chunk_rope, chunk_rope)
    z = nx.add(z, nx.mul(gate1, _linear(a, params, f"{name}.o")))
    return _mlp_sublayer(params, name, z, shift2, scale2, gate2)


# ------------------------------------------------------------------- forward

def _embed_tokens(params, x, frames: int):
    h = nx.matmul(x, params["in.w"])
    slot = nx.concat([params["slot"]] * frames, axis=0) if frames > 1 else params["slot"]
    return nx.add(nx.add(h, params["in.b"]), slot)


def _batched(a) -> np.ndarray | nx.Tensor:
    if isinstance(a, nx.Tensor):
        return a
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def forward(params, cfg: ModelConfig, z_noisy, tau, cond: ConditionTokens,
            chunk_frames: Sequence[int], grid: int) -> nx.Tensor:
    """Predict the clean chunk ``(B, m*N, d)`` from a noisy chunk and clean context.

    ``chunk_frames`` are the frame indices of the chunk; they must all come
    after the condition's frames. Rotary angles depend only on frame
    differences, so callers may pass window-relative indices.
    """
    chunk_frames = tuple(int(f) for f in chunk_frames)
    if min(chunk_frames) <= max(cond.frame_indices):
        raise ValidationError(
            f"condition frames {cond.frame_indices} must precede chunk frames {chunk_frames}")
    z = _batched(z_noisy)
    c = _batched(cond.tokens)
    n_tokens = 5 + grid * grid
    if z.shape[1] != len(chunk_frames) * n_tokens or c.shape[1] != len(cond.frame_indices) * n_tokens:
        raise ShapeError(f"forward: chunk {z.shape} / condition {c.shape} do not match "
                         f"{len(chunk_frames)}+{len(cond.frame_indices)} frames of {n_tokens} tokens")
    if z.shape[0] != c.shape[0] or z.shape[2] != c.shape[2]:
        raise ShapeError(f"forward: chunk {z.shape} and condition {c.shape} disagree")
    if not np.all(np.isfinite(nx.as_tensor(z).data)):
        raise NonFiniteError("forward: non-finite noisy chunk")
    tau = _check_tau(tau)
    if tau.shape[0] == 1 and z.shape[0] > 1:
        tau = np.repeat(tau, z.shape[0])

    D = params["in.w"].shape[1]
    hd = D // cfg.n_heads
    chunk_pos = token_positions(chunk_frames, grid)
    kv_pos = np.concatenate([chunk_pos, token_positions(cond.frame_indices, grid)])
    chunk_rope = rope_tables(chunk_pos, hd, cfg.rope_base)
    kv_rope = rope_tables(kv_pos, hd, cfg.rope_base)

    mods = time_embed(params, cfg, tau)
    x = _embed_tokens(params, z, len(chunk_frames))
    c_emb = _embed_tokens(params, c, len(cond.frame_indices))
    for i, name in enumerate(block_names(cfg)):
        try:
            if name.startswith("dual"):
                x = dual_block(params, name, x, c_emb, mods[name], cfg.n_heads, chunk_rope, kv_rope)
            else:
                x = single_block(params, name, x, mods[name], cfg.n_heads, chunk_rope)
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite activation in block {i} ({name}): {exc}") from exc
    shift, scale = mods["final"]
    return _linear(adaln(x, shift, scale), params, "out")


def make_predictor(params, cfg: ModelConfig, cond: ConditionTokens, chunk_frames, grid: int):
    """Bind parameters and condition into ``predict(z_tau, tau) -> ndarray`` (no graph)."""
    frozen = {k: np.asarray(v.data if isinstance(v, nx.Tensor) else v) for k, v in params.items()}

    def predict(z_tau: np.ndarray, tau: np.ndarray) -> np.ndarray:
        return forward(frozen, cfg, z_tau, tau, cond, chunk_frames, grid).data

    return predict
