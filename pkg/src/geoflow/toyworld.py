"""Synthetic latent world standing in for a frozen geometry encoder/decoder.

Each frame has an intrinsic state ``s`` in R^q (q = 8 by default):

* ``s[0:3]`` are the episode's constant camera twist rates
  (yaw rate in rad/frame, forward and lateral speed in scene units/frame);
* ``s[3:8]`` are coupled oscillators, ``x_{t+1} = M x_t - x_{t-1}`` with
  ``M = Q diag(2 cos w) Q^T``. Their closed-form solution is used so that
  regenerating an episode is bit-stable.

Tokens are ``g(s) = A2 tanh(A1 s + b1) + b2`` reshaped to ``N x d``. ``A1`` has
orthogonal columns of equal norm, so ``A1^T (atanh(u) - b1) / |A1|^2`` inverts
the first map and a precomputed pseudo-inverse of ``A2`` inverts the second.

Decoding is joint over a whole sequence: the decoded scene scale is the median
over frames of ``exp(0.2 * s[3])``, so appending frames can change the geometry
decoded for earlier ones.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError

N_SPECIAL = 5
DEPTH_OFFSET = 1.0
SCALE_GAIN = 0.2
FOCAL = 1.2
EMBED_GAIN = 2.5


@dataclass(frozen=True)
class WorldConfig:
    d: int = 256
    n_patch: int = 16
    n_special: int = N_SPECIAL
    manifold_dim: int = 8
    seed: int = 0
    fps_dt: float = 0.1
    hidden: int = 32

    def __post_init__(self):
        side = int(round(np.sqrt(self.n_patch)))
        if side * side != self.n_patch or self.n_patch < 1:
            raise ValidationError(f"world.n_patch={self.n_patch} is not a perfect square")
        if self.n_special != N_SPECIAL:
            raise ValidationError(f"world.n_special must be {N_SPECIAL}")
        if self.manifold_dim != 8:
            raise ValidationError("world.manifold_dim is fixed at 8 (3 twist + 5 oscillator dims)")
        if self.d < self.manifold_dim:
            raise ValidationError(f"world.d={self.d} < manifold_dim={self.manifold_dim}")
        if not self.manifold_dim <= self.hidden <= self.n_tokens * self.d:
            raise ValidationError(f"world.hidden={self.hidden} out of range")
        if self.fps_dt <= 0:
            raise ValidationError("world.fps_dt must be positive")

    @property
    def n_tokens(self) -> int:
        return self.n_special + self.n_patch

    @property
    def grid(self) -> int:
        return int(round(np.sqrt(self.n_patch)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeometryState:
    tokens: np.ndarray          # (N, d)
    frame_index: int


@dataclass
class Trajectory:
    states: list[GeometryState]
    depths: np.ndarray           # (T, H, W)
    points: np.ndarray           # (T, n_patch, 3), world frame
    rotations: np.ndarray        # (T, 3, 3), world-to-camera
    translations: np.ndarray     # (T, 3)
    intrinsic_state: np.ndarray  # (T, q)

    @property
    def tokens(self) -> np.ndarray:
        return np.stack([s.tokens for s in self.states])

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class _Embedding:
    a1: np.ndarray       # (hidden, q), orthogonal columns of norm EMBED_GAIN
    b1: np.ndarray       # (hidden,)
    a2: np.ndarray       # (N*d, hidden)
    b2: np.ndarray       # (N*d,)
    a2_pinv: np.ndarray  # (hidden, N*d)
    freqs: np.ndarray    # (5,) rad/frame
    modes: np.ndarray    # (5, 5) orthogonal coupling basis
    depth_w: np.ndarray  # (n_patch, q)


def _rng(*keys: int) -> np.random.Generator:
    digest = hashlib.sha256(b"geoflow" + b"".join(int(k).to_bytes(8, "little", signed=True)
                                                  for k in keys)).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@lru_cache(maxsize=32)
def _embedding(cfg: WorldConfig) -> _Embedding:
    rng = _rng(cfg.seed, -1)
    q, h, D = cfg.manifold_dim, cfg.hidden, cfg.n_tokens * cfg.d
    a1, r = np.linalg.qr(rng.standard_normal((h, q)))
    a1 = EMBED_GAIN * a1 * np.sign(np.diag(r))
    b1 = 0.3 * rng.standard_normal(h)
    a2 = rng.standard_normal((D, h)) * (1.6 / np.sqrt(h))
    b2 = 0.5 * rng.standard_normal(D)
    freqs = rng.uniform(0.1, 0.5, size=5)
    modes, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    depth_w = 0.8 * rng.standard_normal((cfg.n_patch, q))
    emb = _Embedding(a1, b1, a2, b2, np.linalg.pinv(a2), freqs, modes, depth_w)
    for arr in (emb.a1, emb.b1, emb.a2, emb.b2, emb.a2_pinv, emb.freqs, emb.modes, emb.depth_w):
        arr.setflags(write=False)
    return emb


def coupling_matrix(cfg: WorldConfig) -> np.ndarray:
    """``M`` of the oscillator recurrence ``x_{t+1} = M x_t - x_{t-1}``."""
    e = _embedding(cfg)
    return e.modes @ np.diag(2 * np.cos(e.freqs)) @ e.modes.T


def lipschitz_bound(cfg: WorldConfig) -> float:
    """Product of the operator norms of the two affine maps of ``g``."""
    e = _embedding(cfg)
    return float(np.linalg.norm(e.a1, 2) * np.linalg.norm(e.a2, 2))


def intrinsic_states(cfg: WorldConfig, episode_seed: int, T: int) -> np.ndarray:
    e = _embedding(cfg)
    rng = _rng(cfg.seed, episode_seed)
    rates = np.array([rng.uniform(-0.08, 0.08), rng.uniform(0.2, 0.5), rng.uniform(-0.15, 0.15)])
    amp = rng.uniform(0.5, 1.0, size=5)
    phase = rng.uniform(0, 2 * np.pi, size=5)
    t = np.arange(T)[:, None]
    modal = amp * np.cos(e.freqs * t + phase)         # (T, 5)
    osc = modal @ e.modes.T
    s = np.empty((T, cfg.manifold_dim))
    s[:, :3] = rates
    s[:, 3:] = osc
    return s


def embed(cfg: WorldConfig, s: np.ndarray) -> np.ndarray:
    """``g(s)`` for one state ``(q,)`` or a stack ``(..., q)``; returns ``(..., N, d)``."""
    e = _embedding(cfg)
    s = np.asarray(s, dtype=np.float64)
    u = np.tanh(s @ e.a1.T + e.b1)
    flat = u @ e.a2.T + e.b2
    return flat.reshape(s.shape[:-1] + (cfg.n_tokens, cfg.d))


def invert(cfg: WorldConfig, tokens: np.ndarray) -> np.ndarray:
    """Left-inverse of :func:`embed`; ``(..., N, d) -> (..., q)``.

    Off-manifold tokens are projected; tanh outputs are clipped just inside
    (-1, 1) so arbitrary inputs still decode to something finite.
    """
    e = _embedding(cfg)
    tokens = np.asarray(tokens, dtype=np.float64)
    flat = tokens.reshape(tokens.shape[:-2] + (cfg.n_tokens * cfg.d,))
    u = (flat - e.b2) @ e.a2_pinv.T
    u = np.clip(u, -1 + 1e-12, 1 - 1e-12)
    return (np.arctanh(u) - e.b1) @ e.a1 / EMBED_GAIN ** 2


def manifold_residual(cfg: WorldConfig, tokens: np.ndarray) -> float:
    """Squared distance from ``tokens (..., N, d)`` to the affine image of ``g``'s
    last map, summed over frames."""
    e = _embedding(cfg)
    flat = np.asarray(tokens, dtype=np.float64).reshape(-1, e.b2.size) - e.b2
    proj = (flat @ e.a2_pinv.T) @ e.a2.T
    return float(np.sum((flat - proj) ** 2))


def encode_frame(cfg: WorldConfig, s: np.ndarray, frame_index: int = 0) -> GeometryState:
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (cfg.manifold_dim,) or not np.all(np.isfinite(s)):
        raise ValidationError(f"intrinsic state must be a finite {cfg.manifold_dim}-vector")
    return GeometryState(embed(cfg, s), frame_index)


def scale_statistic(s: np.ndarray) -> np.ndarray:
    return np.exp(SCALE_GAIN * np.asarray(s)[..., 3])


def _softplus(x):
    return np.logaddexp(0.0, x)


def _rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _camera_to_world(rates: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Pose after ``t`` constant-twist steps from the origin."""
    yaw, fwd, lat = rates
    step = np.array([lat, 0.0, fwd])
    centre = np.zeros(3)
    for j in range(t):
        centre = centre + _rot_y(yaw * j) @ step
    return _rot_y(yaw * t), centre


def _pixel_rays(cfg: WorldConfig) -> np.ndarray:
    n = cfg.grid
    c = (np.arange(n) + 0.5) / n - 0.5
    xs, ys = np.meshgrid(c, c)          # row index -> y, col index -> x
    return np.stack([xs.ravel() / FOCAL, ys.ravel() / FOCAL, np.ones(n * n)], axis=1)


def readout(cfg: WorldConfig, s: np.ndarray, frame_indices, scale: float):
    """Closed-form geometry of states ``s (T, q)`` at a shared scene scale."""
    e = _embedding(cfg)
    s = np.asarray(s, dtype=np.float64)
    T = s.shape[0]
    depth = scale * (DEPTH_OFFSET + _softplus(s @ e.depth_w.T))     # (T, n_patch)
    rays = _pixel_rays(cfg)
    rots = np.empty((T, 3, 3))
    trans = np.empty((T, 3))
    points = np.empty((T, cfg.n_patch, 3))
    for i, t in enumerate(frame_indices):
        r_cw, centre = _camera_to_world(s[i, :3], int(t))
        centre = scale * centre
        rots[i] = r_cw.T
        trans[i] = -r_cw.T @ centre
        points[i] = (depth[i][:, None] * rays) @ r_cw.T + centre
    return depth.reshape(T, cfg.grid, cfg.grid), points, rots, trans


def decode_states(cfg: WorldConfig, states):
    """Joint decode of a sequence of states into (depths, points, rotations, translations)."""
    states = list(states)
    if not states:
        raise ValidationError("decode_states: empty sequence")
    for st in states:
        if st.tokens.shape != (cfg.n_tokens, cfg.d):
            raise ValidationError(
                f"state {st.frame_index} has shape {st.tokens.shape}, expected {(cfg.n_tokens, cfg.d)}")
    s_hat = invert(cfg, np.stack([st.tokens for st in states]))
    scale = float(np.median(scale_statistic(s_hat)))
    return readout(cfg, s_hat, [st.frame_index for st in states], scale)


def generate_trajectory(cfg: WorldConfig, episode_seed: int, T: int) -> Trajectory:
    if T < 2:
        raise ValidationError(f"generate_trajectory needs T >= 2, got {T}")
    s = intrinsic_states(cfg, episode_seed, T)
    tokens = embed(cfg, s)
    states = [GeometryState(tokens[t], t) for t in range(T)]
    scale = float(np.median(scale_statistic(s)))
    depths, points, rots, trans = readout(cfg, s, range(T), scale)
    return Trajectory(states, depths, points, rots, trans, s)
