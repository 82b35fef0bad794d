"""Geometry evaluation: depth errors, similarity alignment, FPS, Chamfer and pose errors.

Conventions: Chamfer distance is the mean of accuracy and completeness, each a
mean of unsquared Euclidean nearest-neighbour distances. Poses are
world-to-camera ``(R, t)``; trajectory metrics work on camera centres
``-R^T t`` after similarity alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

CHAMFER_CONVENTION = "chamfer = (accuracy + completeness) / 2, unsquared Euclidean NN distances"


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual: float = 0.0     # RMS of aligned residuals

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def _cloud(points, name="cloud") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ShapeError(f"{name}: expected (n>=1, 3) points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValidationError(f"{name}: non-finite coordinates")
    return pts


def absrel_delta1(pred, gt, threshold: float = 1.25) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if gt.size == 0:
        raise ValidationError("empty depth mask")
    if np.any(gt <= 0):
        raise ValidationError("ground-truth depth must be strictly positive")
    absrel = float(np.mean(np.abs(pred - gt) / gt))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pred > 0, np.maximum(pred / gt, gt / pred), np.inf)
    return absrel, float(np.mean(ratio < threshold))


def umeyama_align(source, target, with_scale: bool = True,
                  allow_degenerate: bool = False) -> SimilarityTransform:
    """Least-squares ``s R x + t ~ y`` with a proper rotation (det = +1)."""
    x = _cloud(source, "source")
    y = _cloud(target, "target")
    if x.shape != y.shape:
        raise ShapeError(f"umeyama: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n < 3 and not allow_degenerate:
        raise ValidationError("umeyama needs at least 3 correspondences")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sv = np.linalg.svd(xc, compute_uv=False)
    if not allow_degenerate and (sv[0] == 0 or (sv.size < 2 or sv[1] <= 1e-10 * sv[0])):
        raise ValidationError("umeyama: degenerate (collinear or coincident) source configuration")
    cov = yc.T @ xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = float(np.sum(xc * xc) / n)
    s = float(np.trace(np.diag(D) @ S) / var_x) if (with_scale and var_x > 0) else 1.0
    t = my - s * R @ mx
    res = y - (s * x @ R.T + t)
    return SimilarityTransform(s, R, t, float(np.sqrt(np.mean(np.sum(res * res, axis=1)))))


def farthest_point_sampling(cloud, count: int, start: int = 0) -> np.ndarray:
    """Greedy max-min sampling; ties go to the lowest index."""
    pts = _cloud(cloud)
    if count < 1:
        raise ValidationError("FPS count must be >= 1")
    n = pts.shape[0]
    count = min(count, n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def nearest_distances(a: np.ndarray, b: np.ndarray, block: int = 1024) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b`` (exhaustive)."""
    out = np.empty(a.shape[0])
    for i in range(0, a.shape[0], block):
        diff = a[i:i + block, None, :] - b[None, :, :]
        out[i:i + block] = np.sqrt(np.min(np.sum(diff * diff, axis=2), axis=1))
    return out


def chamfer_acc_comp(pred, gt) -> tuple[float, float, float]:
    p = _cloud(pred, "pred")
    g = _cloud(gt, "gt")
    acc = float(np.mean(nearest_distances(p, g)))
    comp = float(np.mean(nearest_distances(g, p)))
    return acc, comp, 0.5 * (acc + comp)


def camera_centres(rotations, translations) -> np.ndarray:
    R = np.asarray(rotations, dtype=np.float64)
    t = np.asarray(translations, dtype=np.float64)
    return -np.einsum("nji,nj->ni", R, t)


def _angle_deg(R: np.ndarray) -> float:
    # atan2 of (2 sin, 2 cos) keeps full precision near zero, unlike arccos
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(s, np.trace(R) - 1.0)))


def ate_rte_rre(pred_rot, pred_trans, gt_rot, gt_trans, align: bool = True):
    """(ATE, RTE, RRE): RMS centre error, RMS relative-translation error and
    mean relative-rotation angle (degrees) over consecutive frame pairs."""
    pr, pt = np.asarray(pred_rot, float), np.asarray(pred_trans, float)
    gr, gtt = np.asarray(gt_rot, float), np.asarray(gt_trans, float)
    n = pr.shape[0]
    if gr.shape[0] != n or pt.shape[0] != n or gtt.shape[0] != n:
        raise ValidationError(f"pose counts differ: {n} vs {gr.shape[0]}")
    if n < 2:
        raise ValidationError("trajectory metrics need at least 2 poses")
    c_pred = camera_centres(pr, pt)
    c_gt = camera_centres(gr, gtt)
    rot_cw_pred = np.transpose(pr, (0, 2, 1))
    rot_cw_gt = np.transpose(gr, (0, 2, 1))
    if align:
        sim = umeyama_align(c_pred, c_gt, with_scale=True, allow_degenerate=True)
        c_pred = sim.apply(c_pred)
        rot_cw_pred = sim.rotation @ rot_cw_pred
    ate = float(np.sqrt(np.mean(np.sum((c_pred - c_gt) ** 2, axis=1))))
    rte_sq, rre = [], []
    for i in range(n - 1):
        # relative motion i -> i+1 expressed in camera i
        dp = rot_cw_pred[i].T @ rot_cw_pred[i + 1]
        dg = rot_cw_gt[i].T @ rot_cw_gt[i + 1]
        tp = rot_cw_pred[i].T @ (c_pred[i + 1] - c_pred[i])
        tg = rot_cw_gt[i].T @ (c_gt[i + 1] - c_gt[i])
        rte_sq.append(float(np.sum((tp - tg) ** 2)))
        rre.append(_angle_deg(dg.T @ dp))
    return ate, float(np.sqrt(np.mean(rte_sq))), float(np.mean(rre))


def point_metrics(pred_points, gt_points, samples: int = 20000, align: bool = True):
    """Align pred to gt, FPS-subsample both, then (accuracy, completeness, chamfer)."""
    p = _cloud(pred_points, "pred")
    g = _cloud(gt_points, "gt")
    if align and p.shape == g.shape and p.shape[0] >= 3:
        p = umeyama_align(p, g, with_scale=True, allow_degenerate=True).apply(p)
    p = p[farthest_point_sampling(p, samples)]
    g = g[farthest_point_sampling(g, samples)]
    return chamfer_acc_comp(p, g)
