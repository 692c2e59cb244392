"""Evaluation protocols: root-aligned and similarity-aligned position errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, DimensionError

_ORTHO_TOL = 1e-9


@dataclass
class SimilarityTransform:
    """Scale, proper rotation, and translation mapping one cloud onto another."""

    scale: float
    rotation: np.ndarray   # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.scale <= 0:
            raise DegeneracyError(f"scale must be positive, got {self.scale}")
        gram = self.rotation.T @ self.rotation
        if not np.allclose(gram, np.eye(3), atol=1e-6):
            raise DegeneracyError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise DegeneracyError("rotation determinant is not +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation


def _check_pair(pred: np.ndarray, gt: np.ndarray, ndim: int) -> None:
    if pred.shape != gt.shape:
        raise DimensionError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != ndim or pred.shape[-1] != 3:
        raise DimensionError(f"expected {ndim}-d array ending in 3, got {pred.shape}")


def mpjpe_p1(pred, gt, root_index: int = 0) -> float:
    """Mean per-joint distance after subtracting the root joint per frame."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt, 3)
    v = pred.shape[1]
    if not (0 <= root_index < v):
        raise IndexError(f"root index {root_index} out of range for {v} joints")
    pred = pred - pred[:, root_index:root_index + 1, :]
    gt = gt - gt[:, root_index:root_index + 1, :]
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def procrustes_align(pred, gt) -> tuple[SimilarityTransform, np.ndarray]:
    """Least-squares similarity alignment of one point cloud onto another.

    Returns the transform minimizing ``sum_v ||s R pred_v + t - gt_v||^2``
    and the aligned points. Reflections are corrected by flipping the
    smallest singular direction so the rotation is always proper.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt, 2)
    v = pred.shape[0]
    if v < 3:
        raise DimensionError(f"alignment needs at least 3 points, got {v}")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    xc = pred - mu_p
    yc = gt - mu_g
    if np.linalg.matrix_rank(yc, tol=1e-9) < 2:
        raise DegeneracyError("target cloud is rank-deficient; alignment is ill-posed")
    var_p = (xc * xc).sum() / v
    if var_p <= 0.0:
        raise DegeneracyError("source cloud is a single point; scale is undefined")
    cov = yc.T @ xc / v
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    scale = float((d * np.diag(sign)).sum() / var_p)
    translation = mu_g - scale * rot @ mu_p
    transform = SimilarityTransform(scale=scale, rotation=rot, translation=translation)
    return transform, transform.apply(pred)


def mpjpe_p2(pred, gt) -> float:
    """Mean per-joint distance after per-frame similarity alignment."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt, 3)
    dists = []
    for t in range(pred.shape[0]):
        _, aligned = procrustes_align(pred[t], gt[t])
        dists.append(np.linalg.norm(aligned - gt[t], axis=-1))
    return float(np.concatenate(dists).mean())


def mpjve_metric(pred, gt) -> float:
    """Mean per-joint velocity error as a plain evaluation number."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(pred, gt, 3)
    if pred.shape[0] < 2:
        return 0.0
    vel = np.diff(pred, axis=0) - np.diff(gt, axis=0)
    return float(np.linalg.norm(vel, axis=-1).mean())
