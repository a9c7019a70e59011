"""Procrustes-aligned 3D error, rank diagnostics and rigid factorization."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


class DegenerateGeometryError(ArithmeticError):
    pass


@dataclass
class EvalReport:
    errors: list[float]
    reflections: list[bool]
    mean_e3d: float
    frame_count: int

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


REPORT_SCHEMA = {
    "type": "object",
    "required": ["errors", "reflections", "mean_e3d", "frame_count"],
    "properties": {
        "errors": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "reflections": {"type": "array", "items": {"type": "boolean"}},
        "mean_e3d": {"type": "number", "minimum": 0},
        "frame_count": {"type": "integer", "minimum": 0},
    },
}


def procrustes_rotation(pred, gt, allow_reflection=True):
    """Orthogonal R minimizing ||gt - R pred||_F, and whether det(R) < 0."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not np.any(pred) or not np.any(gt):
        raise DegenerateGeometryError("procrustes_align: all-zero shape")
    if np.array_equal(pred, gt):
        # already optimal; avoids rounding from the SVD
        return np.eye(gt.shape[0]), False
    U, _, Vt = np.linalg.svd(gt @ pred.T)
    if not allow_reflection and np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1
    R = U @ Vt
    return R, bool(np.linalg.det(R) < 0)


def procrustes_align(pred, gt, allow_reflection=True, with_scale=False):
    R, _ = procrustes_rotation(pred, gt, allow_reflection)
    out = R @ pred
    if with_scale:
        out = out * (np.sum(gt * out) / np.sum(out * out))
    return out


def e3d(preds, gts, allow_reflection=True, with_scale=False) -> EvalReport:
    """Mean over frames of ||S_gt - aligned(S_pred)||_F / ||S_gt||_F."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    errors, refl = [], []
    for i, (p, g) in enumerate(zip(preds, gts)):
        g = np.asarray(g, dtype=np.float64)
        gn = np.linalg.norm(g)
        if gn == 0:
            raise DegenerateGeometryError(f"ground-truth frame {i} has zero norm")
        R, flipped = procrustes_rotation(p, g, allow_reflection)
        a = R @ np.asarray(p, dtype=np.float64)
        if with_scale:
            a = a * (np.sum(g * a) / np.sum(a * a))
        errors.append(float(np.linalg.norm(g - a) / gn))
        refl.append(flipped)
    mean = float(np.mean(errors)) if errors else 0.0
    return EvalReport(errors, refl, mean, len(errors))


def stack_observations(ds):
    W, _ = ds.stacked()
    return W.reshape(-1, ds.P)


def rank_profile(ds, top=8):
    s = np.linalg.svd(stack_observations(ds), compute_uv=False)
    s4_s3 = float(s[3] / s[2]) if len(s) > 3 and s[2] > 0 else 0.0
    return {"singular_values": s[:top].tolist(), "sigma4_over_sigma3": s4_s3}


def _gram_row(a, b):
    # coefficients of a^T C b in the 6 unknowns of symmetric C
    return np.stack([
        a[..., 0] * b[..., 0],
        a[..., 0] * b[..., 1] + a[..., 1] * b[..., 0],
        a[..., 0] * b[..., 2] + a[..., 2] * b[..., 0],
        a[..., 1] * b[..., 1],
        a[..., 1] * b[..., 2] + a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 2],
    ], axis=-1)


def rigid_factorize(ds):
    """Rigid shape (3 x P) and per-frame cameras by rank-3 factorization.

    Truncated SVD of the stacked 2F x P observations, then a metric upgrade
    Q with C = Q Q^T solved from M_i C M_i^T = I_2 in least squares.
    """
    F = len(ds)
    if F < 2:
        raise ValueError("rigid_factorize needs at least 2 frames")
    _, masks = ds.stacked()
    if not masks.all():
        raise ValueError("rigid_factorize needs fully visible frames")
    Wst = stack_observations(ds)
    U, s, Vt = np.linalg.svd(Wst, full_matrices=False)
    if len(s) < 3 or s[2] <= 1e-10 * s[0]:
        raise DegenerateGeometryError("stacked observations have rank < 3")
    Mh = (U[:, :3] * np.sqrt(s[:3])).reshape(F, 2, 3)
    Sh = np.sqrt(s[:3])[:, None] * Vt[:3]
    r1, r2 = Mh[:, 0], Mh[:, 1]
    A = np.concatenate([_gram_row(r1, r1), _gram_row(r2, r2), _gram_row(r1, r2)])
    b = np.concatenate([np.ones(F), np.ones(F), np.zeros(F)])
    v = np.linalg.solve(A.T @ A, A.T @ b)
    C = np.array([[v[0], v[1], v[2]], [v[1], v[3], v[4]], [v[2], v[4], v[5]]])
    try:
        Q = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        lam, V = np.linalg.eigh(C)
        Q = V * np.sqrt(np.clip(lam, 1e-12 * lam.max(), None))
    M = Mh @ Q
    S = np.linalg.solve(Q, Sh)
    # snap each camera onto the nearest row-orthonormal matrix
    u, _, vt = np.linalg.svd(M, full_matrices=False)
    M = u @ vt
    return S, [M[i] for i in range(F)]
