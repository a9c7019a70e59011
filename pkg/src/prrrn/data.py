"""Keypoint datasets: loading, zero-centering, masking, splits, synthesis."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass
class Frame2D:
    W: np.ndarray
    mask: np.ndarray
    index: int

    @property
    def P(self):
        return self.W.shape[1]


@dataclass
class Dataset:
    frames: list[Frame2D]
    P: int
    name: str = "dataset"
    gt: list[np.ndarray] | None = None
    cameras: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        for f in self.frames:
            if f.W.shape != (2, self.P):
                raise DataFormatError(f"frame {f.index}: expected 2x{self.P}, got {f.W.shape}")
        if self.gt is not None and len(self.gt) != len(self.frames):
            raise DataFormatError("ground truth count does not match frame count")

    def __len__(self):
        return len(self.frames)

    @property
    def has_gt(self):
        return self.gt is not None

    def stacked(self):
        """(F, 2, P) observations and (F, P) masks."""
        W = np.stack([f.W for f in self.frames]) if self.frames else np.zeros((0, 2, self.P))
        M = np.stack([f.mask for f in self.frames]) if self.frames else np.zeros((0, self.P), bool)
        return W, M

    def subset(self, idx, name=None):
        idx = list(idx)
        return Dataset(
            frames=[self.frames[i] for i in idx],
            P=self.P,
            name=name or self.name,
            gt=None if self.gt is None else [self.gt[i] for i in idx],
            cameras=None if self.cameras is None else [self.cameras[i] for i in idx],
        )


def center_frame(W, mask):
    """Zero the invisible columns and subtract the visible-point mean."""
    W = np.array(W, dtype=np.float64)
    mask = np.asarray(mask, bool)
    W[:, ~mask] = 0.0
    if mask.any():
        W[:, mask] -= W[:, mask].mean(axis=1, keepdims=True)
    return W


def center_shape(S):
    S = np.asarray(S, dtype=np.float64)
    return S - S.mean(axis=1, keepdims=True)


def make_frame(W, mask=None, index=0):
    W = np.asarray(W, dtype=np.float64)
    mask = np.ones(W.shape[1], bool) if mask is None else np.asarray(mask, bool)
    return Frame2D(center_frame(W, mask), mask, int(index))


def random_rotations(n, rng):
    """Uniform rotations via QR of Gaussian matrices with sign correction."""
    A = rng.standard_normal((n, 3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]
    det = np.linalg.det(Q)
    Q[det < 0, :, 0] *= -1.0
    return Q


def synthesize(P, F, K, camera_seed=0, shape_seed=0, noise_ratio=0.0, name="synthetic"):
    """Low-rank deformable shapes seen through random orthographic cameras.

    The first basis carries a fixed weight of 3 (the mean shape); the other
    K-1 coefficients are standard Gaussian per frame with no temporal order.
    Noise, if any, is Gaussian rescaled so that
    ||noise||_F / ||W||_F over the whole stack equals ``noise_ratio``.
    """
    if K < 1 or F <= K or P < 4:
        raise ValueError(f"invalid sizes: P={P}, F={F}, K={K}")
    if noise_ratio < 0:
        raise ValueError("noise_ratio must be >= 0")
    srng = np.random.default_rng(shape_seed)
    B = srng.standard_normal((K, 3, P))
    B -= B.mean(axis=2, keepdims=True)
    coef = np.empty((F, K))
    coef[:, 0] = 3.0
    coef[:, 1:] = srng.standard_normal((F, K - 1))
    S = np.einsum("fk,kdp->fdp", coef, B)

    crng = np.random.default_rng(camera_seed)
    M = random_rotations(F, crng)[:, :2, :]
    W = M @ S
    if noise_ratio > 0:
        noise = np.random.default_rng([camera_seed, shape_seed, 7]).standard_normal(W.shape)
        # centered first so the ratio survives per-frame centering
        noise -= noise.mean(axis=2, keepdims=True)
        noise *= noise_ratio * np.linalg.norm(W) / np.linalg.norm(noise)
        W = W + noise
    frames = [make_frame(W[i], None, i) for i in range(F)]
    ds = Dataset(frames, P, name, gt=[S[i] for i in range(F)], cameras=[M[i] for i in range(F)])
    ds.basis = B
    ds.coefficients = coef
    return ds


def split_train_test(ds: Dataset, fraction=0.8):
    n = len(ds)
    if n < 5:
        raise ValueError("need at least 5 frames to split")
    cut = int(math.floor(fraction * n))
    return (
        ds.subset(range(cut), ds.name + "-train"),
        ds.subset(range(cut, n), ds.name + "-test"),
    )


def downsample(ds: Dataset, keep_fraction):
    """Deterministic uniform-stride frame subsampling."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    n = len(ds)
    keep = max(1, int(round(n * keep_fraction)))
    idx = np.floor(np.arange(keep) * (n / keep)).astype(int)
    return ds.subset(idx.tolist(), f"{ds.name}-ds{keep_fraction:g}")


def _json_frames(doc, path):
    try:
        P = int(doc["P"])
        raw = doc["frames"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{path}: missing field {e}") from e
    frames = []
    for r, rec in enumerate(raw):
        pts = np.asarray(rec.get("points"), dtype=np.float64)
        if pts.shape != (P, 2):
            raise DataFormatError(f"{path}: frame record {r} has {pts.shape[0] if pts.ndim else 0} points, expected {P}")
        mask = np.asarray(rec.get("mask", [True] * P), bool)
        if mask.shape != (P,):
            raise DataFormatError(f"{path}: frame record {r} mask has wrong length")
        pts = np.where(mask[:, None], pts, 0.0)
        frames.append(Frame2D(center_frame(pts.T, mask), mask, int(rec.get("id", r))))
    gt = None
    if doc.get("gt") is not None:
        gt = []
        for r, rec in enumerate(doc["gt"]):
            s = np.asarray(rec.get("points3d"), dtype=np.float64)
            if s.shape != (P, 3):
                raise DataFormatError(f"{path}: gt record {r} has shape {s.shape}, expected ({P}, 3)")
            gt.append(center_shape(s.T))
    return Dataset(frames, P, doc.get("name", Path(path).stem), gt)


def _csv_rows(path, width):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file")
        if width is not None and len(header) != width:
            raise DataFormatError(f"{path}: header has {len(header)} columns, expected {width}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: {len(row)} values, expected {len(header)}")
            try:
                rows.append([float(v) if v.strip() else math.nan for v in row])
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from e
    return header, np.asarray(rows, dtype=np.float64).reshape(-1, len(header))


def _csv_dataset(path, gt_path=None):
    header, vals = _csv_rows(path, None)
    if len(header) % 2:
        raise DataFormatError(f"{path}: odd column count {len(header)}")
    P = len(header) // 2
    frames = []
    for r, row in enumerate(vals):
        pts = row.reshape(P, 2)
        mask = ~np.isnan(pts).any(axis=1)
        pts = np.nan_to_num(pts)
        frames.append(Frame2D(center_frame(pts.T, mask), mask, r))
    gt = None
    if gt_path is not None:
        _, g = _csv_rows(gt_path, 3 * P)
        if len(g) != len(frames):
            raise DataFormatError(f"{gt_path}: {len(g)} rows, expected {len(frames)}")
        gt = [center_shape(row.reshape(P, 3).T) for row in g]
    return Dataset(frames, P, Path(path).stem, gt)


def load_dataset(path, format="keypoints-json", gt_path=None) -> Dataset:
    path = Path(path)
    if format == "keypoints-json":
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}:{e.lineno}: {e.msg}") from e
        return _json_frames(doc, path)
    if format == "mocap-csv":
        return _csv_dataset(path, gt_path)
    raise DataFormatError(f"unknown format {format!r}")


def dataset_to_json(ds: Dataset) -> dict:
    doc = {
        "name": ds.name,
        "P": ds.P,
        "frames": [
            {"id": f.index, "points": f.W.T.tolist(), "mask": f.mask.tolist()} for f in ds.frames
        ],
    }
    if ds.gt is not None:
        doc["gt"] = [{"points3d": s.T.tolist()} for s in ds.gt]
    return doc


def save_dataset(ds: Dataset, path, format="keypoints-json", gt_path=None):
    path = Path(path)
    if format == "keypoints-json":
        path.write_text(json.dumps(dataset_to_json(ds)), encoding="utf-8")
        return
    if format != "mocap-csv":
        raise DataFormatError(f"unknown format {format!r}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"{a}{p}" for p in range(ds.P) for a in "xy"])
        for f in ds.frames:
            pts = np.where(f.mask[:, None], f.W.T, math.nan)
            w.writerow(["" if math.isnan(v) else repr(float(v)) for v in pts.reshape(-1)])
    if gt_path is not None and ds.gt is not None:
        with open(gt_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"{a}{p}" for p in range(ds.P) for a in "xyz"])
            for s in ds.gt:
                w.writerow([repr(float(v)) for v in s.T.reshape(-1)])


def add_noise(ds: Dataset, noise_ratio, seed=0):
    """Copy of ``ds`` with Gaussian noise at ||noise||_F / ||W||_F = ``noise_ratio``.

    Noise touches visible entries only; frames are re-centered afterwards.
    """
    W, M = ds.stacked()
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(W.shape) * M[:, None, :]
    for i in range(len(noise)):
        noise[i] = center_frame(noise[i], M[i])
    if noise_ratio > 0:
        noise *= noise_ratio * np.linalg.norm(W) / np.linalg.norm(noise)
    else:
        noise[:] = 0.0
    frames = [Frame2D(center_frame(W[i] + noise[i], M[i]), M[i].copy(), f.index)
              for i, f in enumerate(ds.frames)]
    return Dataset(frames, ds.P, f"{ds.name}-noise{noise_ratio:g}", ds.gt, ds.cameras)
