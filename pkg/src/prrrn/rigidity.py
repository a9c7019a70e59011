"""Pairwise rigidity (minimal singular-value ratio) and the representation bank."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class RigidityThresholds:
    tau: float = 0.02
    xi: float = 0.04

    def __post_init__(self):
        if not 0 <= self.tau < self.xi <= 0.25:
            raise ValueError(f"need 0 <= tau < xi <= 0.25, got tau={self.tau}, xi={self.xi}")


def _stack_common(Wi, mi, Wj, mj):
    """4 x P stacks of two frames over their common visible points, re-centered.

    Broadcasts over leading axes; non-common columns are zero and drop out of
    every singular value.
    """
    common = (mi & mj).astype(np.float64)
    cnt = common.sum(axis=-1)
    A = np.concatenate([Wi * common[..., None, :], Wj * common[..., None, :]], axis=-2)
    mean = A.sum(axis=-1, keepdims=True) / np.maximum(cnt, 1)[..., None, None]
    return (A - mean) * common[..., None, :], cnt


def _ratio_from_gram(A):
    G = A @ np.swapaxes(A, -1, -2)
    lam = np.clip(np.linalg.eigvalsh(G), 0.0, None)
    total = lam.sum(axis=-1)
    out = np.divide(lam[..., 0], total, out=np.zeros_like(total), where=total > 0)
    return np.clip(out, 0.0, 0.25)


def msr(wi, wj) -> float:
    """sigma_4^2 / sum(sigma^2) of the 4 x P stack of two frames."""
    A, cnt = _stack_common(wi.W, wi.mask, wj.W, wj.mask)
    if cnt < 4:
        raise InsufficientOverlapError(f"frames {wi.index}, {wj.index} share {int(cnt)} visible points")
    return float(_ratio_from_gram(A))


def msr_many(W, mask, Wb, maskb):
    """msr of one frame (2 x P) against a stack (N, 2, P); NaN where overlap < 4."""
    A, cnt = _stack_common(W[None], mask[None], Wb, maskb)
    out = _ratio_from_gram(A)
    return np.where(cnt >= 4, out, np.nan)


def pair_grams(Wa, ma, Wb, mb):
    """4x4 Gram matrices of every (a, b) stack over common visible points.

    Returns (La, Nb, 4, 4) Grams of the re-centered stacks and (La, Nb)
    common-point counts. Uses only matmuls over the point axis: masked
    entries are zero in stored frames, so products need only one mask.
    """
    Wa = np.asarray(Wa, dtype=np.float64) * ma[:, None, :]
    Wb = np.asarray(Wb, dtype=np.float64) * mb[:, None, :]
    fa, fb = ma.astype(np.float64), mb.astype(np.float64)
    La, Nb = len(Wa), len(Wb)
    cnt = fa @ fb.T
    n = np.maximum(cnt, 1.0)
    sa = np.einsum("lap,np->lna", Wa, fb)  # sum over common points of frame a
    sb = np.einsum("nbp,lp->lnb", Wb, fa)
    aa = np.einsum("lap,lbp->labp", Wa, Wa).reshape(La, 4, -1) @ fb.T  # (La, 4, Nb)
    bb = fa @ np.einsum("nap,nbp->nabp", Wb, Wb).reshape(Nb, 4, -1).transpose(2, 0, 1).reshape(fa.shape[1], -1)
    ab = np.einsum("lap,nbp->lnab", Wa, Wb)
    G = np.empty((La, Nb, 4, 4))
    G[:, :, :2, :2] = aa.transpose(0, 2, 1).reshape(La, Nb, 2, 2)
    G[:, :, 2:, 2:] = bb.reshape(La, Nb, 2, 2)
    G[:, :, :2, 2:] = ab
    mean = np.concatenate([sa, sb], axis=-1) / n[..., None]
    G -= n[..., None, None] * mean[..., :, None] * mean[..., None, :]
    G[:, :, 2:, :2] = np.swapaxes(G[:, :, :2, 2:], -1, -2)
    return G, cnt


def msr_cross(Wa, ma, Wb, mb):
    """(La, Nb) matrix of msr between two stacks; NaN where overlap < 4."""
    G, cnt = pair_grams(Wa, ma, Wb, mb)
    lam = np.clip(np.linalg.eigvalsh(G), 0.0, None)
    total = lam.sum(axis=-1)
    out = np.divide(lam[..., 0], total, out=np.zeros_like(total), where=total > 0)
    return np.where(cnt >= 4, np.clip(out, 0.0, 0.25), np.nan)


def msr_table(W, mask, chunk=128):
    """Symmetric (F, F) msr matrix of a frame stack, computed in row chunks."""
    F = len(W)
    out = np.empty((F, F))
    for a in range(0, F, chunk):
        out[a:a + chunk] = msr_cross(W[a:a + chunk], mask[a:a + chunk], W, mask)
    return out


class MemoryBank:
    """FIFO queue of (frame index, unit-norm h, frame) with fixed capacity."""

    def __init__(self, capacity=1024, h_dim=8, P=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.h_dim = h_dim
        self.P = P
        self._idx = np.zeros(self.capacity, dtype=np.int64)
        self._h = np.zeros((self.capacity, h_dim))
        self._W = None if P is None else np.zeros((self.capacity, 2, P))
        self._mask = None if P is None else np.zeros((self.capacity, P), bool)
        self._head = 0  # slot of the oldest entry
        self._size = 0

    def __len__(self):
        return self._size

    def _order(self):
        return (self._head + np.arange(self._size)) % self.capacity

    def push(self, indices, H, W=None, masks=None):
        """Append a batch in order, evicting the oldest entries beyond capacity.

        ``H`` is (n, h_dim), each row unit-norm; values are copied so no
        gradient path leads back into stored entries.
        """
        H = np.array(H, dtype=np.float64).reshape(len(indices), self.h_dim)
        norms = np.linalg.norm(H, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("memory bank entries must be unit-norm")
        for r, i in enumerate(indices):
            slot = (self._head + self._size) % self.capacity
            if self._size == self.capacity:
                self._head = (self._head + 1) % self.capacity
            else:
                self._size += 1
            self._idx[slot] = i
            self._h[slot] = H[r]
            if self._W is not None:
                self._W[slot] = W[r]
                self._mask[slot] = masks[r]
        return self

    def indices(self):
        return self._idx[self._order()].copy()

    def representations(self):
        return self._h[self._order()].copy()

    def frames(self):
        o = self._order()
        return self._W[o], self._mask[o]

    def entries(self):
        o = self._order()
        return [(int(self._idx[s]), self._h[s].copy()) for s in o]


def bank_push(bank: MemoryBank, batch):
    """Push ``[(index, h), ...]`` (or with frames) into ``bank``."""
    batch = list(batch)
    if not batch:
        return bank
    idx = [b[0] for b in batch]
    H = np.stack([np.asarray(b[1], dtype=np.float64).reshape(-1) for b in batch])
    if len(batch[0]) > 2:
        W = np.stack([b[2].W for b in batch])
        m = np.stack([b[2].mask for b in batch])
        return bank.push(idx, H, W, m)
    return bank.push(idx, H)


@dataclass
class PairSets:
    positives: list[int]
    negatives: list[int]


def pair_masks(values, th: RigidityThresholds):
    """Boolean positive/negative masks from msr values (NaN is neither)."""
    v = np.asarray(values)
    with np.errstate(invalid="ignore"):
        return v < th.tau, v > th.xi


def build_pair_sets(frame, bank: MemoryBank, th: RigidityThresholds) -> PairSets:
    """Frame indices in ``bank`` that are rigid (positives) / non-rigid (negatives) with ``frame``.

    Bank entries whose msr lies in [tau, xi] belong to neither set.
    """
    if len(bank) == 0:
        return PairSets([], [])
    Wb, mb = bank.frames()
    values = msr_many(frame.W, frame.mask, Wb, mb)
    pos, neg = pair_masks(values, th)
    idx = bank.indices()
    return PairSets(idx[pos].tolist(), idx[neg].tolist())
