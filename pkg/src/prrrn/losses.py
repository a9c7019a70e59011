"""Reprojection, rigidity-contrastive and pairwise-consistency losses."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import center_frame, random_rotations
from .diffcore import Node
from .model import rotation_forward_batch, shape_forward_batch
from .rigidity import MemoryBank, RigidityThresholds, msr_cross, pair_masks


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class Batch:
    """One mini-batch and its first forward pass (all on the active tape)."""

    indices: np.ndarray
    W: np.ndarray  # (L, 2, P)
    mask: np.ndarray  # (L, P)
    S: Node  # (L, 3, P)
    M: Node  # (L, 2, 3)
    h: Node  # (h_dim, L), raw
    h_unit: Node  # (h_dim, L)

    def __len__(self):
        return len(self.indices)


def forward_batch(params, frames, rng=None) -> Batch:
    W = np.stack([f.W for f in frames])
    mask = np.stack([f.mask for f in frames])
    S, h = shape_forward_batch(W, params)
    M = rotation_forward_batch(W, params, rng)
    return Batch(np.array([f.index for f in frames]), W, mask, S, M, h, dc.l2_normalize(h))


def _mask3(mask, rows):
    return np.repeat(mask[:, None, :].astype(np.float64), rows, axis=1)


def reprojection_loss(batch: Batch) -> Node:
    """Mean over the batch of ||mask * (W_i - M_i S_i)||_F."""
    if not batch.mask.any():
        warnings.warn("reprojection_loss: every point is masked", RuntimeWarning, stacklevel=2)
    resid = dc.sub(Node(batch.W), dc.matmul(batch.M, batch.S))
    resid = dc.mul_const(resid, _mask3(batch.mask, 2))
    return dc.mean_all(dc.batch_frobenius(resid))


def contrastive_terms(h_unit: Node, bank_h, pos, neg) -> Node | None:
    """Per-frame -log(sum_pos / (sum_pos + sum_neg)) for frames with both sets.

    ``bank_h`` is (N, d) detached, ``pos``/``neg`` are (N, L) membership masks.
    Returns a 1 x n node of contributing terms, or None when no frame qualifies.
    """
    live = pos.any(axis=0) & neg.any(axis=0)
    if not live.any():
        return None
    cols = np.flatnonzero(live)
    hs = dc.take(h_unit, cols, axis=1)
    logits = dc.matmul(Node(np.asarray(bank_h)), hs)  # (N, n)
    lse_pos = dc.logsumexp(logits, pos[:, cols])
    lse_all = dc.logsumexp(logits, (pos | neg)[:, cols])
    return dc.sub(lse_all, lse_pos)


def contrastive_loss(batch: Batch, bank: MemoryBank, th: RigidityThresholds,
                     msr_lookup=None) -> Node:
    """Mean contrastive term over batch frames that have positives and negatives.

    ``msr_lookup`` optionally holds a precomputed msr table indexed by
    (batch index, bank index); otherwise msr is computed against the frames
    stored in the bank.
    """
    if len(bank) == 0:
        return Node(np.zeros((1, 1)))
    if msr_lookup is not None:
        vals = msr_lookup[np.ix_(bank.indices(), batch.indices)]
    else:
        Wb, mb = bank.frames()
        vals = msr_cross(batch.W, batch.mask, Wb, mb).T  # (N, L)
    pos, neg = pair_masks(vals, th)
    terms = contrastive_terms(batch.h_unit, bank.representations(), pos, neg)
    if terms is None:
        return Node(np.zeros((1, 1)))
    return dc.mean_all(terms)


def invert_permutation(r):
    r = np.asarray(r)
    inv = np.empty_like(r)
    inv[r] = np.arange(len(r))
    return inv


def rearrange(second_pass, r):
    """Second-pass item i estimates original item r_i; return them in original order."""
    return dc.take(second_pass, invert_permutation(r), axis=0)


def consistency_inputs(batch: Batch, r, cams=None):
    """Detached, re-centered W'_i = M_{r_i} S_i (or cams[i] S_i)."""
    S = batch.S.value
    cam = batch.M.value[r] if cams is None else cams
    Wp = cam @ S
    return np.stack([center_frame(Wp[i], batch.mask[i]) for i in range(len(batch))])


def consistency_loss(batch: Batch, params, rng, use_random_rotation=False,
                     shape_fn=shape_forward_batch, rot_fn=rotation_forward_batch) -> Node:
    """Sum over the batch of ||S_i - S'_i||_F + ||M_i - M'_i||_F.

    First-pass estimates are fixed targets; gradients flow only through the
    second forward pass. With ``use_random_rotation`` the exchanged cameras
    are replaced by the top two rows of uniformly random rotations, which
    then become the camera targets.
    """
    L = len(batch)
    r = rng.permutation(L)
    S_t = batch.S.value
    if use_random_rotation:
        cams = random_rotations(L, rng)[:, :2, :]
        Wp = consistency_inputs(batch, r, cams)
        S2 = shape_fn(Wp, params)[0]
        M2 = rot_fn(Wp, params)
        M_t = cams
    else:
        Wp = consistency_inputs(batch, r)
        S2 = shape_fn(Wp, params)[0]
        M2 = rearrange(rot_fn(Wp, params), r)
        M_t = batch.M.value
    m3 = _mask3(batch.mask, 3)
    ds = dc.batch_frobenius(dc.mul_const(dc.sub(Node(S_t), S2), m3))
    dm = dc.batch_frobenius(dc.sub(Node(M_t), M2))
    return dc.sum_all(dc.add(ds, dm))


def active_regularizer(epoch, block=100, use_contrast=True, use_consist=True, joint=False):
    """Which regularizers are on at ``epoch``: a subset of {"contrast", "consist"}."""
    if joint or not (use_contrast and use_consist):
        return {n for n, on in (("contrast", use_contrast), ("consist", use_consist)) if on}
    return {"contrast"} if (epoch // block) % 2 == 0 else {"consist"}


def training_objective(batch, bank, th, weights: LossWeights, epoch, params=None, rng=None,
                       block=100, use_contrast=True, use_consist=True, joint=False,
                       use_random_rotation=False, msr_lookup=None):
    """L_reproj plus whichever weighted regularizer the schedule activates.

    Returns ``(total, parts)`` where ``parts`` maps each computed term's name
    to its (unweighted) node.
    """
    parts = {"reproj": reprojection_loss(batch)}
    total = parts["reproj"]
    active = active_regularizer(epoch, block, use_contrast and weights.lambda1 > 0,
                                use_consist and weights.lambda2 > 0, joint)
    if "contrast" in active:
        parts["contrast"] = contrastive_loss(batch, bank, th, msr_lookup)
        total = dc.add(total, dc.scale(parts["contrast"], weights.lambda1))
    if "consist" in active:
        if params is None or rng is None:
            raise ValueError("consistency loss needs params and rng")
        parts["consist"] = consistency_loss(batch, params, rng, use_random_rotation)
        total = dc.add(total, dc.scale(parts["consist"], weights.lambda2))
    return total, parts
