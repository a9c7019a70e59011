"""Adam training loop with the contrast/consistency alternation schedule."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import Dataset, add_noise, downsample
from .evaluation import e3d
from .losses import LossWeights, forward_batch, training_objective
from .model import ArchConfig, Params, init_params, save_checkpoint
from .model import rotation_forward_batch, shape_forward_batch
from .rigidity import MemoryBank, RigidityThresholds, msr_table

log = logging.getLogger(__name__)

ABLATIONS = {
    # name: (use_contrast, use_consist, vanilla)
    "rrn": (False, False, False),
    "rrn-contrast": (True, False, False),
    "rrn-consist": (False, True, False),
    "full": (True, True, False),
    "vanilla": (False, False, True),
}


@dataclass
class TrainConfig:
    arch: ArchConfig
    epochs: int = 700
    lr: float = 1e-3
    decay: float = 0.95
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    thresholds: RigidityThresholds = field(default_factory=RigidityThresholds)
    bank_capacity: int = 1024
    block: int = 100
    seed: int = 0
    use_contrast: bool = True
    use_consist: bool = True
    joint: bool = False
    random_rotation: bool = False
    eval_every: int = 50
    msr_cache_limit: int = 4096
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.bank_capacity < 1 or self.block < 1:
            raise ValueError("epochs, batch_size, bank_capacity and block must be positive")
        if self.lr <= 0 or not 0 < self.decay <= 1:
            raise ValueError("lr must be > 0 and decay in (0, 1]")

    def lr_at(self, epoch):
        return self.lr * self.decay**epoch

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["arch"] = ArchConfig.from_dict(d["arch"])
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["thresholds"] = RigidityThresholds(**d.get("thresholds", {}))
        return cls(**d)

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        contrast, consist, vanilla = ABLATIONS[name]
        return replace(self, use_contrast=contrast, use_consist=consist,
                       arch=replace(self.arch, vanilla=vanilla))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Params):
        return cls({k: np.zeros_like(p.value) for k, p in params.tensors.items()},
                   {k: np.zeros_like(p.value) for k, p in params.tensors.items()})


def adam_step(params: Params, state: OptimizerState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of every parameter from its accumulated grad."""
    state.step += 1
    t = state.step
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    for name, p in params.tensors.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def predict(params: Params, ds: Dataset, chunk=256):
    """Frozen-parameter shapes (F, 3, P), cameras (F, 2, 3), unit representations (F, d)."""
    W, _ = ds.stacked()
    S, M, H = [], [], []
    for a in range(0, len(W), chunk):
        w = W[a:a + chunk]
        s, h = shape_forward_batch(w, params)
        S.append(s.value)
        M.append(rotation_forward_batch(w, params).value)
        H.append((h.value / np.linalg.norm(h.value, axis=0, keepdims=True)).T)
    d = params.cfg.h_dim
    if not S:
        return np.zeros((0, 3, ds.P)), np.zeros((0, 2, 3)), np.zeros((0, d))
    return np.concatenate(S), np.concatenate(M), np.concatenate(H)


def evaluate(params: Params, ds: Dataset):
    if not ds.has_gt:
        raise ValueError(f"dataset {ds.name!r} has no ground truth")
    S, _, _ = predict(params, ds)
    return e3d(list(S), ds.gt)


def _batches(order, size):
    return [order[a:a + size] for a in range(0, len(order), size)]


def train(ds: Dataset, cfg: TrainConfig, test: Dataset | None = None, out_dir=None,
          log_path=None, params: Params | None = None):
    """Train both networks on ``ds``; returns (params, list of per-epoch log records).

    Records are also appended as JSON lines to ``log_path`` when given.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if ds.P != cfg.arch.P:
        raise ValueError(f"dataset has P={ds.P}, model expects P={cfg.arch.P}")
    params = params if params is not None else init_params(cfg.arch, cfg.seed)
    state = OptimizerState.for_params(params)
    bank = MemoryBank(cfg.bank_capacity, cfg.arch.h_dim, ds.P)
    rng = np.random.default_rng(cfg.seed)
    # frames are fixed, so msr between dataset positions is a constant table
    lookup = None
    if cfg.use_contrast and len(ds) <= cfg.msr_cache_limit:
        lookup = msr_table(*ds.stacked())
    out_dir = Path(out_dir) if out_dir is not None else None
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    records = []
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            sums = {"reproj": 0.0, "contrast": 0.0, "consist": 0.0}
            n = 0
            seen = set()
            for idx in _batches(rng.permutation(len(ds)), cfg.batch_size):
                frames = [ds.frames[i] for i in idx]
                params.zero_grad()
                try:
                    with dc.Tape() as tape:
                        batch = forward_batch(params, frames, rng)
                        batch.indices = idx  # bank entries are keyed by dataset position
                        total, parts = training_objective(
                            batch, bank, cfg.thresholds, cfg.weights, epoch, params, rng,
                            cfg.block, cfg.use_contrast, cfg.use_consist, cfg.joint,
                            cfg.random_rotation, lookup)
                except dc.DegeneracyError as e:
                    item = getattr(e, "item", None)
                    where = f"frame {int(idx[item])}" if item is not None and item < len(idx) else "batch"
                    raise dc.DegeneracyError(f"epoch {epoch}, {where}: {e}") from e
                dc.backward(tape, total)
                adam_step(params, state, lr)
                bank.push(batch.indices, batch.h_unit.value.T, batch.W, batch.mask)
                seen.update(parts)
                for k, v in parts.items():
                    sums[k] += v.item() * len(idx)
                n += len(idx)
            rec = {
                "epoch": epoch,
                "lr": lr,
                "loss_reproj": sums["reproj"] / n,
                "loss_contrast": sums["contrast"] / n if "contrast" in seen else None,
                "loss_consist": sums["consist"] / n if "consist" in seen else None,
            }
            last = epoch == cfg.epochs - 1
            if cfg.eval_every and (epoch % cfg.eval_every == 0 or last):
                if ds.has_gt:
                    rec["e3d_train"] = evaluate(params, ds).mean_e3d
                if test is not None and test.has_gt:
                    rec["e3d_test"] = evaluate(params, test).mean_e3d
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            log.debug("epoch %d %s", epoch, rec)
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(params, out_dir / f"checkpoint_{epoch + 1:04d}.npz", {"epoch": epoch + 1})
        if out_dir is not None:
            save_checkpoint(params, out_dir / "checkpoint_final.npz", {"epoch": cfg.epochs})
    finally:
        if fh is not None:
            fh.close()
    return params, records


def robustness_sweep(ds: Dataset, cfg: TrainConfig, noise_ratios=(0.0,), keep_fractions=(1.0,)):
    """Train per setting and report e3D on the full dataset's ground truth.

    Noise rows train and evaluate on the noisy observations; down-sampling
    rows train on the subsampled frames and evaluate on every frame.
    """
    if not ds.has_gt:
        raise ValueError("robustness sweep needs ground truth")
    rows = []
    for ratio in noise_ratios:
        noisy = add_noise(ds, ratio, seed=cfg.seed) if ratio > 0 else ds
        params, _ = train(noisy, cfg)
        rows.append({"setting": "noise", "value": float(ratio), "e3d": evaluate(params, noisy).mean_e3d})
    for keep in keep_fractions:
        params, _ = train(downsample(ds, keep), cfg)
        rows.append({"setting": "keep", "value": float(keep), "e3d": evaluate(params, ds).mean_e3d})
    return rows
