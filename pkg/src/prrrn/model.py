"""Residual-recursive shape network and rotation network.

A mini-batch of L frames travels through the shape network as a C x 2L
feature: column ``2i + j`` holds coordinate axis ``j`` of frame ``i``. Every
layer is a per-position linear map over channels (a 1x1 convolution over the
2 x 1 spatial grid), so one matmul serves the whole batch.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node

CHECKPOINT_VERSION = 1
SLOPE = 0.2


@dataclass(frozen=True)
class ArchConfig:
    P: int
    channels: tuple[int, ...] = (128, 64, 32, 16, 8)
    T: int = 3
    rot_layers: tuple[int, ...] = (128, 32, 8, 6)
    vanilla: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "rot_layers", tuple(int(c) for c in self.rot_layers))
        if self.P < 4:
            raise ValueError("P must be >= 4")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.channels or any(c < 2 or c % 2 for c in self.channels):
            raise ValueError(f"channels must be even and >= 2: {self.channels}")
        for prev, nxt in zip(self.channels, self.channels[1:]):
            if nxt != prev // 2:
                raise ValueError(f"channels must halve per module: {self.channels}")
        if not self.rot_layers or self.rot_layers[-1] != 6:
            raise ValueError("rot_layers must end in a 6-wide layer")

    @property
    def n(self):
        return len(self.channels)

    @property
    def h_dim(self):
        return self.channels[-1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def layer_shapes(cfg: ArchConfig) -> dict[str, tuple[int, int]]:
    """Shape of every parameter, in canonical order.

    Inverse modules reuse ``rr{k}.rec_w`` / ``rr{k}.rec_b`` and so have no
    entries of their own for the recursive layer.
    """
    s: dict[str, tuple[int, int]] = {}

    def lin(name, fan_out, fan_in):
        s[f"{name}.w"] = (fan_out, fan_in)
        s[f"{name}.b"] = (fan_out, 1)

    c = cfg.channels
    lin("embed", c[0], cfg.P)
    for k, ck in enumerate(c):
        s[f"rr{k}.rec_w"] = (ck, ck)
        s[f"rr{k}.rec_b"] = (ck, 1)
        lin(f"rr{k}.half", ck // 2, ck)
    lin("middle", cfg.h_dim, c[-1])
    lin("middle_inv", c[-1], cfg.h_dim)
    for k in reversed(range(cfg.n)):
        lin(f"irr{k}.double", c[k], c[k] // 2)
    lin("shape", 3 * cfg.P, 2 * c[0])
    widths = (2 * cfg.P,) + cfg.rot_layers
    for k, (fi, fo) in enumerate(zip(widths, widths[1:])):
        lin(f"rot{k}", fo, fi)
    return s


def param_count(cfg: ArchConfig) -> int:
    return sum(r * c for r, c in layer_shapes(cfg).values())


@dataclass
class Params:
    cfg: ArchConfig
    tensors: dict[str, Node] = field(default_factory=dict)

    def __getitem__(self, name) -> Node:
        return self.tensors[name]

    def recursive_weight(self, k: int, inverse: bool = False) -> Node:
        # inverse modules are tied: both directions read the same Node
        return self.tensors[f"rr{k}.rec_w"]

    def leaves(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def count(self):
        return sum(p.value.size for p in self.tensors.values())

    def snapshot(self):
        return {k: v.value.copy() for k, v in self.tensors.items()}


def init_params(cfg: ArchConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (fo, fi) in layer_shapes(cfg).items():
        if name.endswith("_b") or name.endswith(".b"):
            v = np.zeros((fo, fi))
        else:
            bound = np.sqrt(1.0 / fi)
            v = rng.uniform(-bound, bound, size=(fo, fi))
        tensors[name] = Node(v, requires_grad=True, name=name)
    return Params(cfg, tensors)


def save_checkpoint(params: Params, path, extra=None):
    meta = {"version": CHECKPOINT_VERSION, "arch": params.cfg.to_dict(), "extra": extra or {}}
    arrays = {k: v.value for k, v in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[Params, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ArchConfig.from_dict(meta["arch"])
        tensors = {}
        for name in layer_shapes(cfg):
            tensors[name] = Node(z[name].copy(), requires_grad=True, name=name)
    return Params(cfg, tensors), meta.get("extra", {})


def _linear(params, name, x):
    return dc.add_bias(dc.matmul(params[f"{name}.w"], x), params[f"{name}.b"])


def _act(x):
    return dc.leaky_relu(x, SLOPE)


def embed_input(W) -> Node:
    """Stack L frames (L, 2, P) into the P x 2L channel feature (constant)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 2:
        W = W[None]
    L, _, P = W.shape
    return Node(W.reshape(2 * L, P).T.copy())


def recursive_block(x, w, b, T, residual=True):
    y = x
    for _ in range(T):
        z = _act(dc.add_bias(dc.matmul(w, y), b))
        y = dc.add(z, y) if residual else z
    return y


def _plain_or_recursive(x, w, b, T, vanilla):
    # the vanilla ablation keeps the parameters but runs one plain layer
    if vanilla:
        return _act(dc.add_bias(dc.matmul(w, x), b))
    return recursive_block(x, w, b, T)


def rr_module(x, params: Params, k: int, T: int):
    """Recursive residual layer applied T times with shared weights, then halving."""
    w, b = params.recursive_weight(k), params[f"rr{k}.rec_b"]
    if x.shape[0] != w.shape[0]:
        raise dc.ShapeError(f"rr_module {k}: expected {w.shape[0]} channels, got {x.shape[0]}")
    y = _plain_or_recursive(x, w, b, T, params.cfg.vanilla)
    return _act(_linear(params, f"rr{k}.half", y))


def inverse_rr_module(x, params: Params, k: int, T: int):
    y = _act(_linear(params, f"irr{k}.double", x))
    w, b = params.recursive_weight(k, inverse=True), params[f"rr{k}.rec_b"]
    return _plain_or_recursive(y, w, b, T, params.cfg.vanilla)


def _fold(x, L):
    """C x 2L -> 2C x L (per-frame flatten, position-major)."""
    C = x.shape[0]
    return dc.reshape(dc.transpose(dc.reshape(x, (C, L, 2)), (2, 0, 1)), (2 * C, L))


def _unfold(v, L):
    """2C x L -> C x 2L, the inverse of ``_fold``."""
    C = v.shape[0] // 2
    return dc.reshape(dc.transpose(dc.reshape(v, (2, C, L)), (1, 2, 0)), (C, 2 * L))


def shape_forward_batch(W, params: Params):
    """Shapes (L, 3, P) and raw representations (h_dim x L) for a batch."""
    cfg = params.cfg
    W = np.asarray(W, dtype=np.float64)
    L = W.shape[0]
    x = _act(_linear(params, "embed", embed_input(W)))
    for k in range(cfg.n):
        x = rr_module(x, params, k, cfg.T)
    h = _linear(params, "middle", _fold(x, L))
    x = _unfold(_act(_linear(params, "middle_inv", h)), L)
    for k in reversed(range(cfg.n)):
        x = inverse_rr_module(x, params, k, cfg.T)
    s = _linear(params, "shape", _fold(x, L))
    S = dc.reshape(dc.transpose(s), (L, 3, cfg.P))
    return S, h


def rotation_forward_batch(W, params: Params, rng=None):
    """Row-orthonormal cameras (L, 2, 3) for a batch.

    A rank-deficient raw 6-vector is perturbed by 1e-6 Gaussian noise once
    before the degeneracy error is allowed to surface.
    """
    cfg = params.cfg
    W = np.asarray(W, dtype=np.float64)
    L = W.shape[0]
    x = Node(W.reshape(L, 2 * cfg.P).T.copy())
    n_rot = len(cfg.rot_layers)
    for k in range(n_rot):
        x = _linear(params, f"rot{k}", x)
        if k < n_rot - 1:
            x = _act(x)
    raw = dc.reshape(dc.transpose(x), (L, 2, 3))
    try:
        return dc.svd_orthogonalize(raw)
    except dc.DegeneracyError:
        rng = rng if rng is not None else np.random.default_rng(0)
        raw = dc.add(raw, Node(1e-6 * rng.standard_normal(raw.shape)))
        return dc.svd_orthogonalize(raw)


def shape_forward(frame, params: Params):
    """Single-frame shape 3 x P and representation h_dim x 1."""
    S, h = shape_forward_batch(np.asarray(frame.W)[None], params)
    return dc.reshape(S, (3, params.cfg.P)), h


def rotation_forward(frame, params: Params):
    M = rotation_forward_batch(np.asarray(frame.W)[None], params)
    return dc.reshape(M, (2, 3))
