"""Relaxed group-wise splitting with group-l0 / group-lasso proximal maps.

A group is one column of a weight matrix stored ``(out, in)``, i.e. every
weight that reads one input feature.  For a regularized matrix ``W`` the
update is::

    U  = prox(W_at_epoch_start)                     # per column, hard or soft threshold
    W <- W - alpha * (dL/dW + lambda_l * W / ||W_col||) - alpha * beta * (W - U)

Every other parameter gets plain gradient descent.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

PENALTIES = ("gl0", "gl")
REGULARIZED_KINDS = ("fc", "lstm", "bilstm")


def _gl0_threshold(lam: float) -> float:
    return math.sqrt(2.0 * lam)


def prox_gl0(w, lam: float) -> np.ndarray:
    """Keep ``w`` if its l2 norm strictly exceeds sqrt(2*lam), else return zeros."""
    if lam < 0:
        raise ContractError("lambda must be nonnegative")
    w = np.asarray(w)
    if np.linalg.norm(w) > _gl0_threshold(lam):
        return w.copy()
    return np.zeros_like(w)


def prox_gl(w, lam: float) -> np.ndarray:
    """Group soft-threshold: shrink the norm of ``w`` by ``lam``, clipping at zero."""
    if lam < 0:
        raise ContractError("lambda must be nonnegative")
    w = np.asarray(w)
    norm = np.linalg.norm(w)
    if norm <= lam:
        return np.zeros_like(w)
    return w * ((norm - lam) / norm)


def column_norms(W) -> np.ndarray:
    W = np.asarray(W)
    return np.sqrt((W.astype(np.float64) ** 2).sum(axis=0))


def prox_columns(W, lam: float, penalty: str = "gl0") -> np.ndarray:
    """Apply the group prox to every column of ``W``."""
    W = np.asarray(W)
    norms = column_norms(W)
    if penalty == "gl0":
        keep = norms > _gl0_threshold(lam)
        return W * keep.astype(W.dtype)
    if penalty == "gl":
        scale = np.where(norms > lam, (norms - lam) / np.where(norms > 0, norms, 1.0), 0.0)
        return (W * scale).astype(W.dtype)
    raise ContractError(f"unknown penalty {penalty!r}")


def penalty_value(W, kind: str = "gl0") -> float:
    """Group-l0 count of nonzero columns, or group-lasso sum of column norms."""
    norms = column_norms(W)
    if kind == "gl0":
        return float(np.count_nonzero(norms > 0))
    if kind == "gl":
        return float(norms.sum())
    raise ContractError(f"unknown penalty {kind!r}")


@dataclass
class GroupPartition:
    """Column grouping of one weight matrix."""

    layer: str
    shape: tuple
    regularized: bool

    @property
    def num_groups(self) -> int:
        return self.shape[1]

    def groups(self):
        """Flat (row-major) indices of each column."""
        rows, cols = self.shape
        return [np.arange(rows) * cols + j for j in range(cols)]


def build_partitions(model, min_width: int = 128) -> list:
    """One partition per weight matrix of every fc / LSTM layer.

    A layer is regularized when its width (fc: output width, LSTM: hidden
    width per direction) exceeds ``min_width``.
    """
    parts = []
    for _, layer in model.layers():
        spec = getattr(layer, "spec", None)
        if spec is None or spec.kind not in REGULARIZED_KINDS:
            continue
        reg = spec.width > min_width
        for w in layer.weight_matrices():
            parts.append(GroupPartition(w.name, tuple(w.shape), reg))
    return parts


@dataclass
class RgsmConfig:
    alpha: float = 0.05
    beta_split: float = 0.1
    lam: float = 4e-2
    lambda_l: float = 1e-6
    penalty: str = "gl0"
    u_every_step: bool = False
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    min_width: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.alpha > 0:
            raise ContractError(f"rgsm.alpha must be > 0, got {self.alpha}")
        for name in ("beta_split", "lam", "lambda_l", "lr_decay", "lr_decay_every", "min_width"):
            if getattr(self, name) < 0:
                raise ContractError(f"rgsm.{name} must be nonnegative")
        if self.penalty not in PENALTIES:
            raise ContractError(f"rgsm.penalty must be one of {PENALTIES}, got {self.penalty!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown rgsm config fields: {sorted(unknown)}")
        return cls(**d)


def rgsm_update(w, grad, u, alpha, beta_split, lambda_l):
    """New value of one regularized matrix."""
    norms = column_norms(w)
    inv = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0).astype(w.dtype)
    sub = lambda_l * (w * inv)
    return w - alpha * (grad + sub) - (alpha * beta_split) * (w - u)


def rgsm_step(params: dict, grads: dict, state: dict, cfg: RgsmConfig, regularized=(), alpha=None) -> dict:
    """Return updated arrays for ``params`` (name -> array).

    ``state`` maps each regularized name to its auxiliary matrix ``U``;
    missing entries are initialised from the current weights.
    """
    alpha = cfg.alpha if alpha is None else alpha
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = w
            continue
        if g.shape != w.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        if name in regularized:
            if cfg.u_every_step or name not in state:
                state[name] = prox_columns(w, cfg.lam, cfg.penalty)
            out[name] = rgsm_update(w, g, state[name], alpha, cfg.beta_split, cfg.lambda_l)
        else:
            out[name] = w - alpha * g
    return out


class RGSM:
    """Optimizer bound to a model's parameters and partitions.

    Call :meth:`begin_epoch` at every epoch boundary (refreshes the auxiliary
    variables) and :meth:`step` after each backward pass.
    """

    def __init__(self, params, partitions, cfg: RgsmConfig | None = None):
        self.params = params
        self.cfg = cfg or RgsmConfig()
        self.partitions = list(partitions)
        self.regularized = {p.layer for p in self.partitions if p.regularized}
        missing = self.regularized - set(params)
        if missing:
            raise ContractError(f"partitions reference unknown parameters: {sorted(missing)}")
        self.state: dict = {}
        self.epoch = 0
        self.steps = 0

    @property
    def alpha(self) -> float:
        cfg = self.cfg
        if cfg.lr_decay_every and cfg.lr_decay != 1.0:
            return cfg.alpha * cfg.lr_decay ** (self.epoch // cfg.lr_decay_every)
        return cfg.alpha

    def begin_epoch(self, epoch: int | None = None):
        if epoch is not None:
            self.epoch = epoch
        for name in self.regularized:
            self.state[name] = prox_columns(self.params[name].data, self.cfg.lam, self.cfg.penalty)

    def step(self):
        arrays = {}
        grads = {}
        for name, t in self.params.items():
            if t.grad is not None:
                if t.grad.shape != t.shape:
                    raise ContractError(f"gradient for {name} has shape {t.grad.shape}, parameter has {t.shape}")
                arrays[name] = t.data
                grads[name] = t.grad
        new = rgsm_step(arrays, grads, self.state, self.cfg, self.regularized, alpha=self.alpha)
        for name, arr in new.items():
            self.params[name].data = arr
        self.steps += 1


def hard_prune(params, partitions, lam: float) -> None:
    """Zero every regularized column whose norm does not exceed sqrt(2*lam), in place."""
    for part in partitions:
        if part.regularized:
            t = params[part.layer]
            t.data = prox_columns(t.data, lam, "gl0")


def sparsity_report(params, partitions) -> list:
    """Per regularized matrix: group count, exactly-zero groups, zero fraction."""
    report = []
    for part in partitions:
        if not part.regularized:
            continue
        W = params[part.layer].data
        if W.shape != tuple(part.shape):
            raise DimensionError(f"{part.layer}: shape {W.shape} differs from partition {part.shape}")
        zero = int(np.count_nonzero(column_norms(W) == 0))
        n = part.num_groups
        report.append({"layer": part.layer, "groups": n, "zero": zero, "fraction": zero / n})
    return report


def zero_group_fraction(report) -> float:
    groups = sum(r["groups"] for r in report)
    return sum(r["zero"] for r in report) / groups if groups else 0.0


def report_lines(report) -> str:
    return "\n".join(json.dumps(r) for r in report)
