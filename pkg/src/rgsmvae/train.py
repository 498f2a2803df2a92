"""Run configuration and the epoch loop."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rgsm
from .corpus import CorpusSpec, by_speaker
from .errors import ContractError, DomainError
from .metrics import recon_mse
from .model import ModelConfig, VoiceVAE, train_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    group_size: int = 4
    groups_per_batch: int = 4
    seed: int = 0
    val_utts_per_speaker: int = 10
    use_rgsm: bool = True
    clip_norm: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ContractError("train.epochs must be >= 0")
        if self.group_size < 1 or self.groups_per_batch < 1:
            raise ContractError("train.group_size and train.groups_per_batch must be >= 1")
        if self.val_utts_per_speaker < 0:
            raise ContractError("train.val_utts_per_speaker must be >= 0")
        if self.clip_norm < 0:
            raise ContractError("train.clip_norm must be >= 0")


def _section(cls, d):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ContractError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    rgsm: rgsm.RgsmConfig = field(default_factory=rgsm.RgsmConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "run"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ContractError("config must be a JSON object")
        unknown = set(d) - {"model", "rgsm", "corpus", "train", "out"}
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                model=_section(ModelConfig, d.get("model", {})),
                rgsm=_section(rgsm.RgsmConfig, d.get("rgsm", {})),
                corpus=_section(CorpusSpec, d.get("corpus", {})),
                train=_section(TrainConfig, d.get("train", {})),
                out=str(d.get("out", "run")),
            )
        except TypeError as exc:
            raise ContractError(f"invalid config: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}: not valid JSON ({exc})") from None


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss; ``last_good`` holds the previous epoch's parameters."""

    def __init__(self, message, last_good, epoch):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


def split_validation(train_utts, k: int):
    """Hold out ``k`` utterances of every training speaker.

    The held-out window rotates with the speaker's rank, so with shared
    content ids every held-out sentence is still heard from other speakers.
    """
    fit, val = [], []
    for rank, (spk, utts) in enumerate(by_speaker(train_utts).items()):
        utts = sorted(utts, key=lambda u: u.content_id)
        n = len(utts)
        if k >= n:
            raise ContractError(f"speaker {spk}: {n} utterances cannot spare {k} for validation")
        held = {(rank * k + j) % n for j in range(k)}
        fit.extend(u for i, u in enumerate(utts) if i not in held)
        val.extend(u for i, u in enumerate(utts) if i in held)
    return fit, val


def make_batches(utts, group_size: int, groups_per_batch: int, rng: np.random.Generator):
    """Shuffle into single-speaker groups, then into batches of groups."""
    groups = []
    for _, su in by_speaker(utts).items():
        order = rng.permutation(len(su))
        for i in range(0, len(su), group_size):
            groups.append([su[j] for j in order[i:i + group_size]])
    perm = rng.permutation(len(groups))
    groups = [groups[i] for i in perm]
    return [groups[i:i + groups_per_batch] for i in range(0, len(groups), groups_per_batch)]


class _Clipped:
    """Wraps an optimizer, rescaling gradients to a maximum global norm first."""

    def __init__(self, opt, params, max_norm):
        self.opt, self.params, self.max_norm = opt, params, max_norm

    def step(self):
        grads = [t.grad for t in self.params.values() if t.grad is not None]
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
        if norm > self.max_norm:
            s = self.max_norm / norm
            for t in self.params.values():
                if t.grad is not None:
                    t.grad = t.grad * np.float32(s)
        self.opt.step()


class Trainer:
    def __init__(self, run: RunConfig, model: VoiceVAE | None = None):
        self.run = run
        self.model = model or VoiceVAE(run.model, seed=run.train.seed)
        min_width = run.rgsm.min_width
        partitions = rgsm.build_partitions(self.model, min_width)
        self.candidate_partitions = partitions
        if not run.train.use_rgsm:
            partitions = [dataclasses.replace(p, regularized=False) for p in partitions]
        self.partitions = partitions
        self.optimizer = rgsm.RGSM(self.model.params, partitions, run.rgsm)
        step_opt = self.optimizer
        if run.train.clip_norm > 0:
            step_opt = _Clipped(self.optimizer, self.model.params, run.train.clip_norm)
        self._step_opt = step_opt
        self.history: list = []

    @property
    def regularized_layers(self):
        return [p.layer for p in self.partitions if p.regularized]

    def zero_fraction(self) -> float:
        """Exactly-zero group fraction over the layers the width rule selects."""
        return rgsm.zero_group_fraction(rgsm.sparsity_report(self.model.params, self.candidate_partitions))

    def fit(self, train_utts, val_utts=(), callback=None) -> list:
        """Train for ``run.train.epochs`` epochs; hard-prune at the end when RGSM is on."""
        tc = self.run.train
        last_good = self.model.state()
        for epoch in range(1, tc.epochs + 1):
            self.optimizer.begin_epoch(epoch - 1)
            rng = np.random.default_rng(np.random.SeedSequence([tc.seed, epoch]))
            batches = make_batches(train_utts, tc.group_size, tc.groups_per_batch, rng)
            sums = {"total": 0.0, "rec": 0.0, "kl": 0.0}
            count = 0
            for b, groups in enumerate(batches):
                step_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, epoch, b, 1]))
                try:
                    m = train_step(self.model, groups, self._step_opt, step_rng)
                except DomainError as exc:
                    raise NumericalAbort(f"epoch {epoch}, batch {b}: {exc}", last_good, epoch) from exc
                if not all(np.isfinite(v) for v in m.values()):
                    raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {b}", last_good, epoch)
                n = sum(len(g) for g in groups)
                for k in sums:
                    sums[k] += m[k] * n
                count += n
            entry = {"epoch": epoch, **{k: v / count for k, v in sums.items()},
                     "zero_group_fraction": self.zero_fraction()}
            if val_utts:
                entry["val_recon_mse"] = recon_mse(self.model, list(val_utts))
            if not all(np.isfinite(v) for v in entry.values()):
                raise NumericalAbort(f"non-finite metrics at epoch {epoch}", last_good, epoch)
            last_good = self.model.state()
            self.history.append(entry)
            if callback:
                callback(entry)
        if tc.epochs > 0 and tc.use_rgsm:
            rgsm.hard_prune(self.model.params, self.partitions, self.run.rgsm.lam)
        return self.history

    def sparsity(self):
        return rgsm.sparsity_report(self.model.params, self.candidate_partitions)
