"""Speaker/content disentangling VAE with a self-attention decoder.

The encoder maps a (T, mel) feature matrix to two diagonal Gaussians: a small
speaker latent read from the BiLSTM's final states and a larger content
latent read from the flattened BiLSTM outputs.  During training the speaker
posteriors of all utterances in a speaker group are pooled (arithmetic mean
of means, geometric mean of standard deviations) and a single speaker sample
is shared by the whole group.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import io as tio
from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .layers import LSTM, Conv1dStack, Linear, ModelParams, MultiHeadSelfAttention, PostNet
from .tensor import Tensor

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0


@dataclass
class ModelConfig:
    """Architecture and loss settings; defaults reproduce the full-size layer table."""

    frames: int = 64
    mel_bins: int = 80
    conv_channels: int = 512
    bilstm_hidden: int = 64
    fc_width: int = 2048
    speaker_dim: int = 4
    content_dim: int = 28
    decoder_input: int = 32
    decoder_frame_width: int = 128
    decoder_lstm1_hidden: int = 512
    decoder_lstm2_hidden: int = 1024
    decoder_lstm2_layers: int = 2
    heads: int = 8
    head_dim: int = 128
    postnet_channels: int = 512
    postnet_depth: int = 5
    beta_vae: float = 1.0
    use_attention: bool = True
    attention_residual: bool = True
    rec_norm: str = "mse"
    kl_normalization: str = "element"
    activation: str = "relu"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, int):
                continue
            if v <= 0:
                raise ContractError(f"model.{f.name} must be positive, got {v}")
        if self.speaker_dim + self.content_dim != self.decoder_input:
            raise ContractError(
                f"speaker_dim + content_dim = {self.speaker_dim + self.content_dim} "
                f"!= decoder input width {self.decoder_input}"
            )
        if self.heads * self.head_dim != self.decoder_lstm2_hidden:
            raise ContractError(
                f"heads x head_dim = {self.heads * self.head_dim} != attention width {self.decoder_lstm2_hidden}"
            )
        if self.beta_vae < 1.0:
            raise ContractError(f"beta_vae must be >= 1, got {self.beta_vae}")
        if self.rec_norm not in ("mse", "l1"):
            raise ContractError(f"rec_norm must be 'mse' or 'l1', got {self.rec_norm!r}")
        if self.kl_normalization not in ("element", "frame", "none"):
            raise ContractError(f"kl_normalization must be 'element', 'frame' or 'none', got {self.kl_normalization!r}")
        if self.activation not in ("relu", "tanh"):
            raise ContractError(f"activation must be 'relu' or 'tanh', got {self.activation!r}")

    @classmethod
    def scaled(cls, divisor: int, frames: int = 64, **overrides) -> "ModelConfig":
        """Divide every hidden width by ``divisor`` (latent sizes and head count are kept)."""
        base = cls()
        kw = dict(
            frames=frames,
            conv_channels=base.conv_channels // divisor,
            bilstm_hidden=base.bilstm_hidden // divisor,
            fc_width=base.fc_width // divisor,
            decoder_frame_width=base.decoder_frame_width // divisor,
            decoder_lstm1_hidden=base.decoder_lstm1_hidden // divisor,
            decoder_lstm2_hidden=base.decoder_lstm2_hidden // divisor,
            head_dim=base.head_dim // divisor,
            postnet_channels=base.postnet_channels // divisor,
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GaussianDiag:
    """Diagonal Gaussian; ``mean`` and ``log_var`` share shape (..., dim)."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(f"GaussianDiag: mean {self.mean.shape} vs log_var {self.log_var.shape}")

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * np.clip(self.log_var.data, LOG_VAR_MIN, LOG_VAR_MAX))

    def row(self, i: int) -> "GaussianDiag":
        take = lambda t: T.reshape(T.slice_axis(t, 0, i, i + 1), (t.shape[-1],))
        return GaussianDiag(take(self.mean), take(self.log_var))


@dataclass
class LatentPair:
    speaker: GaussianDiag
    content: GaussianDiag

    def __len__(self):
        return self.speaker.mean.shape[0] if self.speaker.mean.ndim == 2 else 1

    def __getitem__(self, i):
        return LatentPair(self.speaker.row(i), self.content.row(i))


def _check_finite(d: GaussianDiag, what):
    if not (np.all(np.isfinite(d.mean.data)) and np.all(np.isfinite(d.log_var.data))):
        raise DomainError(f"{what}: non-finite distribution parameters")


def _pool_log_var(log_vars: Tensor) -> Tensor:
    # geometric mean of sigmas == arithmetic mean of log-variances
    return T.mean(log_vars, axis=0)


def _pool_stacked(means: Tensor, log_vars: Tensor) -> GaussianDiag:
    return GaussianDiag(T.mean(means, axis=0), _pool_log_var(log_vars))


def group_pool_speaker(dists: Sequence[GaussianDiag]) -> GaussianDiag:
    """Pool per-utterance speaker posteriors into one group distribution."""
    if len(dists) == 0:
        raise ContractError("group_pool_speaker: empty group")
    dim = dists[0].dim
    for d in dists:
        if d.mean.shape != (dim,):
            raise DimensionError(f"group_pool_speaker: expected vectors of length {dim}, got {d.mean.shape}")
    if len(dists) == 1:
        return dists[0]
    means = T.concat([T.reshape(d.mean, (1, dim)) for d in dists], axis=0)
    log_vars = T.concat([T.reshape(d.log_var, (1, dim)) for d in dists], axis=0)
    return _pool_stacked(means, log_vars)


def pool_rows(d: GaussianDiag, start: int, stop: int) -> GaussianDiag:
    """Pool rows ``start:stop`` of a batched distribution (same rule as :func:`group_pool_speaker`)."""
    if stop - start == 1:
        return d.row(start)
    return _pool_stacked(T.slice_axis(d.mean, 0, start, stop), T.slice_axis(d.log_var, 0, start, stop))


def reparameterize(d: GaussianDiag, rng: np.random.Generator) -> Tensor:
    """Draw ``mean + sigma * eps``; eps is a constant so gradients reach mean and log_var only."""
    eps = Tensor(rng.standard_normal(d.mean.shape))
    std = T.exp(T.scale(T.clamp(d.log_var, LOG_VAR_MIN, LOG_VAR_MAX), 0.5))
    return T.add(d.mean, T.mul(std, eps))


def kl_diag_gaussian(d: GaussianDiag) -> Tensor:
    """KL(N(mean, exp(log_var)) || N(0, I)) summed over the last axis."""
    _check_finite(d, "kl_diag_gaussian")
    lv = T.clamp(d.log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    terms = T.sub(T.add(T.mul(d.mean, d.mean), T.exp(lv)), T.add(lv, 1.0))
    return T.scale(T.sum(terms, axis=-1), 0.5)


def reconstruction_error(a: Tensor, b: Tensor, norm: str = "mse") -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"reconstruction: shapes {a.shape} and {b.shape} differ")
    diff = T.sub(a, b)
    total = T.squared_l2(diff) if norm == "mse" else T.l1_norm(diff)
    return T.scale(total, 1.0 / diff.size)


def vae_loss(x, xhat, refined, posterior: LatentPair, beta_vae: float = 1.0, norm: str = "mse",
             kl_normalization: str = "none"):
    """Return ``(total, rec, kl)``: two-term reconstruction plus beta-weighted KL.

    ``refined`` is ``xhat + postnet(xhat)``.  The KL is per utterance, averaged
    over the batch; with ``kl_normalization="element"`` (or ``"frame"``) it is
    further divided by the feature elements (or frames) per utterance so that
    it sits on the same per-element scale as the mean reconstruction error.
    """
    kl = T.add(kl_diag_gaussian(posterior.speaker), kl_diag_gaussian(posterior.content))
    if kl.ndim:
        kl = T.mean(kl)
    return combine_loss(x, xhat, refined, kl, beta_vae, norm, kl_normalization)


def combine_loss(x, xhat, refined, kl, beta_vae=1.0, norm="mse", kl_normalization="none"):
    """``(total, rec, kl)`` from reconstructions and an already averaged KL in nats."""
    x, xhat, refined = (T._wrap(t) for t in (x, xhat, refined))
    if not (x.shape == xhat.shape == refined.shape):
        raise DimensionError(f"loss: shapes {x.shape}, {xhat.shape}, {refined.shape} differ")
    rec = T.add(reconstruction_error(xhat, x, norm), reconstruction_error(refined, x, norm))
    if kl_normalization == "element":
        kl = T.scale(kl, 1.0 / int(np.prod(x.shape[-2:])))
    elif kl_normalization == "frame":
        kl = T.scale(kl, 1.0 / int(x.shape[-2]))
    total = T.add(rec, T.scale(kl, beta_vae))
    return total, rec, kl


LOGVAR_INIT = -5.0
MEAN_HEAD_GAIN = 6.0
# U(-1/sqrt(fan_in), 1/sqrt(fan_in)); with fan_in = T * 2H >> width the
# column norms start near the group threshold, so the optimizer, not the
# init, decides which frame features the encoder keeps
ENCODER_FC_GAIN = 1.0 / np.sqrt(3.0)


class VoiceVAE:
    """Encoder, decoder (with optional self-attention) and Post-Net sharing one parameter registry."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config = config or ModelConfig()
        config.validate()
        self.seed = seed
        rng = np.random.default_rng(seed)
        p = self.params = ModelParams()
        c = config
        act = c.activation
        self.enc_conv = Conv1dStack(p, "encoder.conv", [c.mel_bins] + [c.conv_channels] * 3, rng, activation=act)
        self.enc_lstm = LSTM(p, "encoder.bilstm", c.conv_channels, c.bilstm_hidden, 2, rng, bidirectional=True)
        g = np.sqrt(2.0) if act == "relu" else 1.0
        self.enc_fc = Linear(p, "encoder.fc.0", c.frames * 2 * c.bilstm_hidden, c.fc_width, rng,
                             gain=ENCODER_FC_GAIN)
        self.enc_content = Linear(p, "encoder.content.0", c.fc_width, 2 * c.content_dim, rng)
        self.enc_speaker = Linear(p, "encoder.speaker.0", 2 * 2 * c.bilstm_hidden, 2 * c.speaker_dim, rng)
        # posteriors start narrow with means on the prior's unit scale, so early
        # decodes see informative latents rather than sampling noise
        for head, dim in ((self.enc_content, c.content_dim), (self.enc_speaker, c.speaker_dim)):
            head.weight.data[:dim] *= MEAN_HEAD_GAIN
            head.bias.data[dim:] = LOGVAR_INIT
        self.dec_fc0 = Linear(p, "decoder.fc.0", c.decoder_input, c.fc_width, rng, gain=g)
        self.dec_fc1 = Linear(p, "decoder.fc.1", c.fc_width, c.frames * c.decoder_frame_width, rng, gain=g)
        self.dec_lstm1 = LSTM(p, "decoder.lstm.0", c.decoder_frame_width, c.decoder_lstm1_hidden, 1, rng)
        self.dec_conv = Conv1dStack(p, "decoder.conv", [c.decoder_lstm1_hidden] + [c.conv_channels] * 3, rng,
                                    activation=act)
        self.dec_lstm2 = LSTM(p, "decoder.lstm.1", c.conv_channels, c.decoder_lstm2_hidden,
                              c.decoder_lstm2_layers, rng)
        # parameters exist even when attention is switched off so checkpoints share one layout
        self.attention = MultiHeadSelfAttention(p, "decoder.attn", c.heads, c.head_dim, rng,
                                                residual=c.attention_residual)
        self.dec_out = Linear(p, "decoder.out.0", c.decoder_lstm2_hidden, c.mel_bins, rng)
        self.postnet = PostNet(p, "postnet", c.mel_bins, c.postnet_channels, rng, depth=c.postnet_depth)
        self._act = T.relu if act == "relu" else T.tanh

    def layers(self):
        """``(name, layer)`` pairs in forward order."""
        return [
            ("encoder.conv", self.enc_conv),
            ("encoder.bilstm", self.enc_lstm),
            ("encoder.fc.0", self.enc_fc),
            ("encoder.content.0", self.enc_content),
            ("encoder.speaker.0", self.enc_speaker),
            ("decoder.fc.0", self.dec_fc0),
            ("decoder.fc.1", self.dec_fc1),
            ("decoder.lstm.0", self.dec_lstm1),
            ("decoder.conv", self.dec_conv),
            ("decoder.lstm.1", self.dec_lstm2),
            ("decoder.attn", self.attention),
            ("decoder.out.0", self.dec_out),
            ("postnet", self.postnet),
        ]

    # --- encoder -----------------------------------------------------------
    def encode(self, x) -> LatentPair:
        """Batched posterior for ``x`` of shape (batch, T, mel); index the result per item."""
        c = self.config
        x = T._wrap(x)
        if x.ndim != 3 or x.shape[1:] != (c.frames, c.mel_bins):
            raise DimensionError(f"encode: expected (batch, {c.frames}, {c.mel_bins}), got {x.shape}")
        batch = x.shape[0]
        h = self.enc_conv(T.transpose(x, (0, 2, 1)))
        out, finals = self.enc_lstm(T.transpose(h, (2, 0, 1)))
        flat = T.reshape(T.transpose(out, (1, 0, 2)), (batch, c.frames * 2 * c.bilstm_hidden))
        content = self.enc_content(self._act(self.enc_fc(flat)))
        spk_in = T.concat([hc[0] for hc in finals], axis=1)
        speaker = self.enc_speaker(spk_in)
        ds, dc = c.speaker_dim, c.content_dim
        return LatentPair(
            speaker=GaussianDiag(T.slice_axis(speaker, 1, 0, ds), T.slice_axis(speaker, 1, ds, 2 * ds)),
            content=GaussianDiag(T.slice_axis(content, 1, 0, dc), T.slice_axis(content, 1, dc, 2 * dc)),
        )

    # --- decoder -----------------------------------------------------------
    def decode(self, z_s, z_c) -> Tensor:
        """Decode batched latents (batch, d_s), (batch, d_c) to (batch, T, mel)."""
        c = self.config
        z_s, z_c = T._wrap(z_s), T._wrap(z_c)
        if z_s.ndim == 1:
            z_s, z_c = T.reshape(z_s, (1, -1)), T.reshape(z_c, (1, -1))
        if z_s.shape[-1] != c.speaker_dim or z_c.shape[-1] != c.content_dim or z_s.shape[0] != z_c.shape[0]:
            raise DimensionError(
                f"decode: expected speaker (batch, {c.speaker_dim}) and content (batch, {c.content_dim}), "
                f"got {z_s.shape} and {z_c.shape}"
            )
        batch = z_s.shape[0]
        h = self._act(self.dec_fc0(T.concat([z_s, z_c], axis=1)))
        h = self._act(self.dec_fc1(h))
        h = T.transpose(T.reshape(h, (batch, c.frames, c.decoder_frame_width)), (1, 0, 2))
        h, _ = self.dec_lstm1(h)
        h = self.dec_conv(T.transpose(h, (1, 2, 0)))
        h, _ = self.dec_lstm2(T.transpose(h, (2, 0, 1)))
        if c.use_attention:
            h = self.attention(h)
        y = self.dec_out(T.reshape(h, (c.frames * batch, c.decoder_lstm2_hidden)))
        return T.transpose(T.reshape(y, (c.frames, batch, c.mel_bins)), (1, 0, 2))

    def refine(self, xhat: Tensor) -> Tensor:
        """``xhat + postnet(xhat)`` for (batch, T, mel)."""
        r = self.postnet(T.transpose(xhat, (0, 2, 1)))
        return T.add(xhat, T.transpose(r, (0, 2, 1)))

    # --- persistence -------------------------------------------------------
    def state(self) -> dict:
        return self.params.copy_arrays()

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model": self.config.to_dict(), "seed": self.seed}
        if extra:
            meta.update(extra)
        tio.save_checkpoint(path, self.params.arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["VoiceVAE", dict]:
        arrays, meta = tio.load_checkpoint(path)
        if meta is None or "model" not in meta:
            raise ContractError(f"{path}: checkpoint has no model config record")
        model = cls(ModelConfig.from_dict(meta["model"]), seed=meta.get("seed", 0))
        model.params.load_arrays(arrays)
        return model, meta


def _features_batch(utts) -> Tensor:
    return Tensor(np.stack([np.asarray(u.features, dtype=np.float32) for u in utts]))


def forward_groups(model: VoiceVAE, groups, rng: np.random.Generator):
    """Training forward pass over speaker groups; returns ``(total, rec, kl)``.

    Content is sampled per utterance; one speaker sample per group is drawn
    from the pooled distribution and shared by the group's decodes.
    """
    flat = []
    bounds = []
    for g in groups:
        if len(g) == 0:
            raise ContractError("train_step: empty speaker group")
        spk = g[0].speaker_id
        if any(u.speaker_id != spk for u in g):
            raise ContractError(f"train_step: group mixes speakers {sorted({u.speaker_id for u in g})}")
        bounds.append((len(flat), len(flat) + len(g)))
        flat.extend(g)
    x = _features_batch(flat)
    post = model.encode(x)
    ds = model.config.speaker_dim
    z_s_rows, spk_kl = [], []
    for start, stop in bounds:
        pooled = pool_rows(post.speaker, start, stop)
        z = T.reshape(reparameterize(pooled, rng), (1, ds))
        z_s_rows.extend([z] * (stop - start))
        spk_kl.append(T.reshape(kl_diag_gaussian(pooled), (1,)))
    z_s = T.concat(z_s_rows, axis=0)
    z_c = reparameterize(post.content, rng)
    xhat = model.decode(z_s, z_c)
    refined = model.refine(xhat)
    c = model.config
    # the group's speaker KL is paid once per group, content KL once per utterance
    kl = T.add(T.scale(T.sum(T.concat(spk_kl, axis=0)), 1.0 / len(flat)), T.mean(kl_diag_gaussian(post.content)))
    return combine_loss(x, xhat, refined, kl, c.beta_vae, c.rec_norm, c.kl_normalization)


def train_step(model: VoiceVAE, groups, optimizer, rng: np.random.Generator) -> dict:
    """One optimizer step on a batch given as a list of single-speaker groups."""
    model.params.zero_grad()
    total, rec, kl = forward_groups(model, groups, rng)
    metrics = {"total": total.item(), "rec": rec.item(), "kl": kl.item()}
    if not np.isfinite(metrics["total"]):
        return metrics
    T.backward(total)
    optimizer.step()
    return metrics


def convert(model: VoiceVAE, source_utts, target_utts) -> list:
    """Content of each source utterance rendered with the pooled target speaker.

    Posterior means replace sampling, so the result is deterministic.
    """
    if not source_utts or not target_utts:
        raise ContractError("convert: source and target utterance lists must be nonempty")
    with T.no_grad():
        src = model.encode(_features_batch(source_utts))
        tgt = model.encode(_features_batch(target_utts))
        spk = pool_rows(tgt.speaker, 0, len(target_utts))
        ds = model.config.speaker_dim
        z_s = T.concat([T.reshape(spk.mean, (1, ds))] * len(source_utts), axis=0)
        out = model.refine(model.decode(z_s, src.content.mean))
    return [out.data[i] for i in range(len(source_utts))]


def reconstruct(model: VoiceVAE, utts) -> np.ndarray:
    """Per-utterance reconstruction from posterior means (no group pooling)."""
    with T.no_grad():
        post = model.encode(_features_batch(utts))
        return model.refine(model.decode(post.speaker.mean, post.content.mean)).data
