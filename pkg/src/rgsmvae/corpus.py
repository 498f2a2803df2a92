"""Deterministic synthetic speaker corpus and utterance file I/O.

Each speaker owns a smooth spectral envelope and a formant-scale factor,
both set by two hidden factors;
each content id owns smooth formant, energy and intonation trajectories.
An utterance renders the content's tracks through the speaker's
vocal-tract scaling, adds the envelope and a small amount of noise.
Values sit roughly in [-4, 4] like log-mel features.

Every utterance draws from its own RNG stream keyed on (seed, speaker,
content), so generation order and parallelism never change the output.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as tio
from .errors import ContractError, DimensionError, FormatError

_SPEAKER_STREAM = 1
_CONTENT_STREAM = 2
_NOISE_STREAM = 3


@dataclass
class Utterance:
    speaker_id: int
    content_id: int
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise DimensionError(f"utterance features must be (T, mel), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("utterance features must be finite")


@dataclass
class CorpusSpec:
    seed: int = 0
    n_speakers_train: int = 8
    n_speakers_heldout: int = 4
    utterances_per_speaker: int = 40
    contents_shared: bool = True
    frames: int = 64
    mel_bins: int = 80
    noise: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_speakers_train < 1:
            raise ContractError("corpus.n_speakers_train must be >= 1")
        if self.n_speakers_heldout < 0:
            raise ContractError("corpus.n_speakers_heldout must be >= 0")
        if self.utterances_per_speaker < 1:
            raise ContractError("corpus.utterances_per_speaker must be >= 1")
        if self.frames < 2 or self.mel_bins < 8:
            raise ContractError("corpus needs frames >= 2 and mel_bins >= 8")
        if self.noise < 0:
            raise ContractError("corpus.noise must be nonnegative")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown corpus config fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def train_speakers(self):
        return list(range(self.n_speakers_train))

    @property
    def heldout_speakers(self):
        return list(range(self.n_speakers_train, self.n_speakers_train + self.n_speakers_heldout))

    def content_ids(self, speaker):
        u = self.utterances_per_speaker
        if self.contents_shared:
            return list(range(u))
        return [speaker * u + k for k in range(u)]


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *key]))


def _radical_inverse(i: int, base: int) -> float:
    # i-th Halton coordinate: the base-b digits of i mirrored about the point
    out, f = 0.0, 1.0 / base
    while i:
        i, d = divmod(i, base)
        out += d * f
        f /= base
    return out


def speaker_traits(spec: CorpusSpec, speaker: int) -> dict:
    """Envelope and formant scale of one speaker, driven by two hidden factors.

    ``tract`` acts like vocal-tract length (formant scale and spectral tilt move
    together) and ``quality`` sets the envelope's level and curvature.  With
    few factors a handful of training speakers covers the space, so unseen
    speakers are interpolations rather than extrapolations.  Factors follow a
    randomly shifted Halton sequence, which spreads any number of speakers
    evenly; independent draws leave some pairs nearly indistinguishable.
    """
    shift = _stream(spec.seed, _SPEAKER_STREAM).uniform(size=2)
    point = np.array([_radical_inverse(speaker + 1, 2), _radical_inverse(speaker + 1, 3)])
    tract, quality = 2.0 * ((point + shift) % 1.0) - 1.0
    f = np.linspace(0.0, 1.0, spec.mel_bins)
    envelope = 1.5 * tract * (2 * f - 1) + quality * (0.5 + 1.2 * np.cos(2 * np.pi * f))
    return {
        "envelope": envelope,
        "formant_scale": 1.0 - 0.12 * tract,
        "ripple_period": 4.5,
        "factors": (float(tract), float(quality)),
    }


def content_tracks(spec: CorpusSpec, content: int) -> dict:
    """Per-frame formant centres (fractions of the mel axis), amplitudes, energy and intonation.

    Each track is a base value plus two low-frequency cosines, so a content id
    is a smooth trajectory with a handful of degrees of freedom.
    """
    rng = _stream(spec.seed, _CONTENT_STREAM, content)
    t = np.linspace(0.0, 1.0, spec.frames)[:, None]

    def track(base, depth, n):
        freq = rng.uniform(0.5, 2.0, size=(2, n))
        phase = rng.uniform(0.0, 2 * np.pi, size=(2, n))
        wave = (np.cos(2 * np.pi * freq[0] * t + phase[0]) + 0.5 * np.cos(2 * np.pi * freq[1] * t + phase[1])) / 1.5
        return base + depth * wave

    base = rng.uniform([0.10, 0.32, 0.60], [0.20, 0.46, 0.72])
    return {
        "centres": track(base, 0.06, 3),
        "amps": track(rng.uniform(1.0, 1.8, size=3), 0.4, 3),
        "energy": track(rng.uniform(-0.2, 0.2), 0.6, 1)[:, 0],
        "intonation": track(0.0, 0.1, 1)[:, 0],
    }


def render(spec: CorpusSpec, speaker: int, content: int) -> np.ndarray:
    spk = speaker_traits(spec, speaker)
    cnt = content_tracks(spec, content)
    bins = np.arange(spec.mel_bins, dtype=np.float64)
    centres = cnt["centres"] * spec.mel_bins * spk["formant_scale"]  # (T, 3)
    width = 0.035 * spec.mel_bins
    formants = (cnt["amps"][:, :, None] * np.exp(-((bins[None, None, :] - centres[:, :, None]) ** 2) / (2 * width ** 2))).sum(axis=1)
    period = spk["ripple_period"] * (1.0 + cnt["intonation"])[:, None]
    ripple = 0.25 * np.cos(2 * np.pi * bins[None, :] / period)
    noise = _stream(spec.seed, _NOISE_STREAM, speaker, content).standard_normal((spec.frames, spec.mel_bins))
    x = -1.0 + cnt["energy"][:, None] + formants + ripple + spk["envelope"][None, :] + spec.noise * noise
    return x.astype(np.float32)


def _threads():
    try:
        return max(1, int(os.environ.get("RGSMVAE_THREADS", "1")))
    except ValueError:
        return 1


def generate(spec: CorpusSpec):
    """Return ``(train, heldout)`` lists of utterances ordered by (speaker, content)."""
    spec.validate()

    def build(speakers):
        jobs = [(s, c) for s in speakers for c in spec.content_ids(s)]
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            feats = list(pool.map(lambda sc: render(spec, *sc), jobs))
        return [Utterance(s, c, f) for (s, c), f in zip(jobs, feats)]

    return build(spec.train_speakers), build(spec.heldout_speakers)


# --- file I/O ------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_utterance(u: Utterance, path) -> None:
    path = Path(path)
    tio.save_tensor(u.features, path)
    _sidecar(path).write_text(json.dumps({"speaker": int(u.speaker_id), "content": int(u.content_id)}) + "\n")


_NAME_ID = re.compile(r"(\d+)$")


def _id_from_name(name: str):
    m = _NAME_ID.search(name)
    return int(m.group(1)) if m else -1


def load_utterance(path) -> Utterance:
    """Load a TNSR feature file; ids come from the JSON sidecar or, failing that, the path."""
    path = Path(path)
    arr = tio.load_tensor(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a rank-2 (T, mel) tensor, got rank {arr.ndim}", 5)
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text())
        speaker, content = int(meta["speaker"]), int(meta["content"])
    else:
        speaker, content = _id_from_name(path.parent.name), _id_from_name(path.stem)
    return Utterance(speaker, content, arr)


def utterance_path(root, split, u: Utterance) -> Path:
    return Path(root) / split / f"spk{u.speaker_id}" / f"utt{u.content_id}.tnsr"


def write_corpus(root, train, heldout) -> None:
    for split, utts in (("train", train), ("heldout", heldout)):
        (Path(root) / split).mkdir(parents=True, exist_ok=True)
        for u in utts:
            p = utterance_path(root, split, u)
            p.parent.mkdir(parents=True, exist_ok=True)
            save_utterance(u, p)


def load_dir(path) -> list:
    """Load every ``*.tnsr`` below ``path`` (or the single file), sorted by (speaker, content)."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("*.tnsr"))
    utts = [load_utterance(p) for p in files]
    return sorted(utts, key=lambda u: (u.speaker_id, u.content_id))


def read_corpus(root):
    root = Path(root)
    if not (root / "train").is_dir():
        raise FileNotFoundError(f"{root}: no train/ directory")
    heldout = load_dir(root / "heldout") if (root / "heldout").is_dir() else []
    return load_dir(root / "train"), heldout


def by_speaker(utts) -> dict:
    out: dict = {}
    for u in utts:
        out.setdefault(u.speaker_id, []).append(u)
    return dict(sorted(out.items()))
