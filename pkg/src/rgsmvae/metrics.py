"""Speaker-classification accuracy of converted utterances.

Embeddings are mean || std pooling of the feature matrix over time; a
converted utterance is assigned to the nearest speaker centroid (Euclidean,
ties to the smallest speaker id).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError
from .model import convert, reconstruct


def embed(features) -> np.ndarray:
    """Per-bin time mean followed by per-bin time standard deviation (float64)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"embed: need (T >= 2, mel) features, got shape {x.shape}")
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


def centroid(utterances) -> np.ndarray:
    if len(utterances) == 0:
        raise ContractError("centroid: no utterances")
    return np.mean([embed(u.features if hasattr(u, "features") else u) for u in utterances], axis=0)


def centroids_by_speaker(groups: dict) -> dict:
    return {spk: centroid(utts) for spk, utts in sorted(groups.items())}


def classify(converted, centroids: dict) -> int:
    if len(centroids) < 2:
        raise ContractError("classify: need at least two candidate speakers")
    e = embed(converted)
    best, best_d = None, np.inf
    for spk in sorted(centroids):
        d = float(np.linalg.norm(e - centroids[spk]))
        if d < best_d:
            best, best_d = spk, d
    return best


def oracle_classifier(converted, centroids, target):
    return target


def conversion_split(model, groups: dict, utterances_per_pair: int = 10, classifier=None,
                     include_identity: bool = False):
    """Accuracy over ordered speaker pairs within one split.

    ``groups`` maps speaker id to that speaker's evaluation utterances; they
    provide the sources, the target speaker's latent, and the centroids.
    Returns ``(accuracy, matrix, correct, total)``; ``matrix[i][j]`` is the
    per-pair accuracy (None on the diagonal unless ``include_identity``).
    """
    speakers = sorted(groups)
    if len(speakers) < 2:
        raise ContractError("conversion accuracy needs at least two speakers")
    cents = centroids_by_speaker(groups)
    matrix = [[None] * len(speakers) for _ in speakers]
    correct = total = 0
    for a, src in enumerate(speakers):
        pool = groups[src]
        sources = [pool[k % len(pool)] for k in range(utterances_per_pair)]
        for b, tgt in enumerate(speakers):
            if a == b and not include_identity:
                continue
            outs = convert(model, sources, groups[tgt])
            hits = 0
            for out in outs:
                if not np.all(np.isfinite(out)):
                    raise DomainError("conversion produced non-finite features")
                pred = classifier(out, cents, tgt) if classifier else classify(out, cents)
                hits += int(pred == tgt)
            matrix[a][b] = hits / len(outs)
            if a != b:
                correct += hits
                total += len(outs)
    return (correct / total if total else 0.0), matrix, correct, total


def conversion_accuracy(model, seen: dict, unseen: dict, utterances_per_pair: int = 10,
                        classifier=None) -> dict:
    """``{"seen": acc, "unseen": acc}`` plus the per-pair matrices."""
    if set(seen) & set(unseen):
        raise ContractError("seen and unseen speaker sets must be disjoint")
    out = {}
    for split, groups in (("seen", seen), ("unseen", unseen)):
        if len(groups) >= 2:
            acc, matrix, _, _ = conversion_split(model, groups, utterances_per_pair, classifier)
        else:
            acc, matrix = None, []
        out[split] = acc
        out[f"{split}_matrix"] = matrix
    return out


def recon_mse(model, utterances) -> float:
    """Mean squared error of posterior-mean reconstructions (after Post-Net)."""
    if not utterances:
        raise ContractError("recon_mse: no utterances")
    x = np.stack([u.features for u in utterances]).astype(np.float64)
    err = 0.0
    for start in range(0, len(utterances), 32):
        chunk = utterances[start:start + 32]
        err += float(((reconstruct(model, chunk) - x[start:start + len(chunk)]) ** 2).sum())
    mse = err / x.size
    if not np.isfinite(mse):
        raise DomainError("reconstruction produced non-finite features")
    return mse
