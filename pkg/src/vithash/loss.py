"""Weighted Cauchy cross-entropy and Cauchy quantization losses.

For continuous hash vectors of length ``dim`` the surrogate Hamming distance
is ``D_S = dim/2 * (1 - cos(h_i, h_j))``, floored at ``eps`` so that every
log below stays finite. The Cauchy match probability is ``gamma / (gamma + D_S)``.

Per pair, the similarity loss is

    w_ij * (s_ij * log(D_S / gamma) + log(1 + gamma / D_S))

which is exactly the weighted Bernoulli cross-entropy under the Cauchy
probability. The quantization loss of one vector is
``log(1 + D_S(|h|, 1) / gamma)``.

Losses are summed over pairs (and over images for quantization); the
per-pair mean is reported separately by the training loop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError

log = logging.getLogger(__name__)

PROBABILITIES = ("cauchy", "sigmoid")


@dataclass
class LossConfig:
    gamma: float = 10.0
    lam: float = 0.1
    eps: float = 1e-6
    # "sigmoid" swaps in the logistic probability for ablation runs only
    probability: str = "cauchy"

    def validate(self) -> None:
        if not self.gamma > 0:
            raise ConfigError(f"loss.gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"loss.lam must be >= 0, got {self.lam}")
        if not self.eps > 0:
            raise ConfigError(f"loss.eps must be > 0, got {self.eps}")
        if self.probability not in PROBABILITIES:
            raise ConfigError(f"loss.probability must be one of {PROBABILITIES}, got {self.probability!r}")


def similarity(labels_a: Iterable[int], labels_b: Iterable[int]) -> int:
    """1 if the two label sets share any label, else 0."""
    a, b = set(labels_a), set(labels_b)
    if not a or not b:
        raise ContractError("similarity of an empty label set is undefined")
    return int(not a.isdisjoint(b))


def pair_weights(s: np.ndarray) -> np.ndarray:
    """Imbalance weights |S|/|S1| for similar pairs and |S|/|S0| for dissimilar ones.

    A batch with no similar (or no dissimilar) pairs cannot estimate the
    imbalance; every weight then falls back to 1.0 and a warning is logged.
    """
    s = np.asarray(s)
    total = s.size
    n_sim = int(np.count_nonzero(s == 1))
    n_dis = total - n_sim
    if n_sim == 0 or n_dis == 0:
        log.warning("batch has %d similar and %d dissimilar pairs; using unit pair weights", n_sim, n_dis)
        return np.ones(total, dtype=np.float64)
    return np.where(s == 1, total / n_sim, total / n_dis).astype(np.float64)


@dataclass
class SimilarityBatch:
    """Pairs ``(left[p], right[p])`` of a batch with labels ``s`` and weights ``w``."""

    left: np.ndarray
    right: np.ndarray
    s: np.ndarray
    w: np.ndarray
    batch_size: int

    @classmethod
    def from_labels(cls, labels: Sequence[Iterable[int]], pairs: Sequence[tuple[int, int]] | None = None):
        """All unordered in-batch pairs ``i < j`` unless ``pairs`` is given."""
        n = len(labels)
        if pairs is None:
            left, right = np.triu_indices(n, k=1)
        else:
            left = np.array([p[0] for p in pairs], dtype=np.int64)
            right = np.array([p[1] for p in pairs], dtype=np.int64)
        if left.size == 0:
            raise ContractError("a similarity batch needs at least one pair")
        sets = [frozenset(lab) for lab in labels]
        s = np.array([similarity(sets[i], sets[j]) for i, j in zip(left, right)], dtype=np.float64)
        return cls(left, right, s, pair_weights(s), n)

    @property
    def num_pairs(self) -> int:
        return self.s.size

    @property
    def num_similar(self) -> int:
        return int(self.s.sum())

    def matrix(self) -> np.ndarray:
        """Dense symmetric n x n similarity matrix (diagonal 1)."""
        m = np.eye(self.batch_size)
        m[self.left, self.right] = self.s
        m[self.right, self.left] = self.s
        return m


def ds_distance(h_i, h_j, eps: float = 1e-6) -> Tensor:
    """Surrogate Hamming distance along the last axis, floored at ``eps``."""
    h_i, h_j = ad.as_tensor(h_i), ad.as_tensor(h_j)
    for name, h in (("h_i", h_i), ("h_j", h_j)):
        if not np.all(np.any(h.data != 0, axis=-1)):
            raise NumericError(f"ds_distance: {name} has zero norm")
    dim = h_i.shape[-1]
    d = ad.scale(1.0 - ad.cosine(h_i, h_j, axis=-1), dim / 2.0)
    return ad.clamp_min(d, eps)


def cauchy_prob(d, gamma: float):
    """gamma / (gamma + d); accepts floats, arrays or tensors."""
    if isinstance(d, Tensor):
        return ad.div(gamma, d + gamma)
    return gamma / (gamma + np.asarray(d, dtype=np.float64))


def cauchy_ce_from_distance(d: Tensor, s, w, gamma: float) -> Tensor:
    d = ad.as_tensor(d)
    term = ad.mul(s, ad.log(ad.scale(d, 1.0 / gamma))) + ad.log(1.0 + ad.div(gamma, d))
    return ad.mul(w, term)


def sigmoid_ce_from_distance(d: Tensor, s, w, dim: int) -> Tensor:
    # logistic probability of (dim/2 - D): -log p = softplus(D - dim/2)
    d = ad.as_tensor(d)
    s = np.asarray(s, dtype=np.float64)
    half = dim / 2.0
    term = ad.mul(s, ad.softplus(d - half)) + ad.mul(1.0 - s, ad.softplus(half - d))
    return ad.mul(w, term)


def cauchy_ce_loss(h_i, h_j, s, w, gamma: float, eps: float = 1e-6) -> Tensor:
    """Per-pair weighted Cauchy cross-entropy (shape = broadcast leading dims)."""
    return cauchy_ce_from_distance(ds_distance(h_i, h_j, eps), s, w, gamma)


def quantization_loss(h, gamma: float, eps: float = 1e-6) -> Tensor:
    """Per-vector Cauchy quantization loss; depends on ``h`` only through ``|h|``."""
    h = ad.as_tensor(h)
    a = ad.absolute(h)
    if not np.all(np.any(a.data != 0, axis=-1)):
        raise NumericError("quantization_loss: hash vector is all zeros")
    d = ds_distance(a, np.ones(h.shape[-1]), eps)
    return ad.log(1.0 + ad.scale(d, 1.0 / gamma))


def bayesian_loss(h: Tensor, batch: SimilarityBatch, cfg: LossConfig) -> Tensor:
    """Summed pair loss for one stream of batch hash vectors (n, dim)."""
    d = ds_distance(h[batch.left], h[batch.right], cfg.eps)
    if cfg.probability == "sigmoid":
        per_pair = sigmoid_ce_from_distance(d, batch.s, batch.w, h.shape[-1])
    else:
        per_pair = cauchy_ce_from_distance(d, batch.s, batch.w, cfg.gamma)
    return per_pair.sum()


def total_loss(streams: Sequence[Tensor], batch: SimilarityBatch, cfg: LossConfig):
    """Global + local Bayesian losses plus ``lam`` times the quantization losses.

    ``streams`` holds the global hash batch followed by the K local ones,
    each of shape (n, dim_stream). Returns ``(loss, parts)`` where ``parts``
    has the scalar tensors ``bayes`` and ``quant``.
    """
    cfg.validate()
    if not streams:
        raise ContractError("total_loss needs at least one hash stream")
    for h in streams:
        if h.shape[0] != batch.batch_size:
            raise ContractError(f"stream of shape {h.shape} does not match batch size {batch.batch_size}")
    bayes = sum(bayesian_loss(h, batch, cfg) for h in streams)
    if cfg.lam > 0:
        quant = sum(quantization_loss(h, cfg.gamma, cfg.eps).sum() for h in streams)
        loss = bayes + ad.scale(quant, cfg.lam)
    else:
        # reported only; kept off the tape so it cannot reach any gradient
        quant = sum(quantization_loss(h.detach(), cfg.gamma, cfg.eps).sum() for h in streams)
        loss = bayes
    return loss, {"bayes": bayes, "quant": quant}
