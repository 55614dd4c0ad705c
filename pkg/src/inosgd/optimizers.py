"""DP-SGD, IDP-SGD and INO-SGD steps plus the generic INO-SGM release.

All optimizers share one reducer: per-datum clipped gradients are ranked,
weighted and summed in rank order. IDP-SGD uses unit weights, INO-SGD uses
the average BIF scores of each rank. Noise comes from a generator dedicated
to the step, so the same iteration draws the same noise under every
optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .accounting import MechanismParams
from .importance import FastIntegrationTable, TailImportanceFunction, importance_scores
from .models import ModelParams, per_sample_losses_and_grads

ORDERS = ("loss", "owner_then_loss")


class SensitivityViolation(ValueError):
    """A released value exceeds its declared norm bound."""


def clip(g, C: float) -> np.ndarray:
    """Scale ``g`` down to norm ``C`` if it is longer; otherwise return it unchanged."""
    if not C > 0:
        raise ValueError("clipping threshold must be positive")
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("cannot clip a non-finite gradient")
    return g / max(1.0, float(np.linalg.norm(g)) / C)


def clip_rows(G: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Row-wise :func:`clip` with per-row thresholds."""
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)):
        raise ValueError("cannot clip a non-finite gradient")
    norms = np.linalg.norm(G, axis=1)
    return G / np.maximum(1.0, norms / C)[:, None]


def rank_permutation(
    losses: np.ndarray,
    owners: np.ndarray | None = None,
    order: str = "loss",
    owner_priority: Mapping[int, int] | None = None,
) -> np.ndarray:
    """Batch positions sorted by descending loss; ties keep batch order.

    ``owner_then_loss`` first groups by ``owner_priority`` (smaller ranks
    first, typically the more private owners) and then by loss.
    """
    losses = np.asarray(losses, dtype=float)
    if order == "loss":
        return np.argsort(-losses, kind="stable")
    if order == "owner_then_loss":
        if owners is None or owner_priority is None:
            raise ValueError("owner_then_loss ordering needs owners and owner_priority")
        prio = np.array([owner_priority[int(o)] for o in owners], dtype=np.int64)
        # lexsort uses the last key as primary and is stable
        return np.lexsort((-losses, prio))
    raise ValueError(f"unknown order {order!r}; expected one of {ORDERS}")


@dataclass(frozen=True)
class GradientBatch:
    """Clipped per-datum gradients of one Poisson batch, in batch order."""

    indices: np.ndarray
    owners: np.ndarray
    losses: np.ndarray
    clipped: np.ndarray
    thresholds: np.ndarray
    rank: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def dim(self) -> int:
        return self.clipped.shape[1]

    def ranked_grads(self) -> np.ndarray:
        return self.clipped[self.rank]

    def ranked_thresholds(self) -> np.ndarray:
        return self.thresholds[self.rank]


def make_gradient_batch(
    indices,
    owners,
    losses,
    grads,
    params: MechanismParams,
    order: str = "loss",
    owner_priority: Mapping[int, int] | None = None,
) -> GradientBatch:
    indices = np.asarray(indices, dtype=np.int64)
    owners = np.asarray(owners, dtype=np.int64)
    losses = np.asarray(losses, dtype=float)
    grads = np.asarray(grads, dtype=float)
    C_of = {n: params.owner(n).C for n in params.owner_ids()}
    thresholds = np.array([C_of[int(o)] for o in owners], dtype=float)
    clipped = clip_rows(grads, thresholds) if len(indices) else grads
    rank = rank_permutation(losses, owners, order, owner_priority)
    return GradientBatch(indices, owners, losses, clipped, thresholds, rank)


def compute_gradient_batch(
    model: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    indices,
    owners,
    params: MechanismParams,
    order: str = "loss",
    owner_priority: Mapping[int, int] | None = None,
) -> GradientBatch:
    """One forward/backward pass at the current parameters supplies both the
    ranking losses and the gradients."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices):
        losses, grads = per_sample_losses_and_grads(model, X[indices], y[indices])
    else:
        losses, grads = np.zeros(0), np.zeros((0, model.arch.param_count))
    return make_gradient_batch(indices, owners, losses, grads, params, order, owner_priority)


@dataclass(frozen=True)
class NoisyUpdate:
    weighted_sum: np.ndarray
    noise: np.ndarray
    update: np.ndarray
    new_theta: np.ndarray
    weights: np.ndarray
    skipped: bool = False


def weighted_sum(weights: np.ndarray, ranked: np.ndarray) -> np.ndarray:
    """``sum_k weights[k] * ranked[k]`` accumulated in rank order."""
    out = np.zeros(ranked.shape[1])
    for w, g in zip(weights, ranked):
        out += w * g
    return out


def _apply(theta: np.ndarray, gbar: np.ndarray, weights, params: MechanismParams, rng, skipped) -> NoisyUpdate:
    b = params.expected_batch_size
    if b is None:
        raise ValueError("mechanism parameters are not bound to a partition")
    theta = np.asarray(theta, dtype=float)
    if skipped:
        zero = np.zeros_like(theta)
        return NoisyUpdate(gbar, zero, zero, theta.copy(), weights, True)
    noise = params.sigma * rng.standard_normal(theta.shape[0])
    update = (gbar + noise) / b
    return NoisyUpdate(gbar, noise, update, theta - params.eta * update, weights, False)


def _theta_array(theta) -> np.ndarray:
    return theta.flat if isinstance(theta, ModelParams) else np.asarray(theta, dtype=float)


def idp_sgd_step(theta, batch: GradientBatch, params: MechanismParams, rng: np.random.Generator) -> NoisyUpdate:
    """Sum of per-owner clipped gradients, Gaussian noise, divide by expected b.

    An empty batch leaves the parameters unchanged; the iteration still
    counts against the privacy ledger.
    """
    weights = np.ones(len(batch))
    gbar = weighted_sum(weights, batch.ranked_grads())
    return _apply(_theta_array(theta), gbar, weights, params, rng, len(batch) == 0)


def dp_sgd_step(theta, batch: GradientBatch, params: MechanismParams, rng: np.random.Generator) -> NoisyUpdate:
    """IDP-SGD with one shared (q, C); rejects heterogeneous parameters."""
    qs = {m.q for m in params.per_owner}
    Cs = {m.C for m in params.per_owner}
    if len(qs) > 1 or len(Cs) > 1:
        raise ValueError("DP-SGD needs a uniform sampling rate and clipping threshold")
    return idp_sgd_step(theta, batch, params, rng)


def ino_sgd_step(
    theta,
    batch: GradientBatch,
    params: MechanismParams,
    tif: TailImportanceFunction,
    table: FastIntegrationTable | None,
    rng: np.random.Generator,
) -> NoisyUpdate:
    """Rank by loss, weight each rank by its average BIF score, then as IDP-SGD."""
    assignment = importance_scores(tif, batch.ranked_thresholds(), table)
    gbar = weighted_sum(assignment.scores, batch.ranked_grads())
    return _apply(_theta_array(theta), gbar, assignment.scores, params, rng, len(batch) == 0)


def ino_sgm_release(
    values: np.ndarray,
    owners: Sequence[int],
    bounds: Mapping[int, float],
    ordering: Sequence[int],
    tif: TailImportanceFunction,
    sigma: float,
    rng: np.random.Generator,
    table: FastIntegrationTable | None = None,
) -> np.ndarray:
    """Ordered, importance-weighted sum of bounded vectors plus Gaussian noise.

    ``ordering[k]`` is the position of the rank-``k`` value. It must not
    depend on the values themselves, or must already be privatized. The
    weights follow the BIF with each value's owner bound as its slot width.
    """
    V = np.atleast_2d(np.asarray(values, dtype=float))
    owners = list(owners)
    if len(owners) != len(V):
        raise ValueError("one owner per value required")
    order = np.asarray(ordering, dtype=np.int64)
    if len(V) and sorted(order.tolist()) != list(range(len(V))):
        raise ValueError("ordering must be a permutation of the value positions")
    delta = np.array([bounds[int(o)] for o in owners], dtype=float)
    norms = np.linalg.norm(V, axis=1) if len(V) else np.zeros(0)
    bad = np.flatnonzero(norms > delta * (1 + 1e-12))
    if bad.size:
        i = int(bad[0])
        raise SensitivityViolation(f"value {i} has norm {norms[i]:.6g} above its bound {delta[i]:.6g}")
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    if len(V) == 0:
        total = np.zeros(V.shape[1] if V.ndim == 2 else 0)
    else:
        scores = importance_scores(tif, delta[order], table).scores
        total = weighted_sum(scores, V[order])
    return total + sigma * rng.standard_normal(total.shape[0])
