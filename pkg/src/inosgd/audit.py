"""Empirical checks of the privacy argument and of the training-dynamics theory.

* ``modular_sensitivity_probe`` adds or removes one datum from random batches
  and measures how far the pre-noise weighted sum moves. For INO and IDP
  weighting the move never exceeds the clipping threshold of the datum that
  changed; top-mu style truncation breaks that bound.
* ``expected_weights_oracle`` gives the closed-form per-rank objective weights
  on a uniform-rate dataset, and ``simulate_effective_weights`` estimates them
  by sampling batches.
* ``mid_condition_lhs`` and ``mid_duration`` monitor the minority initial
  drop during training.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import binom

from . import rng as rngmod
from .importance import TailImportanceFunction, importance_scores

SCHEMES = ("ino", "idp", "top_mu", "drop_smallest_mu")

PROBE_DIM = 8
SENSITIVITY_TOL = 1e-9
TELESCOPE_TOL = 1e-6


# -- weighting schemes ---------------------------------------------------------------------


def _ranked(losses):
    return np.argsort(-np.asarray(losses, dtype=float), kind="stable")


def scheme_weights(scheme: str, losses, thresholds, tif=None, mu: int = 1) -> np.ndarray:
    """Per-datum weights (in batch order) of a pre-noise weighted sum."""
    losses = np.asarray(losses, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    n = len(losses)
    w = np.zeros(n)
    if n == 0:
        return w
    rank = _ranked(losses)
    if scheme == "idp":
        w[:] = 1.0
    elif scheme == "ino":
        w[rank] = importance_scores(tif, thresholds[rank]).scores
    elif scheme == "top_mu":
        w[rank[:mu]] = 1.0
    elif scheme == "drop_smallest_mu":
        w[rank[: max(n - mu, 0)]] = 1.0
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return w


def pre_noise_sum(scheme, grads, losses, thresholds, tif=None, mu=1, weights=None) -> np.ndarray:
    grads = np.asarray(grads, dtype=float).reshape(len(losses), -1)
    w = scheme_weights(scheme, losses, thresholds, tif, mu) if weights is None else weights
    rank = _ranked(losses)
    out = np.zeros(grads.shape[1])
    for k in rank:
        out += w[k] * grads[k]
    return out


# -- sensitivity probe ------------------------------------------------------------------------


@dataclass
class SensitivityProbeReport:
    scheme: str
    trials: int
    max_change_norm: float = 0.0
    max_excess: float = -math.inf
    violations: int = 0
    telescoping_failures: int = 0
    records: list[tuple[float, float]] = field(default_factory=list, repr=False)
    violating_trials: list[dict] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.telescoping_failures == 0

    def to_dict(self, max_records: int = 0) -> dict:
        out = asdict(self)
        out["records"] = out["records"][:max_records]
        out["violating_trials"] = out["violating_trials"][:5]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def random_tif(rng: np.random.Generator) -> TailImportanceFunction:
    kind = rng.integers(3)
    gamma = float(rng.uniform(0.2, 30.0))
    if kind == 0:
        a, b = rng.uniform(0.3, 8.0, size=2)
        return TailImportanceFunction.beta(a, b, gamma)
    n = int(rng.integers(1, 9))
    vals = np.sort(rng.uniform(0, 1, size=n))[::-1]
    if rng.random() < 0.3:
        vals[: rng.integers(0, n + 1)] = 1.0
    if rng.random() < 0.3:
        vals[n - rng.integers(0, n + 1) :] = 0.0
    vals = np.minimum.accumulate(vals)
    if kind == 1:
        return TailImportanceFunction.step(vals, gamma / n)
    return TailImportanceFunction.tabulated(np.concatenate([vals, [vals[-1] * rng.random()]]), gamma)


def _sphere(rng, n, dim, radius):
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * np.asarray(radius)[:, None]


def _clip(G, C):
    return G / np.maximum(1.0, np.linalg.norm(G, axis=1) / C)[:, None]


def _random_trial(rng: np.random.Generator, flavor: int):
    n_owners = int(rng.integers(1, 5))
    C_owner = rng.uniform(0.1, 3.0, size=n_owners)
    size = 1 if flavor == 0 else int(rng.integers(1, 65))
    owners = rng.integers(0, n_owners, size=size)
    losses = np.full(size, 0.7) if flavor == 1 else rng.exponential(1.0, size=size)
    C = C_owner[owners]
    grads = _clip(_sphere(rng, size, PROBE_DIM, rng.uniform(0, 2.0, size) * C), C)
    if flavor == 2:
        new_owner = int(np.argmin(C_owner))
    elif flavor == 3:
        new_owner = int(np.argmax(C_owner))
    else:
        new_owner = int(rng.integers(n_owners))
    new_C = C_owner[new_owner]
    new_loss = 0.7 if flavor == 1 else float(rng.exponential(1.0))
    new_grad = _clip(_sphere(rng, 1, PROBE_DIM, [rng.uniform(0, 2.0) * new_C]), new_C)[0]
    return losses, C, grads, new_loss, new_C, new_grad


def _crafted_top_mu_trial(rng: np.random.Generator, mu: int, scheme: str):
    # the displaced datum points opposite to the one entering, both at full norm
    n = mu + int(rng.integers(0, 4))
    C_a, C_b = rng.uniform(0.5, 3.0, size=2)
    u = rng.standard_normal(PROBE_DIM)
    u /= np.linalg.norm(u)
    losses = np.linspace(2.0, 1.0, n)
    C = np.full(n, C_b)
    grads = _sphere(rng, n, PROBE_DIM, C)
    if scheme == "top_mu":
        new_loss = 10.0
        displaced = mu - 1
    else:
        new_loss = 0.01
        displaced = n - mu
    grads[displaced] = -u * C_b
    return losses, C, grads, new_loss, C_a, u * C_a


def _ino_telescoping_ok(w_old, w_new, losses_new, C, new_C, pos) -> bool:
    """Check the decomposition of the change: ranks below the new datum keep
    their weights, ranks above only gain weight, and the gained mass plus the
    new datum's own mass is at most its threshold."""
    rank_new = _ranked(losses_new)
    # map old positions to new positions
    old_to_new = np.array([i if i < pos else i + 1 for i in range(len(C))], dtype=np.int64)
    new_rank_of = np.empty(len(losses_new), dtype=np.int64)
    new_rank_of[rank_new] = np.arange(len(losses_new))
    r_d = new_rank_of[pos]
    gained = 0.0
    for i in range(len(C)):
        j = old_to_new[i]
        inc = (w_new[j] - w_old[i]) * C[i]
        if new_rank_of[j] > r_d:
            if abs(inc) > TELESCOPE_TOL:
                return False
        else:
            if inc < -TELESCOPE_TOL:
                return False
            gained += inc
    return gained + w_new[pos] * new_C <= new_C + TELESCOPE_TOL


def modular_sensitivity_probe(
    scheme: str,
    seed: int = 0,
    trials: int = 10_000,
    tif: TailImportanceFunction | None = None,
    mu: int = 4,
    crafted: int | None = None,
    keep_records: bool = True,
) -> SensitivityProbeReport:
    """Randomized add/remove probes of the pre-noise sum's modular sensitivity.

    ``tif=None`` draws a fresh random TIF per trial for the ino scheme.
    Truncation schemes additionally run ``crafted`` adversarial trials
    (default 100) after the random ones.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if crafted is None:
        crafted = 100 if scheme in ("top_mu", "drop_smallest_mu") else 0
    report = SensitivityProbeReport(scheme, trials + crafted)
    for t in range(trials + crafted):
        rng = rngmod.substream(seed, "probe", t)
        f = tif if tif is not None or scheme != "ino" else random_tif(rng)
        if t < trials:
            losses, C, grads, new_loss, new_C, new_grad = _random_trial(rng, t % 6)
            remove = t % 6 == 5 or (t % 6 == 4 and rng.random() < 0.5)
        else:
            losses, C, grads, new_loss, new_C, new_grad = _crafted_top_mu_trial(rng, mu, scheme)
            remove = False
        pos = int(rng.integers(0, len(losses) + 1))
        big_l = np.insert(losses, pos, new_loss)
        big_C = np.insert(C, pos, new_C)
        big_g = np.insert(grads, pos, new_grad, axis=0)
        w_small = scheme_weights(scheme, losses, C, f, mu)
        w_big = scheme_weights(scheme, big_l, big_C, f, mu)
        before = pre_noise_sum(scheme, grads, losses, C, weights=w_small)
        after = pre_noise_sum(scheme, big_g, big_l, big_C, weights=w_big)
        change = float(np.linalg.norm(after - before))
        # removing the datum from the larger batch is the same pair read backwards
        bound_C = float(new_C)
        report.max_change_norm = max(report.max_change_norm, change)
        report.max_excess = max(report.max_excess, change - bound_C)
        if keep_records:
            report.records.append((bound_C, change))
        if change > bound_C + SENSITIVITY_TOL:
            report.violations += 1
            report.violating_trials.append(
                {
                    "trial": t,
                    "operation": "remove" if remove else "add",
                    "position": pos,
                    "clip_threshold": bound_C,
                    "observed_change": change,
                    "losses": big_l.tolist(),
                    "thresholds": big_C.tolist(),
                }
            )
        if scheme == "ino" and not _ino_telescoping_ok(w_small, w_big, big_l, C, new_C, pos):
            report.telescoping_failures += 1
    return report


# -- objective weights on the UPE dataset ----------------------------------------------------------


def _padded_slot_integrals(tif: TailImportanceFunction):
    """Unit-slot integrals of the tail after padding it to an integer length.

    A non-integer tail length is rounded up by prepending a unit plateau,
    which leaves the batch importance function unchanged.
    """
    g_int = int(math.ceil(tif.gamma - 1e-12))
    pad = g_int - tif.gamma
    edges = np.arange(g_int + 1, dtype=float) - pad
    H = tif.extended_integral(edges)
    # slot_i covers [g - i - 1, g - i] in padded coordinates
    slots = (H[1:] - H[:-1])[::-1]
    return g_int, slots


def expected_weights_oracle(K: int, q_hat: float, tif: TailImportanceFunction) -> np.ndarray:
    """Closed-form per-rank weights with unit clipping thresholds.

    ``w_k = sum_{i<gamma} P(Bin(K-k, q) = i) * int_{gamma-i-1}^{gamma-i} f
    + P(Bin(K-k, q) >= gamma)``, evaluated with log-space binomial terms.
    """
    if K < 1:
        raise ValueError("K must be positive")
    if not 0 < q_hat <= 1:
        raise ValueError("q_hat must lie in (0, 1]")
    g_int, slots = _padded_slot_integrals(tif)
    w = np.empty(K)
    i = np.arange(g_int)
    for k in range(1, K + 1):
        m = K - k
        pmf = np.exp(binom.logpmf(i, m, q_hat))
        tail = binom.sf(g_int - 1, m, q_hat)
        w[k - 1] = float(np.dot(pmf, slots) + tail)
    return w


@dataclass(frozen=True)
class WeightsEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    batches: int


def simulate_effective_weights(
    K: int, q_hat: float, tif: TailImportanceFunction, n_batches: int, seed: int = 0
) -> WeightsEstimate:
    """Monte-Carlo estimate of each rank's average realized score.

    Every rank's per-batch observation is ``rho * 1{sampled} / q_hat``; its
    mean is the expected score given inclusion.
    """
    rng = rngmod.substream(seed, "weights", 0)
    total = np.zeros(K)
    total_sq = np.zeros(K)
    for _ in range(n_batches):
        inc = np.flatnonzero(rng.random(K) < q_hat)
        obs = np.zeros(K)
        if inc.size:
            # ranks are the dataset order: losses strictly decrease with index
            obs[inc] = importance_scores(tif, np.ones(inc.size)).scores / q_hat
        total += obs
        total_sq += obs * obs
    mean = total / n_batches
    var = np.maximum(total_sq / n_batches - mean * mean, 0.0) * n_batches / max(n_batches - 1, 1)
    return WeightsEstimate(mean, np.sqrt(var / n_batches), n_batches)


# -- MID monitor ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class MidMonitorSample:
    cos_angle: float
    ratio: float
    lhs: float
    defined: bool = True

    @property
    def violated(self) -> bool:
        """Necessary condition for both losses to fall fails."""
        return self.defined and self.lhs <= 0


def mid_condition_lhs(sum_grad_1, sum_grad_2, q1, D1_size, C1, q2, D2_size, C2) -> MidMonitorSample:
    """``1 + cos(angle) * q2|D2|C2 / (q1|D1|C1)`` for owner 1 against owner 2."""
    g1 = np.asarray(sum_grad_1, dtype=float)
    g2 = np.asarray(sum_grad_2, dtype=float)
    n1, n2 = float(np.linalg.norm(g1)), float(np.linalg.norm(g2))
    denom = q1 * D1_size * C1
    if not denom > 0:
        raise ValueError("owner 1 must have a positive sampling mass q1|D1|C1")
    ratio = q2 * D2_size * C2 / denom
    if n1 == 0 or n2 == 0:
        return MidMonitorSample(math.nan, ratio, math.nan, defined=False)
    cos = float(np.clip(np.dot(g1, g2) / (n1 * n2), -1.0, 1.0))
    return MidMonitorSample(cos, ratio, 1.0 + cos * ratio)


def mid_duration(trace, group_id: int, T: int | None = None) -> int:
    """Iteration from which the group's eval loss stays below its initial value.

    Zero when no later evaluation reaches the initial loss; ``T + 1`` when the
    loss is still at or above it at the final evaluation.
    """
    col = f"loss_g{group_id}"
    if col not in trace.columns:
        raise KeyError(f"unknown group {group_id}")
    losses = trace.column(col)
    iters = trace.column("iter").astype(int)
    T = int(iters[-1]) if T is None else T
    if len(losses) <= 1:
        return 0
    L0 = losses[0]
    above = np.flatnonzero(~(losses[1:] < L0))
    if above.size == 0:
        return 0
    last = int(above[-1]) + 1
    if last == len(losses) - 1:
        return T + 1
    return int(iters[last + 1])


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson correlation, ``None`` when either side is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = float(np.sqrt(np.dot(dx, dx))), float(np.sqrt(np.dot(dy, dy)))
    if sx == 0 or sy == 0:
        return None
    return float(np.dot(dx, dy) / (sx * sy))
