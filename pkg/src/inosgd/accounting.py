"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Two per-step charges are available:

* ``rdp_of_sgm_step`` -- the closed form ``2 * alpha * q**2 * C**2 / sigma**2``
  used by the individualized privacy guarantees of IDP-SGD and INO-SGD.
* ``rdp_sgm_tight`` -- the exact RDP of the sampled Gaussian mechanism
  (binomial expansion for integer orders, convergent series for fractional
  ones). This is what standard RDP accountants report and what the budget
  calibration uses by default.

Per-owner budgets are converted to (epsilon, delta)-DP by minimizing the
conversion over a fixed grid of Renyi orders.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DEFAULT_ALPHAS: tuple[float, ...] = (
    (1.25, 1.5) + tuple(float(a) for a in range(2, 65)) + (80.0, 96.0, 128.0, 256.0, 512.0, 1024.0)
)

BOUNDS = ("tight", "closed_form")


class InfeasibleBudget(ValueError):
    """Raised when no admissible parameter meets the requested budget."""


@dataclass(frozen=True)
class RdpCurve:
    """Renyi orders paired with their RDP budgets."""

    alphas: tuple[float, ...]
    eps_bars: tuple[float, ...]

    def __post_init__(self):
        if len(self.alphas) != len(self.eps_bars):
            raise ValueError("alphas and eps_bars must have equal length")
        if len(set(self.alphas)) != len(self.alphas):
            raise ValueError("alpha values must be distinct")
        for a, e in zip(self.alphas, self.eps_bars):
            if not a > 1:
                raise ValueError(f"Renyi order must exceed 1, got {a}")
            if not e >= 0:
                raise ValueError(f"RDP budget must be non-negative, got {e}")

    def __len__(self):
        return len(self.alphas)

    def scaled(self, steps: int) -> "RdpCurve":
        return RdpCurve(self.alphas, tuple(compose_rdp(e, steps) for e in self.eps_bars))

    def at(self, alpha: float) -> float:
        return self.eps_bars[self.alphas.index(alpha)]


@dataclass(frozen=True)
class PrivacyProfile:
    owner_id: int
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"owner {self.owner_id}: epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError(f"owner {self.owner_id}: delta must lie in (0, 1)")


@dataclass(frozen=True)
class OwnerMechanism:
    owner_id: int
    q: float
    C: float

    def __post_init__(self):
        if not 0 <= self.q <= 1:
            raise ValueError(f"owner {self.owner_id}: sampling rate must lie in [0, 1]")
        if not self.C > 0:
            raise ValueError(f"owner {self.owner_id}: clipping threshold must be positive")


@dataclass(frozen=True)
class MechanismParams:
    """Per-owner sampling rates and clipping thresholds plus global knobs.

    ``expected_batch_size`` may be left as ``None`` and filled in by
    :meth:`bind`, which checks it against the owner sizes.
    """

    per_owner: tuple[OwnerMechanism, ...]
    sigma: float
    T: int
    eta: float
    expected_batch_size: float | None = None

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        ids = [m.owner_id for m in self.per_owner]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate owner in mechanism parameters")

    def owner(self, owner_id: int) -> OwnerMechanism:
        for m in self.per_owner:
            if m.owner_id == owner_id:
                return m
        raise KeyError(owner_id)

    def owner_ids(self) -> tuple[int, ...]:
        return tuple(m.owner_id for m in self.per_owner)

    def bind(self, owner_sizes: dict[int, int]) -> "MechanismParams":
        """Return a copy whose expected batch size equals ``sum_n q_n |D_n|``."""
        missing = set(owner_sizes) - set(self.owner_ids())
        if missing:
            raise KeyError(f"no mechanism parameters for owners {sorted(missing)}")
        b = sum(self.owner(n).q * size for n, size in owner_sizes.items())
        if self.expected_batch_size is not None and not math.isclose(
            self.expected_batch_size, b, rel_tol=1e-12, abs_tol=1e-12
        ):
            raise ValueError(f"expected batch size {self.expected_batch_size} != sum q_n|D_n| = {b}")
        if not b > 0:
            raise ValueError("expected batch size must be positive")
        return MechanismParams(self.per_owner, self.sigma, self.T, self.eta, b)


def _check_order(alpha: float):
    if not alpha > 1:
        raise ValueError(f"Renyi order must exceed 1, got {alpha}")


def rdp_of_sgm_step(q: float, C: float, sigma: float, alpha: float) -> float:
    """Closed-form per-step RDP charge ``2 alpha q^2 C^2 / sigma^2``."""
    _check_order(alpha)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if not C > 0:
        raise ValueError("C must be positive")
    return 2.0 * alpha * q * q * C * C / (sigma * sigma)


def compose_rdp(step_eps_bar: float, T: int) -> float:
    """RDP budgets add under sequential composition."""
    if T < 0:
        raise ValueError("T must be non-negative")
    if not step_eps_bar >= 0:
        raise ValueError("step budget must be non-negative")
    return T * step_eps_bar


def rdp_to_dp(alpha: float, eps_bar: float, delta: float) -> float:
    """Convert an (alpha, eps_bar)-RDP guarantee to epsilon at the given delta."""
    _check_order(alpha)
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1)")
    if not eps_bar >= 0:
        raise ValueError("eps_bar must be non-negative")
    return eps_bar + math.log((alpha - 1) / alpha) - (math.log(delta) + math.log(alpha)) / (alpha - 1)


def best_dp_epsilon(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Minimize the RDP-to-DP conversion over the curve.

    Ties go to the smaller order. Returns ``(epsilon, alpha_star)``.
    """
    if len(curve) == 0:
        raise ValueError("empty RDP curve")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    best = (math.inf, math.inf)
    for alpha, eps_bar in sorted(zip(curve.alphas, curve.eps_bars)):
        eps = rdp_to_dp(alpha, eps_bar, delta)
        if eps < best[0]:
            best = (eps, alpha)
    return best


# -- exact RDP of the sampled Gaussian mechanism -----------------------------


def _log_add(x: float, y: float) -> float:
    a, b = min(x, y), max(x, y)
    if a == -math.inf:
        return b
    return math.log1p(math.exp(a - b)) + b


def _log_sub(x: float, y: float) -> float:
    if y == -math.inf:
        return x
    if x <= y:
        # the alternating series can underflow to equality at convergence
        return -math.inf
    return math.log(math.expm1(x - y)) + y


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    k = np.arange(alpha + 1, dtype=float)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = float(special.log_ndtr((z0 - i) / sigma))
        log_e1 = float(special.log_ndtr((j - z0) / sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma**2) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma**2) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 or i > 10_000:
            break
    return _log_add(log_a0, log_a1)


def rdp_sgm_tight(q: float, noise_multiplier: float, alpha: float) -> float:
    """Exact per-step RDP of the Poisson-subsampled Gaussian mechanism.

    ``noise_multiplier`` is the noise standard deviation divided by the
    sensitivity, i.e. ``sigma / C``.
    """
    _check_order(alpha)
    if not noise_multiplier > 0:
        raise ValueError("noise multiplier must be positive")
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2 * noise_multiplier**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, noise_multiplier, int(alpha))
    else:
        log_a = _log_a_frac(q, noise_multiplier, alpha)
    return max(log_a / (alpha - 1), 0.0)


def sgm_step_rdp(q: float, C: float, sigma: float, alpha: float, bound: str = "tight") -> float:
    """Per-step RDP charge of one owner under the chosen bound."""
    if bound == "tight":
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        if not C > 0:
            raise ValueError("C must be positive")
        return rdp_sgm_tight(q, sigma / C, alpha)
    if bound == "closed_form":
        return rdp_of_sgm_step(q, C, sigma, alpha)
    raise ValueError(f"unknown bound {bound!r}; expected one of {BOUNDS}")


def sgm_curve(
    q: float,
    C: float,
    sigma: float,
    T: int,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    bound: str = "tight",
) -> RdpCurve:
    """RDP curve of ``T`` composed sampled-Gaussian steps."""
    return RdpCurve(tuple(alphas), tuple(compose_rdp(sgm_step_rdp(q, C, sigma, a, bound), T) for a in alphas))


def sgm_epsilon(q, C, sigma, T, delta, alphas=DEFAULT_ALPHAS, bound="tight") -> tuple[float, float]:
    return best_dp_epsilon(sgm_curve(q, C, sigma, T, alphas, bound), delta)


# -- calibration ---------------------------------------------------------------


def _bisect_largest(
    eps_of: Callable[[float], float],
    target: float,
    lo: float,
    hi: float,
    rel_tol: float,
    max_iter: int,
) -> float:
    if eps_of(lo) > target:
        raise InfeasibleBudget(
            f"budget {target:g} unattainable: even the lower bracket {lo:g} spends {eps_of(lo):.6g}"
        )
    if eps_of(hi) <= target:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if eps_of(mid) <= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rel_tol * hi:
            break
    return lo


def calibrate_sampling_rate(
    epsilon_target: float,
    delta: float,
    C: float,
    sigma: float,
    T: int,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    bound: str = "tight",
    rel_tol: float = 1e-4,
    max_iter: int = 200,
) -> float:
    """Largest sampling rate whose T-step spend stays within ``epsilon_target``."""
    if not epsilon_target > 0:
        raise ValueError("epsilon_target must be positive")
    return _bisect_largest(
        lambda q: sgm_epsilon(q, C, sigma, T, delta, alphas, bound)[0],
        epsilon_target,
        0.0,
        1.0,
        rel_tol,
        max_iter,
    )


def calibrate_clipping_threshold(
    epsilon_target: float,
    delta: float,
    q: float,
    sigma: float,
    T: int,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    bound: str = "tight",
    C_max: float = 100.0,
    rel_tol: float = 1e-4,
    max_iter: int = 200,
) -> float:
    """Largest clipping threshold in ``(0, C_max]`` meeting ``epsilon_target``."""
    if not epsilon_target > 0:
        raise ValueError("epsilon_target must be positive")

    def eps_of(C):
        if C == 0:
            return sgm_epsilon(0.0, 1.0, sigma, T, delta, alphas, bound)[0]
        return sgm_epsilon(q, C, sigma, T, delta, alphas, bound)[0]

    return _bisect_largest(eps_of, epsilon_target, 0.0, C_max, rel_tol, max_iter)


@dataclass(frozen=True)
class CalibrationRecord:
    owner_id: int
    epsilon: float
    delta: float
    q: float
    C: float
    achieved_epsilon: float
    alpha: float


def calibrate_profiles(
    profiles: Iterable[PrivacyProfile],
    variant: str,
    sigma: float,
    T: int,
    C: float = 1.0,
    q: float = 0.05,
    per_owner_q: dict[int, float] | None = None,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    bound: str = "tight",
) -> list[CalibrationRecord]:
    """Derive per-owner (q_n, C_n) for one of the IDP-SGD variants.

    ``sample`` calibrates q_n at a shared C; ``scale`` calibrates C_n at a
    shared q; ``joint`` calibrates C_n at owner-specific rates
    ``per_owner_q``; ``dpsgd`` gives every owner the rate that satisfies the
    strictest budget.
    """
    profiles = list(profiles)
    out = []
    if variant == "dpsgd":
        strict = min(profiles, key=lambda p: (p.epsilon, p.delta))
        q_shared = calibrate_sampling_rate(strict.epsilon, strict.delta, C, sigma, T, alphas, bound)
        settings = {p.owner_id: (q_shared, C) for p in profiles}
    elif variant == "sample":
        settings = {
            p.owner_id: (calibrate_sampling_rate(p.epsilon, p.delta, C, sigma, T, alphas, bound), C)
            for p in profiles
        }
    elif variant == "scale":
        settings = {
            p.owner_id: (q, calibrate_clipping_threshold(p.epsilon, p.delta, q, sigma, T, alphas, bound))
            for p in profiles
        }
    elif variant == "joint":
        if per_owner_q is None:
            raise ValueError("joint variant needs per-owner sampling rates")
        settings = {}
        for p in profiles:
            qn = per_owner_q[p.owner_id]
            settings[p.owner_id] = (qn, calibrate_clipping_threshold(p.epsilon, p.delta, qn, sigma, T, alphas, bound))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    for p in profiles:
        qn, Cn = settings[p.owner_id]
        eps, alpha = sgm_epsilon(qn, Cn, sigma, T, p.delta, alphas, bound)
        out.append(CalibrationRecord(p.owner_id, p.epsilon, p.delta, qn, Cn, eps, alpha))
    return out


def calibration_to_json(records: Sequence[CalibrationRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=2)
