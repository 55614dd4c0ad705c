"""Tail and batch importance functions and per-rank importance scores.

A tail importance function (TIF) ``f_tail`` is a non-increasing map from
``[0, gamma]`` into ``[0, 1]``. For a batch whose clipping thresholds sum to
``Gamma``, the batch importance function (BIF) is a unit plateau followed by
the tail, right-aligned so the tail ends at ``Gamma``. Both cases collapse to

    f_t(c) = F(c + gamma - Gamma),    F(u) = 1 for u < 0, f_tail(u) on [0, gamma]

and every integral of ``f_t`` is a difference of the antiderivative ``H`` of
``F``. Scores in the plateau and in a zero tail are returned as exact 1.0 and
0.0 so that a constant TIF reproduces unweighted summation bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

KINDS = ("beta", "step", "tabulated")

_TINY = 1e-300


class TableCoverageError(ValueError):
    """A batch's total clipping mass exceeds the fast-integration table."""


# -- regularized incomplete beta -------------------------------------------------


def _betacf(a: float, b: float, x: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    # modified Lentz evaluation of the continued fraction, vectorized over x
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _TINY, _TINY, d)
    d = 1.0 / d
    h = d.copy()
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        step = d * c
        h *= step
        if np.all(np.abs(step - 1.0) < tol):
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b})")


def betainc_reg(a: float, b: float, x, tol: float = 1e-13, max_iter: int = 1000):
    """Regularized incomplete beta ``I_x(a, b)`` for ``x`` in ``[0, 1]``.

    The fraction is evaluated on whichever side of the mean converges fast
    and reflected with ``I_x(a, b) = 1 - I_{1-x}(b, a)``. The stopping rule is
    relative, which keeps the absolute error well below 1e-10.
    """
    if not (a > 0 and b > 0):
        raise ValueError("beta parameters must be positive")
    x_arr = np.asarray(x, dtype=float)
    if np.any((x_arr < 0) | (x_arr > 1)) or np.any(np.isnan(x_arr)):
        raise ValueError("incomplete beta argument must lie in [0, 1]")
    xs = np.atleast_1d(x_arr)
    out = np.where(xs >= 1.0, 1.0, 0.0)
    inner = (xs > 0) & (xs < 1)
    if np.any(inner):
        xi = xs[inner]
        log_front = gammaln(a + b) - gammaln(a) - gammaln(b) + a * np.log(xi) + b * np.log1p(-xi)
        front = np.exp(log_front)
        direct = xi < (a + 1.0) / (a + b + 2.0)
        vals = np.empty_like(xi)
        if np.any(direct):
            xd = xi[direct]
            vals[direct] = front[direct] * _betacf(a, b, xd, tol, max_iter) / a
        if np.any(~direct):
            xr = 1.0 - xi[~direct]
            vals[~direct] = 1.0 - front[~direct] * _betacf(b, a, xr, tol, max_iter) / b
        out[inner] = np.clip(vals, 0.0, 1.0)
    if x_arr.ndim == 0:
        return float(out[0])
    return out


# -- tail importance functions ---------------------------------------------------


@dataclass(frozen=True)
class TailImportanceFunction:
    """Non-increasing importance profile on ``[0, gamma]``.

    Build instances with :meth:`beta`, :meth:`step` or :meth:`tabulated`.
    Tabulated samples sit on a uniform grid over ``[0, gamma]`` and are
    joined linearly.
    """

    kind: str
    gamma: float
    a: float | None = None
    b: float | None = None
    levels: tuple[float, ...] | None = None
    step_length: float | None = None
    samples: tuple[float, ...] | None = None
    _unit_extent: float = field(init=False, repr=False, compare=False)
    _zero_start: float = field(init=False, repr=False, compare=False)

    @classmethod
    def beta(cls, a: float, b: float, gamma: float) -> "TailImportanceFunction":
        return cls("beta", float(gamma), a=float(a), b=float(b))

    @classmethod
    def step(cls, levels: Sequence[float], step_length: float) -> "TailImportanceFunction":
        levels = tuple(float(v) for v in levels)
        return cls("step", len(levels) * float(step_length), levels=levels, step_length=float(step_length))

    @classmethod
    def tabulated(cls, samples: Sequence[float], gamma: float) -> "TailImportanceFunction":
        return cls("tabulated", float(gamma), samples=tuple(float(v) for v in samples))

    @classmethod
    def constant(cls, gamma: float = 1.0) -> "TailImportanceFunction":
        """All-ones tail; scores degenerate to unweighted summation."""
        return cls.step([1.0], gamma)

    @classmethod
    def linear(cls, gamma: float) -> "TailImportanceFunction":
        return cls.beta(1.0, 1.0, gamma)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown TIF kind {self.kind!r}")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError("tail length gamma must be positive and finite")
        if self.kind == "beta":
            if not (self.a and self.a > 0 and self.b and self.b > 0):
                raise ValueError("beta TIF needs positive a and b")
            unit, zero = 0.0, self.gamma
        elif self.kind == "step":
            if not self.levels:
                raise ValueError("step TIF needs at least one level")
            if not (self.step_length and self.step_length > 0):
                raise ValueError("step_length must be positive")
            unit, zero = self._extents(self.levels, self.step_length, stepwise=True)
        else:
            if not self.samples or len(self.samples) < 2:
                raise ValueError("tabulated TIF needs at least two samples")
            unit, zero = self._extents(self.samples, self.gamma / (len(self.samples) - 1), stepwise=False)
        values = self.levels if self.kind == "step" else self.samples
        if values is not None:
            arr = np.asarray(values)
            if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
                raise ValueError("TIF values must lie in [0, 1]")
            if np.any(np.diff(arr) > 0):
                raise ValueError("TIF must be non-increasing")
        object.__setattr__(self, "_unit_extent", unit)
        object.__setattr__(self, "_zero_start", zero)

    @staticmethod
    def _extents(values, spacing, stepwise):
        vals = list(values)
        n_ones = 0
        while n_ones < len(vals) and vals[n_ones] == 1.0:
            n_ones += 1
        n_zeros = 0
        while n_zeros < len(vals) and vals[len(vals) - 1 - n_zeros] == 0.0:
            n_zeros += 1
        if stepwise:
            return n_ones * spacing, (len(vals) - n_zeros) * spacing
        # linear interpolation: a run of equal samples covers the gaps between them
        unit = max(n_ones - 1, 0) * spacing
        zero = (len(vals) - n_zeros) * spacing if n_zeros else (len(vals) - 1) * spacing
        return unit, zero

    @property
    def unit_extent(self) -> float:
        """Largest u with ``f_tail = 1`` on ``[0, u]``."""
        return self._unit_extent

    @property
    def zero_start(self) -> float:
        """Smallest u with ``f_tail = 0`` on ``[u, gamma]`` (gamma if none)."""
        return self._zero_start

    # evaluation ----------------------------------------------------------------

    def _eval(self, u: np.ndarray) -> np.ndarray:
        g = self.gamma
        if self.kind == "beta":
            x = np.clip(1.0 - u / g, 0.0, 1.0)
            return np.asarray(betainc_reg(self.a, self.b, x), dtype=float)
        if self.kind == "step":
            idx = np.floor(u / self.step_length).astype(int)
            idx = np.clip(idx, 0, len(self.levels) - 1)
            return np.asarray(self.levels)[idx]
        grid = np.linspace(0.0, g, len(self.samples))
        return np.interp(u, grid, np.asarray(self.samples))

    def __call__(self, c):
        arr = np.asarray(c, dtype=float)
        if np.any(arr < 0) or np.any(arr > self.gamma) or np.any(np.isnan(arr)):
            raise ValueError(f"TIF argument must lie in [0, {self.gamma}]")
        out = self._eval(np.atleast_1d(arr))
        return float(out[0]) if arr.ndim == 0 else out

    def tail_integral(self, x) -> np.ndarray:
        """``G(x) = int_0^x f_tail`` for ``x`` in ``[0, gamma]``."""
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.gamma)
        g = self.gamma
        if self.kind == "beta":
            a, b = self.a, self.b
            y = 1.0 - x / g

            def J(t):
                return t * betainc_reg(a, b, t) - a / (a + b) * betainc_reg(a + 1.0, b, t)

            return g * (b / (a + b) - np.asarray(J(y)))
        if self.kind == "step":
            s = self.step_length
            lv = np.asarray(self.levels)
            cum = np.concatenate([[0.0], np.cumsum(lv * s)])
            idx = np.clip(np.floor(x / s).astype(int), 0, len(lv) - 1)
            return cum[idx] + lv[idx] * (x - idx * s)
        smp = np.asarray(self.samples)
        n = len(smp) - 1
        h = g / n
        cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (smp[1:] + smp[:-1]))])
        idx = np.clip(np.floor(x / h).astype(int), 0, n - 1)
        dx = x - idx * h
        slope = (smp[idx + 1] - smp[idx]) / h
        return cum[idx] + smp[idx] * dx + 0.5 * slope * dx * dx

    def extended_integral(self, u) -> np.ndarray:
        """Antiderivative of the unit-padded tail: ``u`` for ``u < 0``."""
        u = np.asarray(u, dtype=float)
        inside = self.tail_integral(np.clip(u, 0.0, self.gamma))
        return np.where(u < 0, u, inside)

    # serialization ----------------------------------------------------------------

    def to_dict(self) -> dict:
        if self.kind == "beta":
            return {"kind": "beta", "a": self.a, "b": self.b, "gamma": self.gamma}
        if self.kind == "step":
            return {"kind": "step", "levels": list(self.levels), "step_length": self.step_length}
        return {"kind": "tabulated", "samples": list(self.samples), "gamma": self.gamma}

    @classmethod
    def from_dict(cls, spec: dict) -> "TailImportanceFunction":
        kind = spec.get("kind")
        try:
            if kind == "beta":
                return cls.beta(spec["a"], spec["b"], spec["gamma"])
            if kind == "step":
                return cls.step(spec["levels"], spec["step_length"])
            if kind == "tabulated":
                return cls.tabulated(spec["samples"], spec["gamma"])
        except KeyError as exc:
            raise ValueError(f"TIF spec missing field {exc}") from None
        raise ValueError(f"unknown TIF kind {kind!r}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TailImportanceFunction":
        return cls.from_dict(json.loads(text))


def tif_eval(f: TailImportanceFunction, c: float) -> float:
    return f(c)


def bif_eval(f: TailImportanceFunction, Gamma: float, c: float) -> float:
    """Batch importance at position ``c`` of a batch with total mass ``Gamma``."""
    if not 0 <= c <= Gamma:
        raise ValueError(f"BIF argument must lie in [0, {Gamma}]")
    u = c + f.gamma - Gamma
    if u <= 0:
        return 1.0
    return f(min(u, f.gamma))


# -- importance scores ---------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceAssignment:
    cumulative_thresholds: np.ndarray
    scores: np.ndarray
    gamma_total: float

    def __len__(self):
        return len(self.scores)

    def masses(self) -> np.ndarray:
        """Integral of the BIF over each rank's slot."""
        return self.scores * np.diff(self.cumulative_thresholds)


def _scores_from_integral(cum, Gamma, shift, unit_edge, zero_edge, integral) -> np.ndarray:
    # shift maps batch positions into the coordinate system of ``integral``
    lo = cum[:-1] + shift
    hi = cum[1:] + shift
    width = cum[1:] - cum[:-1]
    scores = (integral(hi) - integral(lo)) / width
    scores = np.clip(scores, 0.0, 1.0)
    scores = np.where(hi <= unit_edge, 1.0, scores)
    scores = np.where(lo >= zero_edge, 0.0, scores)
    return scores


def importance_scores(
    f: TailImportanceFunction,
    thresholds: Sequence[float],
    table: "FastIntegrationTable | None" = None,
) -> ImportanceAssignment:
    """Average BIF value over each rank's slice of the cumulative threshold axis.

    ``thresholds`` are the per-datum clipping thresholds in rank order.
    With ``table`` the integrals come from the precomputed lookup instead of
    the exact antiderivative.
    """
    C = np.asarray(thresholds, dtype=float)
    if C.size == 0:
        return ImportanceAssignment(np.zeros(1), np.zeros(0), 0.0)
    if np.any(~(C > 0)):
        raise ValueError("clipping thresholds must be positive")
    cum = np.concatenate([[0.0], np.cumsum(C)])
    Gamma = float(cum[-1])
    if table is None:
        shift = f.gamma - Gamma
        scores = _scores_from_integral(
            cum, Gamma, shift, f.unit_extent, f.zero_start, f.extended_integral
        )
    else:
        if table.f != f:
            raise ValueError("fast table was built for a different TIF")
        scores = table.scores(cum)
    return ImportanceAssignment(cum, scores, Gamma)


# -- fast integration table -------------------------------------------------------------


def _knot_spacing(f: TailImportanceFunction, resolution: int) -> float:
    # breakpoints (tail start, step edges) land on knots
    unit = f.step_length if f.kind == "step" else f.gamma
    return unit / math.ceil(unit * resolution)


def _hermite(v0, v1, m0, m1, s):
    s2 = s * s
    s3 = s2 * s
    return (2 * s3 - 3 * s2 + 1) * v0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * v1 + (s3 - s2) * m1


@dataclass(frozen=True)
class FastIntegrationTable:
    """Cumulative integrals of the BIF at total mass ``kappa``.

    ``values[j] = int_0^{knots[j]} f_kappa`` and ``slopes[j] = f_kappa(knots[j])``.
    Knots start uniform with spacing ``h``; lookups interpolate each cell with
    a cubic Hermite polynomial. Step kinds are exact with a constant in-cell
    level because their edges sit on knots. Tail cells of smooth kinds whose
    interpolation misses ``cell_tol`` at build time are bisected, which only
    happens next to the square-root-like endpoints of low-order Beta tails.
    """

    f: TailImportanceFunction
    kappa: float
    h: float
    knots: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    @property
    def tail_start(self) -> float:
        return self.kappa - self.f.gamma

    def integral(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = len(self.knots) - 1
        j = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, n - 1)
        x0 = self.knots[j]
        w = self.knots[j + 1] - x0
        s = (x - x0) / w
        v0, v1 = self.values[j], self.values[j + 1]
        if self.f.kind == "step":
            return v0 + (v1 - v0) * s
        return _hermite(v0, v1, self.slopes[j] * w, self.slopes[j + 1] * w, s)

    def interval(self, c1, c2, Gamma: float):
        """``int_{c1}^{c2} f_t`` for a batch of total mass ``Gamma``: two lookups."""
        self._check(Gamma)
        shift = self.kappa - Gamma
        return self.integral(np.asarray(c2) + shift) - self.integral(np.asarray(c1) + shift)

    def scores(self, cum: np.ndarray) -> np.ndarray:
        Gamma = float(cum[-1])
        self._check(Gamma)
        return _scores_from_integral(
            cum,
            Gamma,
            self.kappa - Gamma,
            self.tail_start + self.f.unit_extent,
            self.tail_start + self.f.zero_start,
            self.integral,
        )

    def _check(self, Gamma):
        if Gamma > self.kappa * (1 + 1e-12):
            raise TableCoverageError(
                f"batch clipping mass {Gamma:.6g} exceeds fast table range kappa={self.kappa:.6g}"
            )


def fast_integration_build(
    f: TailImportanceFunction,
    kappa: float,
    resolution: int = 16,
    cell_tol: float = 1e-7,
    max_depth: int = 40,
) -> FastIntegrationTable:
    """Tabulate ``int_0^x f_kappa`` with ``resolution`` knots per unit of mass.

    ``kappa`` is rounded up onto the knot grid, which keeps the tail start on
    a knot.
    """
    if resolution < 1:
        raise ValueError("resolution must be a positive integer")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    h = _knot_spacing(f, resolution)
    m = int(round(f.gamma / h))
    n = max(int(math.ceil(kappa / h - 1e-9)), m)
    kappa = n * h
    shift = f.gamma - kappa
    base = float(f.extended_integral(-kappa + f.gamma))

    def exact(x):
        return f.extended_integral(x + shift) - base

    def slope(x):
        u = x + shift
        out = np.ones_like(x)
        tail = u >= 0
        # step kinds take the level of the cell to the right of each knot
        out[tail] = f._eval(np.minimum(u[tail], f.gamma))
        return out

    knots = np.arange(n + 1) * h
    knots[n - m :] = kappa - (m - np.arange(m + 1)) * h
    if f.kind != "step":
        probe = np.array([0.25, 0.5, 0.75])
        lo, hi = knots[n - m : -1], knots[n - m + 1 :]
        extra = []
        for _ in range(max_depth):
            if lo.size == 0:
                break
            w = (hi - lo)[:, None]
            xs = lo[:, None] + probe[None, :] * w
            v0, v1 = exact(lo)[:, None], exact(hi)[:, None]
            m0, m1 = slope(lo)[:, None] * w, slope(hi)[:, None] * w
            err = np.abs(_hermite(v0, v1, m0, m1, probe[None, :]) - exact(xs.ravel()).reshape(xs.shape))
            bad = err.max(axis=1) > cell_tol
            mid = 0.5 * (lo[bad] + hi[bad])
            extra.append(mid)
            lo = np.concatenate([lo[bad], mid])
            hi = np.concatenate([mid, hi[bad]])
        if extra:
            knots = np.unique(np.concatenate([knots] + extra))
    values = exact(knots)
    slopes = slope(knots)
    for arr in (knots, values, slopes):
        arr.setflags(write=False)
    return FastIntegrationTable(f, kappa, h, knots, values, slopes)
