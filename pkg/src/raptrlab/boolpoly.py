"""Boolean polynomial targets and Fourier-coefficient probes.

The ground truth is a sparse random polynomial over {-1,+1}^d: for each
degree l = 1..k, m distinct uniform subsets of the first t variables with
i.i.d. N(0,1) coefficients. Parity functions are orthonormal under the
uniform distribution, so the coefficient of a learned function f on subset S
is E[f(x) prod_{i in S} x_i], estimated exactly (enumeration, small d) or by
Monte Carlo (large d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import Array, RngStream


@dataclass(frozen=True)
class Term:
    degree: int
    subset: tuple      # 0-based variable indices, sorted
    coeff: float


@dataclass(frozen=True)
class SparsePolynomial:
    terms: tuple
    d: int
    max_degree: int
    per_degree: int
    support_width: int

    def degree_terms(self, degree: int) -> list:
        return [t for t in self.terms if t.degree == degree]

    def to_dict(self) -> dict:
        return {
            "d": self.d, "max_degree": self.max_degree,
            "per_degree": self.per_degree, "support_width": self.support_width,
            "terms": [{"degree": t.degree, "subset": list(t.subset), "coeff": t.coeff}
                      for t in self.terms],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SparsePolynomial":
        terms = tuple(Term(t["degree"], tuple(t["subset"]), float(t["coeff"]))
                      for t in data["terms"])
        return cls(terms, data["d"], data["max_degree"], data["per_degree"],
                   data["support_width"])


def sample_target(d: int, k: int, m: int, t: int, rng: RngStream) -> SparsePolynomial:
    """m distinct degree-l subsets of the first t variables for every l <= k."""
    if t > d:
        raise ValueError(f"support width {t} exceeds dimension {d}")
    terms = []
    for degree in range(1, k + 1):
        if m > math.comb(t, degree):
            raise ValueError(
                f"cannot draw {m} distinct size-{degree} subsets of {t} variables")
        seen = set()
        while len(seen) < m:
            subset = tuple(sorted(int(i) for i in rng.choice_without_replacement(t, degree)))
            seen.add(subset)
        for subset in sorted(seen):
            terms.append(Term(degree, subset, float(rng.gauss(1)[0])))
    return SparsePolynomial(tuple(terms), d, k, m, t)


def _check_boolean(x: Array):
    if not np.all(np.abs(np.abs(x) - 1.0) < 1e-12):
        raise ValueError("inputs must lie in {-1, +1}^d")


def parity(x: Array, subset) -> Array:
    """prod_{i in S} x_i per row; empty subset gives 1."""
    x = np.atleast_2d(x)
    if not subset:
        return np.ones(x.shape[0])
    return np.prod(x[:, list(subset)], axis=1)


def eval_poly(poly: SparsePolynomial, x: Array) -> Array:
    """Exact polynomial value per row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != poly.d:
        raise ValueError(f"input width {x.shape[1]} != polynomial dimension {poly.d}")
    _check_boolean(x)
    out = np.zeros(x.shape[0])
    for term in poly.terms:
        out += term.coeff * parity(x, term.subset)
    return out


def enumerate_inputs(d: int, limit: int = 22):
    """Yield all of {-1,+1}^d in chunks (sign of bit b of the row counter)."""
    if d > limit:
        raise ValueError(f"enumeration over 2^{d} points refused (limit d <= {limit})")
    total = 1 << d
    chunk = min(total, 1 << 14)
    bits = np.arange(d, dtype=np.uint64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.uint64)
        x = ((idx[:, None] >> bits[None, :]) & 1).astype(np.float64) * 2.0 - 1.0
        yield x


def fourier_coeff_exact(f, subset, d: int) -> float:
    """E_x[f(x) chi_S(x)] by full enumeration; f maps (B, d) -> (B,)."""
    total = 0.0
    count = 0
    for x in enumerate_inputs(d):
        total += float(np.sum(np.asarray(f(x), dtype=np.float64) * parity(x, subset)))
        count += x.shape[0]
    return total / count


def fourier_coeff_mc(f, subset, d: int, n_samples: int, rng: RngStream):
    """Monte-Carlo coefficient estimate plus its standard error."""
    if n_samples < 2:
        raise ValueError("need at least two samples for a standard error")
    x = rng.rademacher(n_samples, d)
    vals = np.asarray(f(x), dtype=np.float64) * parity(x, subset)
    est = float(np.mean(vals))
    stderr = float(np.std(vals, ddof=1) / math.sqrt(n_samples))
    return est, stderr


def all_exact_coeffs(f, d: int) -> dict:
    """All 2^d coefficients at once (small d); used for Parseval checks."""
    total = 1 << d
    fvals = np.concatenate([np.asarray(f(x), dtype=np.float64)
                            for x in enumerate_inputs(d)])
    coeffs = {}
    idx = np.arange(total, dtype=np.uint64)
    for s in range(total):
        subset = tuple(int(b) for b in range(d) if (s >> b) & 1)
        chi = np.ones(total)
        for b in subset:
            chi *= ((idx >> np.uint64(b)) & np.uint64(1)).astype(np.float64) * 2.0 - 1.0
        coeffs[subset] = float(np.mean(fvals * chi))
    return coeffs


class _SharedSampleEstimator:
    """Estimate many coefficients from one shared MC sample of f."""

    def __init__(self, f, d: int, n_samples: int, rng: RngStream):
        self.x = rng.rademacher(n_samples, d)
        self.fvals = np.asarray(f(self.x), dtype=np.float64)
        self.n = n_samples

    def coeff(self, subset):
        vals = self.fvals * parity(self.x, subset)
        return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(self.n))


def component_error(f, poly: SparsePolynomial, degree: int, estimator) -> float:
    """Normalized squared coefficient error for one degree.

    estimator: "exact" for full enumeration, or a tuple ("mc", n_samples, rng).
    """
    err, _ = component_error_with_stderr(f, poly, degree, estimator)
    return err


def component_error_with_stderr(f, poly: SparsePolynomial, degree: int, estimator):
    terms = poly.degree_terms(degree)
    if not terms:
        raise ValueError(f"polynomial has no degree-{degree} terms")
    denom = sum(t.coeff**2 for t in terms)
    if denom == 0.0:
        raise ValueError("degenerate polynomial: zero coefficient energy")
    if estimator == "exact":
        ests = [(fourier_coeff_exact(f, t.subset, poly.d), 0.0) for t in terms]
    else:
        kind, n_samples, rng = estimator
        if kind != "mc":
            raise ValueError(f"unknown estimator {kind!r}")
        shared = _SharedSampleEstimator(f, poly.d, n_samples, rng)
        ests = [shared.coeff(t.subset) for t in terms]
    num = sum((t.coeff - c) ** 2 for t, (c, _) in zip(terms, ests))
    var = sum((2.0 * (c - t.coeff) * se) ** 2 for t, (c, se) in zip(terms, ests))
    return num / denom, math.sqrt(var) / denom


def all_component_errors(f, poly: SparsePolynomial, estimator) -> dict:
    """{degree: (error, stderr)} reusing one shared sample for MC estimators."""
    if estimator != "exact":
        kind, n_samples, rng = estimator
        shared = _SharedSampleEstimator(f, poly.d, n_samples, rng)
        out = {}
        for degree in range(1, poly.max_degree + 1):
            terms = poly.degree_terms(degree)
            denom = sum(t.coeff**2 for t in terms)
            ests = [shared.coeff(t.subset) for t in terms]
            num = sum((t.coeff - c) ** 2 for t, (c, _) in zip(terms, ests))
            var = sum((2.0 * (c - t.coeff) * se) ** 2 for t, (c, se) in zip(terms, ests))
            out[degree] = (num / denom, math.sqrt(var) / denom)
        return out
    return {degree: component_error_with_stderr(f, poly, degree, "exact")
            for degree in range(1, poly.max_degree + 1)}
