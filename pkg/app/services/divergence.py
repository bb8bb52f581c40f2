"""
φ-divergence family used to build the conditional ambiguity sets.

Provides pointwise φ, the convex conjugate φ*, its derivative, the
conjugate-domain bound s̄, divergence evaluation between probability
vectors and calibration of the robustness radius ρ from a χ² quantile.
All functions are pure.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from app.core.exceptions import (
    DivergenceDomainError,
    InputError,
    ShapeError,
    UnknownDivergenceError,
    UnsupportedDivergenceError,
)

# Explicit +∞ sentinel for extended-real results.
INF = math.inf

# exp(s) is not representable beyond this point; the conjugate saturates to INF.
_EXP_LIMIT = 709.0

PROBABILITY_TOL = 1e-9
INTERVAL_TOL = 1e-12
CHI2_TOL = 1e-10


class DivergenceKind(str, Enum):
    """Supported φ-divergence families, valued by their config name."""

    MODIFIED_CHI2 = "mchi2"
    KULLBACK_LEIBLER = "kl"
    HELLINGER = "hellinger"
    BURG = "burg"
    INTERVAL_CVAR = "cvar"


VALID_NAMES = ("mchi2", "kl", "hellinger", "burg", "cvar:kappa,alpha")


@dataclass(frozen=True)
class DivergenceSpec:
    """A φ-divergence; `kappa`/`alpha` are only set for the interval (mean-CVaR) kind."""

    kind: DivergenceKind
    kappa: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind is DivergenceKind.INTERVAL_CVAR:
            if self.kappa is None or self.alpha is None:
                raise InputError("cvar divergence requires kappa and alpha")
            if not 0.0 <= self.kappa <= 1.0:
                raise InputError(f"cvar kappa must lie in [0, 1], got {self.kappa}")
            if not 0.0 < self.alpha < 1.0:
                raise InputError(f"cvar alpha must lie in (0, 1), got {self.alpha}")

    @property
    def sbar(self) -> float:
        """Bound of the conjugate's effective domain, lim φ(u)/u."""
        if self.kind in (DivergenceKind.HELLINGER, DivergenceKind.BURG):
            return 1.0
        return INF

    @property
    def curvature_at_one(self) -> float:
        """φ″(1); undefined for the interval divergence."""
        if self.kind is DivergenceKind.INTERVAL_CVAR:
            raise UnsupportedDivergenceError("interval divergence is not twice differentiable at 1")
        return {
            DivergenceKind.MODIFIED_CHI2: 2.0,
            DivergenceKind.KULLBACK_LEIBLER: 1.0,
            DivergenceKind.HELLINGER: 0.5,
            DivergenceKind.BURG: 1.0,
        }[self.kind]

    @property
    def interval(self) -> tuple[float, float]:
        """Likelihood-ratio interval [1−κ, 1−κ+κ/(1−α)] of the interval divergence."""
        if self.kind is not DivergenceKind.INTERVAL_CVAR:
            raise LookupError("only the interval divergence has a ratio interval")
        return 1.0 - self.kappa, 1.0 - self.kappa + self.kappa / (1.0 - self.alpha)

    @property
    def has_feasibility_constraints(self) -> bool:
        return math.isfinite(self.sbar)

    @property
    def name(self) -> str:
        if self.kind is DivergenceKind.INTERVAL_CVAR:
            return f"cvar:{self.kappa:g},{self.alpha:g}"
        return self.kind.value


def parse_divergence(name: str) -> DivergenceSpec:
    """
    Build a DivergenceSpec from its config/CLI name.

    Accepted: "mchi2", "kl", "hellinger", "burg", "cvar:kappa,alpha".
    """
    text = name.strip().lower()
    if text.startswith("cvar:"):
        try:
            kappa_text, alpha_text = text[len("cvar:"):].split(",")
            kappa, alpha = float(kappa_text), float(alpha_text)
        except ValueError:
            raise UnknownDivergenceError(
                f"malformed cvar divergence '{name}'; expected cvar:kappa,alpha"
            )
        return DivergenceSpec(DivergenceKind.INTERVAL_CVAR, kappa=kappa, alpha=alpha)
    for kind in DivergenceKind:
        if kind is not DivergenceKind.INTERVAL_CVAR and text == kind.value:
            return DivergenceSpec(kind)
    raise UnknownDivergenceError(
        f"unknown divergence '{name}'; valid names: {', '.join(VALID_NAMES)}"
    )


# ============== Pointwise functions ==============

def phi(spec: DivergenceSpec, u: float) -> float:
    """φ(u) for u ≥ 0."""
    if u < 0:
        raise DivergenceDomainError(f"phi is defined for u >= 0, got {u}")
    kind = spec.kind
    if kind is DivergenceKind.MODIFIED_CHI2:
        return (u - 1.0) ** 2
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        if u == 0:
            return 1.0
        return u * math.log(u) - u + 1.0
    if kind is DivergenceKind.HELLINGER:
        return (math.sqrt(u) - 1.0) ** 2
    if kind is DivergenceKind.BURG:
        if u == 0:
            return INF
        return -math.log(u) + u - 1.0
    lo, hi = spec.interval
    return 0.0 if lo * (1.0 - INTERVAL_TOL) <= u <= hi * (1.0 + INTERVAL_TOL) else INF


def conjugate(spec: DivergenceSpec, s: float) -> float:
    """φ*(s) = sup_{u≥0} {su − φ(u)}; INF outside the effective domain."""
    kind = spec.kind
    if kind is DivergenceKind.MODIFIED_CHI2:
        return -1.0 if s < -2.0 else s + s * s / 4.0
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        if s > _EXP_LIMIT:
            return INF
        return math.expm1(s)
    if kind is DivergenceKind.HELLINGER:
        if s >= spec.sbar:
            return INF
        return s / (1.0 - s)
    if kind is DivergenceKind.BURG:
        if s >= spec.sbar:
            return INF
        return -math.log1p(-s)
    lo, hi = spec.interval
    return max(lo * s, hi * s)


def conjugate_grad(spec: DivergenceSpec, s: float) -> float:
    """φ*′(s) for s strictly inside the conjugate domain."""
    if s >= spec.sbar:
        raise DivergenceDomainError(
            f"conjugate derivative undefined at s={s} (sbar={spec.sbar})"
        )
    kind = spec.kind
    if kind is DivergenceKind.MODIFIED_CHI2:
        return 0.0 if s < -2.0 else 1.0 + s / 2.0
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        if s > _EXP_LIMIT:
            raise DivergenceDomainError(f"conjugate derivative overflows at s={s}")
        return math.exp(s)
    if kind is DivergenceKind.HELLINGER:
        return 1.0 / (1.0 - s) ** 2
    if kind is DivergenceKind.BURG:
        return 1.0 / (1.0 - s)
    lo, hi = spec.interval
    # left slope at the kink
    return lo if s <= 0.0 else hi


def conjugate_array(spec: DivergenceSpec, s: np.ndarray) -> np.ndarray:
    """Vectorized φ*; entries outside the domain are INF."""
    s = np.asarray(s, dtype=float)
    kind = spec.kind
    if kind is DivergenceKind.MODIFIED_CHI2:
        return np.where(s < -2.0, -1.0, s + s * s / 4.0)
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        out = np.expm1(np.minimum(s, _EXP_LIMIT))
        return np.where(s > _EXP_LIMIT, INF, out)
    if kind is DivergenceKind.INTERVAL_CVAR:
        lo, hi = spec.interval
        return np.maximum(lo * s, hi * s)
    inside = s < spec.sbar
    safe = np.where(inside, s, 0.0)
    if kind is DivergenceKind.HELLINGER:
        out = safe / (1.0 - safe)
    else:
        out = -np.log1p(-safe)
    return np.where(inside, out, INF)


def conjugate_grad_array(spec: DivergenceSpec, s: np.ndarray) -> np.ndarray:
    """Vectorized φ*′; entries at or beyond s̄ (or overflowing) are INF."""
    s = np.asarray(s, dtype=float)
    kind = spec.kind
    if kind is DivergenceKind.MODIFIED_CHI2:
        return np.where(s < -2.0, 0.0, 1.0 + s / 2.0)
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        out = np.exp(np.minimum(s, _EXP_LIMIT))
        return np.where(s > _EXP_LIMIT, INF, out)
    if kind is DivergenceKind.INTERVAL_CVAR:
        lo, hi = spec.interval
        return np.where(s <= 0.0, lo, hi)
    inside = s < spec.sbar
    safe = np.where(inside, s, 0.0)
    if kind is DivergenceKind.HELLINGER:
        out = 1.0 / (1.0 - safe) ** 2
    else:
        out = 1.0 / (1.0 - safe)
    return np.where(inside, out, INF)


def perspective(spec: DivergenceSpec, a: float, lam: float) -> float:
    """λ·φ*(a/λ), with 0·φ*(a/0) = 0 for a ≤ 0 and +∞ for a > 0."""
    if lam < 0:
        raise DivergenceDomainError(f"perspective requires lambda >= 0, got {lam}")
    if lam == 0:
        return 0.0 if a <= 0 else INF
    value = conjugate(spec, a / lam)
    return INF if value == INF else lam * value


# ============== Divergence between distributions ==============

def as_probability_vector(entries: Sequence[float], tol: float = PROBABILITY_TOL) -> np.ndarray:
    """Validate entries as a probability vector and return them as an array."""
    p = np.asarray(entries, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ShapeError("probability vector must be a non-empty 1-D sequence")
    if np.any(p < 0):
        raise InputError(f"probability vector has negative entries: {p.tolist()}")
    total = float(p.sum())
    if abs(total - 1.0) > tol:
        raise InputError(f"probability vector sums to {total:.12g}, not 1")
    return p


def divergence(spec: DivergenceSpec, p: Sequence[float], q: Sequence[float]) -> float:
    """
    I_φ(p, q) = Σ q_ω φ(p_ω/q_ω).

    Uses 0·φ(a/0) = a·s̄ and 0·φ(0/0) = 0.
    """
    p_arr = np.asarray(p, dtype=float)
    q_arr = np.asarray(q, dtype=float)
    if p_arr.shape != q_arr.shape:
        raise ShapeError(f"p has shape {p_arr.shape} but q has shape {q_arr.shape}")
    if np.any(q_arr < 0):
        raise DivergenceDomainError("nominal probabilities must be nonnegative")

    total = 0.0
    for p_w, q_w in zip(p_arr, q_arr):
        if q_w > 0:
            term = phi(spec, max(p_w, 0.0) / q_w)
            if term == INF:
                return INF
            total += q_w * term
        elif p_w > 0:
            if spec.sbar == INF:
                return INF
            total += p_w * spec.sbar
    return total


# ============== ρ calibration ==============

def chi2_quantile(dof: int, prob: float) -> float:
    """
    Quantile of the χ² distribution by bisection on the regularized
    lower incomplete gamma function P(dof/2, x/2).
    """
    if dof < 1:
        raise InputError(f"chi-squared degrees of freedom must be >= 1, got {dof}")
    if not 0.0 < prob < 1.0:
        raise InputError(f"quantile level must lie in (0, 1), got {prob}")

    half = dof / 2.0
    lo, hi = 0.0, dof + 10.0 * math.sqrt(2.0 * dof) + 10.0
    while special.gammainc(half, hi / 2.0) < prob:
        lo, hi = hi, 2.0 * hi
    while hi - lo > CHI2_TOL:
        mid = 0.5 * (lo + hi)
        if special.gammainc(half, mid / 2.0) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_rho(spec: DivergenceSpec, n: int, N: int, alpha: float) -> float:
    """ρ = φ″(1)/(2N) · χ²_{n−1, 1−α}."""
    if spec.kind is DivergenceKind.INTERVAL_CVAR:
        raise UnsupportedDivergenceError(
            "rho calibration requires a divergence twice differentiable at 1; "
            "the cvar divergence defines its set without a radius"
        )
    if n < 2:
        raise InputError(f"calibration needs at least 2 outcomes, got n={n}")
    if N < 1:
        raise InputError(f"calibration needs a positive sample size, got N={N}")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    return spec.curvature_at_one / (2.0 * N) * chi2_quantile(n - 1, 1.0 - alpha)


# ============== Inner dual helpers ==============

def inner_dual_objective(
    spec: DivergenceSpec,
    values: np.ndarray,
    q: np.ndarray,
    rho: float,
    lam: float,
    mu: float,
) -> float:
    """μ + ρλ + Σ q·λφ*((v−μ)/λ), the dualized worst-case expectation."""
    total = mu + rho * lam
    for v_w, q_w in zip(values, q):
        term = perspective(spec, float(v_w) - mu, lam)
        if term == INF:
            return INF
        total += q_w * term
    return total


def optimal_mu(spec: DivergenceSpec, values: np.ndarray, q: np.ndarray, lam: float) -> float:
    """
    Minimizer in μ of the dual objective for a fixed λ > 0.

    Solves Σ q φ*′((v−μ)/λ) = 1, whose left side is nonincreasing in μ;
    the root lies in [min v, max v] intersected with the conjugate domain.
    """
    v = np.asarray(values, dtype=float)
    q = np.asarray(q, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0.0:
        return hi
    if math.isfinite(spec.sbar):
        lo = max(lo, hi - spec.sbar * lam * (1.0 - 1e-12))

    def slope(mu: float) -> float:
        weight = float(np.dot(q, conjugate_grad_array(spec, (v - mu) / lam)))
        return 1.0 - min(weight, 1e300)

    if slope(lo) >= 0.0:
        return lo
    if slope(hi) <= 0.0:
        return hi
    return optimize.brentq(slope, lo, hi, xtol=1e-12 * max(1.0, abs(hi)), maxiter=500)


# ============== Worst-case distributions ==============

# λ below this multiple of the value spread counts as λ = 0
LAMBDA_ZERO_SCALE = 1e-12
WORST_CASE_BISECTIONS = 100
WORST_CASE_BRACKET_STEPS = 60


def argmax_distribution(values: np.ndarray) -> np.ndarray:
    """Uniform mass over the maximal entries of `values`."""
    v = np.asarray(values, dtype=float)
    top = float(v.max())
    mask = v >= top - 1e-12 * max(1.0, abs(top))
    return mask / float(mask.sum())


def interval_worst_case(spec: DivergenceSpec, values: np.ndarray, q: np.ndarray) -> np.ndarray:
    """
    Maximizer of Σ p·v over p = q·r, r ∈ [1−κ, 1−κ+κ/(1−α)], Σ p = 1.

    Every outcome starts at the lower ratio; the remaining mass fills the
    largest values first, each up to the upper ratio.
    """
    lo, hi = spec.interval
    v = np.asarray(values, dtype=float)
    q = np.asarray(q, dtype=float)
    p = lo * q
    remaining = 1.0 - float(p.sum())
    for k in np.argsort(-v, kind="stable"):
        if remaining <= 0.0:
            break
        room = (hi - lo) * q[k]
        if room <= remaining:
            p[k] = hi * q[k]
            remaining -= room
        else:
            p[k] += remaining
            remaining = 0.0
    return p


def dual_worst_case(
    spec: DivergenceSpec,
    values: np.ndarray,
    q: np.ndarray,
    rho: float,
    lam_hint: Optional[float] = None,
) -> tuple[np.ndarray, float]:
    """
    Worst-case distribution of Σ p·v over I_φ(p, q) ≤ ρ from the inner dual.

    For fixed λ, μ*(λ) solves Σ q φ*′((v−μ)/λ) = 1 and p(λ) = q φ*′((v−μ*)/λ);
    I_φ(p(λ), q) is nonincreasing in λ, so λ* is bisected on log λ keeping
    the returned p inside the ball. Returns (p, λ*); λ* = 0 with the argmax
    distribution when that distribution already lies within ρ.
    """
    v = np.asarray(values, dtype=float)
    q = np.asarray(q, dtype=float)
    if spec.kind is DivergenceKind.INTERVAL_CVAR:
        return interval_worst_case(spec, v, q), 0.0
    spread = float(v.max() - v.min())
    if spread <= 0.0 or rho <= 0.0:
        return q.copy(), INF if rho <= 0.0 else 0.0

    def at(lam: float) -> tuple[np.ndarray, float]:
        mu = optimal_mu(spec, v, q, lam)
        p = q * conjugate_grad_array(spec, (v - mu) / lam)
        total = float(p.sum())
        if not math.isfinite(total) or total <= 0.0:
            return q.copy(), INF
        p = p / total
        return p, divergence(spec, p, q)

    hi = lam_hint if lam_hint is not None and lam_hint > 0 else spread / rho
    p_hi, d_hi = at(hi)
    for _ in range(WORST_CASE_BRACKET_STEPS):
        if d_hi <= rho:
            break
        hi *= 10.0
        p_hi, d_hi = at(hi)
    else:
        return q.copy(), INF

    floor = LAMBDA_ZERO_SCALE * spread
    lo = hi
    while True:
        lo /= 10.0
        if lo < floor:
            argmax = argmax_distribution(v)
            if divergence(spec, argmax, q) <= rho:
                return argmax, 0.0
            p_lo, d_lo = at(floor)
            if d_lo <= rho:
                return p_lo, floor
            lo = floor
            break
        p_lo, d_lo = at(lo)
        if d_lo > rho:
            break
        hi, p_hi, d_hi = lo, p_lo, d_lo

    log_lo, log_hi = math.log(lo), math.log(hi)
    for _ in range(WORST_CASE_BISECTIONS):
        if rho - d_hi <= 1e-10 * rho:
            break
        mid = 0.5 * (log_lo + log_hi)
        p_mid, d_mid = at(math.exp(mid))
        if d_mid <= rho:
            log_hi, p_hi, d_hi = mid, p_mid, d_mid
        else:
            log_lo = mid
    return p_hi, math.exp(log_hi)
