"""Rank estimation by global analytic empirical variational Bayesian matrix factorization.

For an ``L x M`` matrix (``L <= M`` after transposition) with singular values
``gamma_h``, the empirical-VB free energy depends on the noise variance only
through ``x_h = gamma_h**2 / (M * sigma2)``. The noise variance is chosen by
minimizing that objective; components whose singular value exceeds

    sqrt(M * sigma2 * (1 + tau_bar) * (1 + alpha / tau_bar)),   tau_bar = 2.5129 * sqrt(alpha)

are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensors import ConvLayerSpec, check_kernel, matricize, reshape_kernel_to_3way, split_groups

TAU_BAR_COEF = 2.5129
GRID_POINTS = 200
SEARCH_RTOL = 1e-8

_INV_PHI = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class RankEstimate:
    rank: int
    sigma2: float
    threshold: float
    singular_values: np.ndarray
    shrunk_values: np.ndarray
    shape: tuple[int, int] = (0, 0)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "sigma2": float(self.sigma2),
            "threshold": float(self.threshold),
            "shape": list(self.shape),
        }


def singular_values(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if m.size == 0:
        return np.zeros(0)
    return np.linalg.svd(m, compute_uv=False)


def _tau_bar(alpha: float) -> float:
    return TAU_BAR_COEF * math.sqrt(alpha)


def _x_bar(alpha: float) -> float:
    tb = _tau_bar(alpha)
    return (1 + tb) * (1 + alpha / tb)


def _tau(x: np.ndarray, alpha: float) -> np.ndarray:
    b = x - (1 + alpha)
    return 0.5 * (b + np.sqrt(np.maximum(b * b - 4 * alpha, 0.0)))


def evb_objective(sigma2: float, gammas, L: int, M: int) -> float:
    """Free-energy objective in ``sigma2`` over the full spectrum (+inf if any gamma is 0)."""
    gammas = np.asarray(gammas, dtype=np.float64)
    alpha = L / M
    x = gammas ** 2 / (M * sigma2)
    big = x > _x_bar(alpha)
    small = x[~big]
    xb = x[big]
    tb = _tau(xb, alpha)
    with np.errstate(divide="ignore"):
        total = np.sum(small - np.log(small))
    total += np.sum(xb - tb + np.log((tb + 1) / xb) + alpha * np.log(tb / alpha + 1))
    return float(total)


def _search_objective(sigma2: float, g: np.ndarray, L: int, M: int) -> float:
    # evb_objective minus the sigma2-free terms -log(gamma_h**2 / M); finite
    # even when some singular values are exactly zero
    alpha = L / M
    x = g ** 2 / (M * sigma2)
    big = x > _x_bar(alpha)
    xb = x[big]
    tb = _tau(xb, alpha)
    total = np.sum(x[~big]) + L * math.log(sigma2)
    total += np.sum(xb - tb + np.log(tb + 1) + alpha * np.log(tb / alpha + 1))
    return float(total)


def noise_bracket(gammas, L: int, M: int) -> tuple[float, float]:
    """Interval known to contain the noise-variance minimizer."""
    g2 = np.asarray(gammas, dtype=np.float64) ** 2
    alpha = L / M
    hi = g2.sum() / (L * M)
    K = min(math.ceil(L / (1 + alpha)) - 1, L - 1)
    lo = max(g2[K] / (M * _x_bar(alpha)), g2[K:].sum() / ((L - K) * M))
    return lo, hi


def golden_section(f, a: float, b: float, width: float) -> float:
    """Minimize unimodal ``f`` on ``[a, b]`` until the bracket is narrower than ``width``."""
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > width:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return c if fc <= fd else d


def estimate_noise_evb(gammas, L: int, M: int) -> float:
    """Noise variance minimizing :func:`evb_objective`.

    A 200-point log grid over :func:`noise_bracket` locates the basin, then a
    golden-section search in ``log sigma2`` refines between the neighbouring
    grid points. The spectrum is normalized by its largest value first so the
    search path does not depend on the overall scale of the matrix.
    """
    if L > M:
        raise ValueError(f"need L <= M, got L={L}, M={M}")
    gammas = np.asarray(gammas, dtype=np.float64)
    if gammas.shape != (L,):
        raise ValueError(f"expected {L} singular values, got {gammas.shape}")
    if L == 0 or gammas[0] == 0:
        return 0.0
    scale = gammas[0] ** 2
    g = gammas / gammas[0]
    lo, hi = noise_bracket(g, L, M)
    if not lo > 0:
        # exactly low-rank input: no tail energy to pin the lower end
        lo = hi * 1e-12
    lo = min(lo, hi)
    if lo == hi:
        return hi * scale

    def psi(log_s2):
        return _search_objective(math.exp(log_s2), g, L, M)

    grid = np.linspace(math.log(lo), math.log(hi), GRID_POINTS)
    values = [psi(v) for v in grid]
    i = int(np.argmin(values))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, GRID_POINTS - 1)]
    best = golden_section(psi, a, b, math.log1p(SEARCH_RTOL))
    if values[i] < psi(best):
        best = grid[i]
    return math.exp(best) * scale


def evb_threshold(sigma2: float, L: int, M: int) -> float:
    alpha = L / M
    return math.sqrt(M * sigma2 * _x_bar(alpha))


def shrink(gammas, sigma2: float, L: int, M: int) -> np.ndarray:
    g = np.asarray(gammas, dtype=np.float64)
    if g.size == 0:
        return g.copy()
    a = 1 - (L + M) * sigma2 / g ** 2
    disc = np.maximum(a * a - 4 * L * M * sigma2 ** 2 / g ** 4, 0.0)
    return g / 2 * (a + np.sqrt(disc))


def evb_rank(m, known_sigma2: float | None = None) -> RankEstimate:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a non-empty matrix, got shape {m.shape}")
    L, M = sorted(m.shape)
    gammas = singular_values(m)
    if known_sigma2 is not None:
        if known_sigma2 < 0:
            raise ValueError("known_sigma2 must be >= 0")
        sigma2 = float(known_sigma2)
    else:
        sigma2 = estimate_noise_evb(gammas, L, M)
    threshold = evb_threshold(sigma2, L, M)
    rank = int(np.count_nonzero(gammas > threshold))
    return RankEstimate(
        rank=rank,
        sigma2=sigma2,
        threshold=threshold,
        singular_values=gammas,
        shrunk_values=shrink(gammas[:rank], sigma2, L, M),
        shape=(L, M),
    )


@dataclass
class LayerRankReport:
    layer_id: str
    two_way: bool
    # estimates[group][mode] for modes 1..3 (only mode 1 when two_way)
    estimates: list[dict[int, RankEstimate]] = field(default_factory=list)
    rank: int = 1
    clamped: bool = False

    def mode_ranks(self) -> list[dict[int, int]]:
        return [{mode: e.rank for mode, e in g.items()} for g in self.estimates]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer_id,
            "two_way": self.two_way,
            "rank": self.rank,
            "clamped": self.clamped,
            "groups": [
                {str(mode): e.to_dict() for mode, e in g.items()} for g in self.estimates
            ],
        }


def layer_rank(k, spec: ConvLayerSpec, two_way: bool = False) -> LayerRankReport:
    """Rank for one layer: the largest estimate over every group and unfolding.

    With ``two_way`` only the ``T x S*D*D`` unfolding is used (small-S first
    layers). The chosen rank is shared by all groups and never below 1.
    """
    k = check_kernel(k, spec)
    report = LayerRankReport(spec.id, two_way)
    modes = (1,) if two_way else (1, 2, 3)
    for kg in split_groups(k, spec):
        x = reshape_kernel_to_3way(kg)
        report.estimates.append({mode: evb_rank(matricize(x, mode).matrix) for mode in modes})
    best = max(e.rank for g in report.estimates for e in g.values())
    report.clamped = best < 1
    report.rank = max(best, 1)
    return report
