"""CP decomposition of 3-way kernels and the low-rank convolution stacks built from it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensors import (
    ConvLayerSpec,
    check_kernel,
    conv_forward,
    matricize,
    reshape_3way_to_kernel,
    reshape_kernel_to_3way,
    split_groups,
    tensor_from_cp,
)

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps


@dataclass
class CPFactors:
    """Rank-R factors with unit-norm columns; column norms live in ``lam``."""

    A: np.ndarray  # (D*D, R) spatial
    B: np.ndarray  # (S, R) input channels
    C: np.ndarray  # (T, R) output channels
    lam: np.ndarray
    fit_error: float = 0.0
    sweeps: int = 0
    history: list[float] = field(default_factory=list)
    degenerate: bool = False

    @property
    def R(self) -> int:
        return int(self.lam.shape[0])


@dataclass(frozen=True)
class CPOptions:
    max_sweeps: int = 500
    tol: float = 1e-6
    seed: int = 0
    restarts: int = 5


def _normalize(A, B, C, lam):
    """Fold column norms into ``lam``, force ``lam > 0`` and sort descending."""
    lam = lam.copy()
    mats = []
    for m in (A, B, C):
        n = np.linalg.norm(m, axis=0)
        safe = np.where(n > 0, n, 1.0)
        mats.append(m / safe)
        lam = lam * n
    A, B, C = mats
    neg = lam < 0
    C[:, neg] *= -1
    lam = np.abs(lam)
    order = np.argsort(-lam, kind="stable")
    return A[:, order], B[:, order], C[:, order], lam[order]


def _solve_gram(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``X @ G = rhs`` for symmetric PSD ``G``, Tikhonov-regularized if near singular."""
    if np.linalg.cond(G) > 1e12:
        R = G.shape[0]
        G = G + 1e-12 * max(np.trace(G) / R, EPS) * np.eye(R)
    return np.linalg.solve(G, rhs.T).T


def _khatri_rao(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    # row index p*len(Q) + q, matching a C-order reshape of the remaining axes
    return (P[:, None, :] * Q[None, :, :]).reshape(-1, P.shape[1])


def _residual_sq(x, A, B, C, lam) -> float:
    r = x - np.einsum("ir,jr,kr->ijk", A * lam, B, C, optimize=True)
    return float(np.vdot(r, r))


def als_single(x, R: int, rng: np.random.Generator, max_sweeps: int = 500,
               tol: float = 1e-6) -> CPFactors:
    """One ALS run from a standard-normal start.

    ``history`` holds the squared residual after every sweep.
    """
    I, J, K = x.shape
    A = rng.standard_normal((I, R))
    B = rng.standard_normal((J, R))
    C = rng.standard_normal((K, R))
    X1 = x.reshape(I, J * K)
    X2 = x.transpose(1, 0, 2).reshape(J, I * K)
    X3 = x.transpose(2, 0, 1).reshape(K, I * J)
    norm_sq = float(np.vdot(x, x))
    history = []
    fit_prev = None
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        A = _solve_gram((B.T @ B) * (C.T @ C), X1 @ _khatri_rao(B, C))
        B = _solve_gram((A.T @ A) * (C.T @ C), X2 @ _khatri_rao(A, C))
        C = _solve_gram((A.T @ A) * (B.T @ B), X3 @ _khatri_rao(A, B))
        A, B, C, lam = _normalize(A, B, C, np.ones(R))
        # keep the weights out of the factors for the next sweep's solves
        C = C * lam
        err_sq = _residual_sq(x, A, B, C, np.ones(R))
        history.append(err_sq)
        fit = 1.0 - np.sqrt(err_sq / norm_sq)
        if fit_prev is not None and abs(fit - fit_prev) < tol:
            break
        fit_prev = fit
    A, B, C, lam = _normalize(A, B, C, np.ones(R))
    return CPFactors(A, B, C, lam, fit_error=float(np.sqrt(history[-1] / norm_sq)),
                     sweeps=sweep, history=history)


def als_runs(x, R: int, opts: CPOptions = CPOptions()):
    """Yield one :class:`CPFactors` per restart, all drawn from ``opts.seed``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {x.shape}")
    if R < 1:
        raise ValueError(f"rank must be >= 1, got {R}")
    if not np.any(x):
        raise ValueError("cannot decompose an all-zero tensor")
    rng = np.random.default_rng(opts.seed)
    for _ in range(max(opts.restarts, 1)):
        yield als_single(x, R, rng, opts.max_sweeps, opts.tol)


def cp_als(x, R: int, opts: CPOptions = CPOptions()) -> CPFactors:
    best = None
    for f in als_runs(x, R, opts):
        if best is None or f.fit_error < best.fit_error:
            best = f
    log.debug("cp_als R=%d fit_error=%.3g after %d sweeps", R, best.fit_error, best.sweeps)
    return best


def _rank1_power(x, rng, max_iter: int, tol: float):
    I, J, K = x.shape
    b = rng.standard_normal(J)
    c = rng.standard_normal(K)
    b /= np.linalg.norm(b)
    c /= np.linalg.norm(c)
    a = np.zeros(I)
    lam = 0.0
    for _ in range(max_iter):
        a = np.einsum("ijk,j,k->i", x, b, c)
        a /= np.linalg.norm(a) or 1.0
        b = np.einsum("ijk,i,k->j", x, a, c)
        b /= np.linalg.norm(b) or 1.0
        c_new = np.einsum("ijk,i,j->k", x, a, b)
        lam_new = float(np.linalg.norm(c_new))
        c = c_new / (lam_new or 1.0)
        if abs(lam_new - lam) <= tol * max(lam_new, EPS):
            lam = lam_new
            break
        lam = lam_new
    return a, b, c, lam


def cp_tpm(x, R: int, opts: CPOptions = CPOptions()) -> CPFactors:
    """Greedy deflation: extract the dominant rank-1 term ``R`` times.

    Each term is the best of ``opts.restarts`` alternating power iterations.
    Once the residual vanishes, the remaining terms get a machine-epsilon
    weight on unit basis vectors and the result is flagged ``degenerate``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {x.shape}")
    if R < 1:
        raise ValueError(f"rank must be >= 1, got {R}")
    I, J, K = x.shape
    rng = np.random.default_rng(opts.seed)
    norm = float(np.linalg.norm(x))
    floor = EPS * max(norm, 1.0)
    residual = x.copy()
    cols, lams = [], []
    degenerate = False
    for _ in range(R):
        if np.linalg.norm(residual) <= EPS * norm * 10 or norm == 0:
            degenerate = True
            cols.append((np.eye(I)[0], np.eye(J)[0], np.eye(K)[0]))
            lams.append(floor)
            continue
        best = None
        for _ in range(max(opts.restarts, 1)):
            cand = _rank1_power(residual, rng, opts.max_sweeps, 1e-12)
            if best is None or cand[3] > best[3]:
                best = cand
        a, b, c, lam = best
        residual = residual - lam * np.einsum("i,j,k->ijk", a, b, c)
        cols.append((a, b, c))
        lams.append(lam)
    A = np.column_stack([c[0] for c in cols])
    B = np.column_stack([c[1] for c in cols])
    C = np.column_stack([c[2] for c in cols])
    A, B, C, lam = _normalize(A, B, C, np.array(lams))
    lam = np.maximum(lam, floor)
    f = CPFactors(A, B, C, lam, degenerate=degenerate, sweeps=R)
    f.fit_error = float(np.linalg.norm(x - tensor_from_cp(f)) / norm) if norm else 0.0
    if degenerate:
        log.warning("cp_tpm: residual vanished before %d components", R)
    return f


@dataclass(frozen=True)
class StackLayer:
    spec: ConvLayerSpec
    kernel: np.ndarray
    role: str


@dataclass(frozen=True)
class ConvStack:
    layers: tuple[StackLayer, ...]
    source: str
    rank: int


def stack_specs(spec: ConvLayerSpec, R: int, two_layer: bool):
    g = spec.group
    if two_layer:
        return (
            ConvLayerSpec(f"{spec.id}.s1", spec.D, spec.S, g * R, g, spec.stride, spec.pad,
                          spec.in_h, spec.in_w),
            ConvLayerSpec(f"{spec.id}.s2", 1, g * R, spec.T, g, 1, 0, spec.out_h, spec.out_w),
        )
    return (
        ConvLayerSpec(f"{spec.id}.s1", 1, spec.S, g * R, g, 1, 0, spec.in_h, spec.in_w),
        ConvLayerSpec(f"{spec.id}.s2", spec.D, g * R, g * R, g * R, spec.stride, spec.pad,
                      spec.in_h, spec.in_w),
        ConvLayerSpec(f"{spec.id}.s3", 1, g * R, spec.T, g, 1, 0, spec.out_h, spec.out_w),
    )


def factors_to_conv_stack(factors, spec: ConvLayerSpec) -> ConvStack:
    """Map per-group CP factors to 1x1 (S->R), depthwise DxD, 1x1 (R->T) stages.

    ``factors`` is one :class:`CPFactors` or a list with one entry per group;
    all groups share the same rank. Stride and padding go on the depthwise
    stage and the weights ``lam`` are folded into the last stage.
    """
    if isinstance(factors, CPFactors):
        factors = [factors]
    if len(factors) != spec.group:
        raise ValueError(f"{spec.id}: got {len(factors)} factor sets for {spec.group} groups")
    R = factors[0].R
    sg, tg = spec.S // spec.group, spec.T // spec.group
    for f in factors:
        if f.R != R:
            raise ValueError(f"{spec.id}: groups must share one rank")
        if f.A.shape != (spec.D ** 2, R) or f.B.shape != (sg, R) or f.C.shape != (tg, R):
            raise ValueError(f"{spec.id}: factor shapes do not match layer geometry")
    s1, s2, s3 = stack_specs(spec, R, two_layer=False)
    first = np.concatenate([f.B for f in factors], axis=1)[None, None]
    depth = np.concatenate([f.A for f in factors], axis=1).reshape(spec.D, spec.D, 1, -1)
    last = np.concatenate([(f.C * f.lam).T for f in factors], axis=1)[None, None]
    return ConvStack(
        layers=(
            StackLayer(s1, np.ascontiguousarray(first), "pointwise_in"),
            StackLayer(s2, np.ascontiguousarray(depth), "depthwise"),
            StackLayer(s3, np.ascontiguousarray(last), "pointwise_out"),
        ),
        source=spec.id,
        rank=R,
    )


def svd_two_layer(k, R: int, spec: ConvLayerSpec) -> ConvStack:
    """Truncated-SVD split into a DxD (S->R) stage and a 1x1 (R->T) stage, per group."""
    k = check_kernel(k, spec)
    firsts, lasts = [], []
    for kg in split_groups(k, spec):
        x = reshape_kernel_to_3way(kg)
        m = matricize(x, 1).matrix  # T x S*D*D, column s*D*D + d2
        if not 1 <= R <= min(m.shape):
            raise ValueError(f"{spec.id}: rank {R} outside [1, {min(m.shape)}]")
        U, s, Vt = np.linalg.svd(m, full_matrices=False)
        d2, sg, _ = x.shape
        # row r of Vt is a filter over (s, d2); bring it back to (d2, s, r)
        w = Vt[:R].reshape(R, sg, d2).transpose(2, 1, 0)
        firsts.append(reshape_3way_to_kernel(w))
        lasts.append((U[:, :R] * s[:R]).T)
    s1, s2 = stack_specs(spec, R, two_layer=True)
    first = np.concatenate(firsts, axis=3)
    last = np.concatenate(lasts, axis=1)[None, None]
    return ConvStack(
        layers=(
            StackLayer(s1, np.ascontiguousarray(first), "spatial"),
            StackLayer(s2, np.ascontiguousarray(last), "pointwise_out"),
        ),
        source=spec.id,
        rank=R,
    )


def stack_forward(x, stack: ConvStack) -> np.ndarray:
    for layer in stack.layers:
        x = conv_forward(x, layer.spec, layer.kernel)
    return x


def decompose_layer(k, spec: ConvLayerSpec, R: int, decomposer: str = "als",
                    opts: CPOptions = CPOptions()) -> tuple[ConvStack, list[CPFactors]]:
    """CP-decompose every group of ``k`` at rank ``R`` and build the three-stage stack."""
    fn = {"als": cp_als, "tpm": cp_tpm}.get(decomposer)
    if fn is None:
        raise ValueError(f"unknown decomposer {decomposer!r}")
    k = check_kernel(k, spec)
    factors = [fn(reshape_kernel_to_3way(kg), R, opts) for kg in split_groups(k, spec)]
    return factors_to_conv_stack(factors, spec), factors
