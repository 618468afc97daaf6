"""Dense kernel tensors: reshaping, unfoldings, group splitting, CP reconstruction.

Layouts used throughout the package:

* ``Kernel4`` is an ndarray of shape ``(D, D, S_g, T)`` indexed ``[row, col, s, t]``
  where ``S_g = S / group`` is the number of input channels each filter sees.
* ``Tensor3`` is an ndarray of shape ``(D*D, S_g, T)`` indexed ``[d2, s, t]`` with
  ``d2 = row * D + col``.

Both are stored C-order, float64 in memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConvLayerSpec:
    """Geometry of one convolution layer."""

    id: str
    D: int
    S: int
    T: int
    group: int = 1
    stride: int = 1
    pad: int = 0
    in_h: int = 1
    in_w: int = 1

    def __post_init__(self):
        for name in ("D", "S", "T", "group", "stride", "in_h", "in_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{self.id}: {name} must be >= 1")
        if self.pad < 0:
            raise ValueError(f"{self.id}: pad must be >= 0")
        if self.S % self.group or self.T % self.group:
            raise ValueError(
                f"{self.id}: group {self.group} must divide S={self.S} and T={self.T}")
        if self.in_h + 2 * self.pad < self.D or self.in_w + 2 * self.pad < self.D:
            raise ValueError(f"{self.id}: filter larger than padded input")

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.pad - self.D) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.pad - self.D) // self.stride + 1

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.D, self.D, self.S // self.group, self.T)


def _finite(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} has non-finite entries")
    return a


def check_kernel(k, spec: ConvLayerSpec | None = None) -> np.ndarray:
    k = _finite(k, "kernel")
    if k.ndim != 4 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must have shape (D, D, S, T), got {k.shape}")
    if spec is not None and k.shape != spec.kernel_shape:
        raise ValueError(
            f"{spec.id}: kernel shape {k.shape} != expected {spec.kernel_shape}")
    return k


def reshape_kernel_to_3way(k) -> np.ndarray:
    k = check_kernel(k)
    D, _, S, T = k.shape
    return k.reshape(D * D, S, T)


def reshape_3way_to_kernel(x) -> np.ndarray:
    x = _finite(x, "tensor")
    if x.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {x.shape}")
    D = int(round(np.sqrt(x.shape[0])))
    if D * D != x.shape[0]:
        raise ValueError(f"leading dimension {x.shape[0]} is not a perfect square")
    return x.reshape(D, D, x.shape[1], x.shape[2])


@dataclass(frozen=True)
class Matricization:
    mode: int
    matrix: np.ndarray
    origin_dims: tuple[int, int, int]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


# Axis order of the source tensor (d2, s, t) that lays out each unfolding:
# mode 1: M[t, s*D2 + d2]; mode 2: M[s, t*D2 + d2]; mode 3: M[d2, t*S + s].
_UNFOLD_AXES = {1: (2, 1, 0), 2: (1, 2, 0), 3: (0, 2, 1)}


def matricize(x, mode: int) -> Matricization:
    if mode not in _UNFOLD_AXES:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    x = _finite(x, "tensor")
    if x.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {x.shape}")
    y = np.ascontiguousarray(x.transpose(_UNFOLD_AXES[mode]))
    m = y.reshape(y.shape[0], -1)
    return Matricization(mode, m, tuple(int(n) for n in x.shape))


def fold(m: Matricization) -> np.ndarray:
    d2, s, t = m.origin_dims
    if m.matrix.size != d2 * s * t:
        raise ValueError(
            f"matrix of shape {m.matrix.shape} cannot fold into {m.origin_dims}")
    axes = _UNFOLD_AXES[m.mode]
    permuted = tuple(m.origin_dims[a] for a in axes)
    y = np.asarray(m.matrix, dtype=np.float64).reshape(permuted)
    return np.ascontiguousarray(y.transpose(np.argsort(axes)))


def split_groups(k, spec: ConvLayerSpec) -> list[np.ndarray]:
    """Per-group kernels; group ``i`` owns output channels ``[i*T/g, (i+1)*T/g)``.

    The input-channel axis of a grouped kernel already holds only the
    ``S/g`` channels of its own block, so only the output axis is sliced.
    """
    k = check_kernel(k, spec)
    tg = spec.T // spec.group
    return [k[..., i * tg:(i + 1) * tg].copy() for i in range(spec.group)]


def merge_groups(parts) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=3)


def tensor_from_cp(factors) -> np.ndarray:
    """Sum of weighted rank-1 terms ``lam[r] * A[:, r] o B[:, r] o C[:, r]``."""
    A, B, C = (np.asarray(m, dtype=np.float64) for m in (factors.A, factors.B, factors.C))
    lam = np.asarray(factors.lam, dtype=np.float64)
    R = lam.shape[0]
    if any(m.ndim != 2 or m.shape[1] != R for m in (A, B, C)):
        raise ValueError("factor matrices must all have R columns")
    return np.einsum("ir,jr,kr->ijk", A * lam, B, C, optimize=True)


def conv_forward(x, spec: ConvLayerSpec, k) -> np.ndarray:
    """Direct grouped convolution of a ``(S, H, W)`` activation, no bias.

    Loops over groups, output channels and filter taps; each tap adds a
    strided slice of the zero-padded input. Kept deliberately simple as a
    reference, not a fast path.
    """
    x = _finite(x, "input")
    k = check_kernel(k, spec)
    if x.shape != (spec.S, spec.in_h, spec.in_w):
        raise ValueError(
            f"{spec.id}: input shape {x.shape} != {(spec.S, spec.in_h, spec.in_w)}")
    p, st, D = spec.pad, spec.stride, spec.D
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    oh, ow = spec.out_h, spec.out_w
    sg, tg = spec.S // spec.group, spec.T // spec.group
    out = np.zeros((spec.T, oh, ow))
    for g in range(spec.group):
        xg = xp[g * sg:(g + 1) * sg]
        for t in range(g * tg, (g + 1) * tg):
            acc = out[t]
            for row in range(D):
                for col in range(D):
                    patch = xg[:, row:row + st * (oh - 1) + 1:st,
                               col:col + st * (ow - 1) + 1:st]
                    acc += np.tensordot(k[row, col, :, t], patch, axes=1)
    return out
