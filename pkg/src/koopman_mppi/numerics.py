"""Shared numerical primitives: SVD pseudoinverse, counter-based Gaussian
noise streams, Savitzky-Golay smoothing, and angle wrapping.

Matrices are plain float64 ``numpy`` arrays (row-major). Every function here
is pure: no global state, safe to call from any number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PINV_RTOL = 1e-10

_U32 = 1 << 32
_U64 = 1 << 64


def require_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    """Return ``a`` as a float64 array, rejecting NaN/Inf entries."""
    out = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def pinv(m: np.ndarray, tol: float = DEFAULT_PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via full SVD.

    Singular values <= tol * (largest singular value) are truncated to zero,
    so rank-deficient inputs degrade gracefully instead of blowing up.
    """
    out, _ = pinv_with_rank(m, tol)
    return out


def pinv_with_rank(m: np.ndarray, tol: float = DEFAULT_PINV_RTOL) -> tuple[np.ndarray, int]:
    """Like :func:`pinv` but also reports the retained numerical rank."""
    a = require_finite(m, "matrix")
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError("pinv expects a 2-D matrix with at least one row and column")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0])), 0
    cutoff = tol * s[0]
    keep = s > cutoff
    rank = int(np.count_nonzero(keep))
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T, rank


@dataclass(frozen=True)
class NoiseStreamKey:
    """Addresses one independent Gaussian stream.

    Distinct (master_seed, step_index, rollout_index) triples map to distinct
    128-bit Philox keys, so their streams are statistically independent and
    reproducible regardless of evaluation order or thread count.
    """

    master_seed: int
    step_index: int = 0
    rollout_index: int = 0

    def philox_key(self) -> int:
        if not (0 <= self.step_index < _U32 and 0 <= self.rollout_index < _U32):
            raise ValueError("step_index and rollout_index must fit in 32 bits")
        return ((self.master_seed % _U64) << 64) | (self.step_index << 32) | self.rollout_index


def noise_stream(key: NoiseStreamKey) -> np.random.Generator:
    """Counter-based generator for the stream addressed by ``key``."""
    return np.random.Generator(np.random.Philox(key=key.philox_key()))


def standard_normal_block(key: NoiseStreamKey, shape: tuple[int, ...]) -> np.ndarray:
    """First ``prod(shape)`` N(0,1) draws of the keyed stream, bit-reproducible."""
    return noise_stream(key).standard_normal(shape)


def covariance_factor(covariance: np.ndarray) -> np.ndarray:
    """A matrix L with L L' = covariance, validating symmetry and PSD-ness.

    Diagonal covariances (the common case) take the cheap sqrt path.
    """
    cov = require_finite(covariance, "covariance")
    if cov.ndim == 0:
        cov = cov.reshape(1, 1)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be a square matrix")
    d = np.diag(cov)
    if np.count_nonzero(cov - np.diag(d)) == 0:
        if np.any(d < 0):
            raise ValueError("covariance has a negative diagonal entry")
        return np.diag(np.sqrt(d))
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    w, v = np.linalg.eigh(cov)
    if np.any(w < -1e-10 * max(w.max(), 1.0)):
        raise ValueError("covariance is not positive semi-definite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def gaussian_sample(key: NoiseStreamKey, dim: int, covariance: np.ndarray) -> np.ndarray:
    """One draw from N(0, covariance), bit-identical for identical keys."""
    factor = covariance_factor(covariance)
    if factor.shape[0] != dim:
        raise ValueError(f"covariance is {factor.shape[0]}x{factor.shape[0]}, expected {dim}x{dim}")
    z = standard_normal_block(key, (dim,))
    return factor @ z


def savgol_coeffs(window: int, polyorder: int) -> np.ndarray:
    """Center-point Savitzky-Golay smoothing coefficients.

    The coefficients are the least-squares fit of a degree-``polyorder``
    polynomial over the window, evaluated at the window center.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if polyorder >= window:
        raise ValueError("polyorder must be < window")
    half = window // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    vander = np.vander(t, polyorder + 1, increasing=True)
    return np.linalg.pinv(vander)[0]


def savgol_smooth(seq: np.ndarray, window: int, polyorder: int) -> np.ndarray:
    """Smooth a (T, m) sequence per dimension with a Savitzky-Golay filter.

    Boundaries use odd (point-mirrored) padding, which reproduces constant
    and linear sequences exactly; output length equals input length.
    """
    x = require_finite(seq, "sequence")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("sequence must be 1-D or 2-D (steps, dims)")
    n = x.shape[0]
    if window > n:
        raise ValueError("window must not exceed the sequence length")
    coeffs = savgol_coeffs(window, polyorder)
    half = window // 2
    if half == 0:
        out = x.copy()
    else:
        top = 2.0 * x[0] - x[half:0:-1]
        bottom = 2.0 * x[-1] - x[-2:-half - 2:-1]
        padded = np.concatenate([top, x, bottom], axis=0)
        out = np.empty_like(x)
        for j in range(x.shape[1]):
            out[:, j] = np.convolve(padded[:, j], coeffs[::-1], mode="valid")
    return out[:, 0] if squeeze else out


def wrap_angle(a: np.ndarray | float) -> np.ndarray | float:
    """Wrap angle(s) to the half-open interval [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi
