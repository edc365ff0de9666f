"""
Third-order complex tensors: unfolding and rank-R CP decomposition by ALS.

Tensors are plain ``numpy`` arrays of shape ``(I1, I2, I3)``. The mode-n
unfolding follows Kolda & Bader: mode-n fibers become columns, and the
remaining indices run in Fortran order (earliest index fastest), so that

    unfold(T, 1) = U1 @ khatri_rao(U3, U2).T

for a CP model. Modes are numbered 1, 2, 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ComplexTensor3 = np.ndarray


def _check_mode(mode: int):
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")


def unfold(t: ComplexTensor3, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(I_n, prod of the other dims)``."""
    _check_mode(mode)
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError("expected a third-order tensor")
    n = mode - 1
    return np.moveaxis(t, n, 0).reshape(t.shape[n], -1, order="F")


def fold(m: np.ndarray, mode: int, shape) -> ComplexTensor3:
    """Inverse of :func:`unfold`."""
    _check_mode(mode)
    n = mode - 1
    full = [shape[n]] + [s for i, s in enumerate(shape) if i != n]
    return np.moveaxis(np.reshape(m, full, order="F"), 0, n)


def khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product."""
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


@dataclass
class CpFactors:
    """CP model ``sum_r weights[r] * u1[:, r] o u2[:, r] o u3[:, r]``.

    Factor columns have unit norm and their first non-negligible entry is
    real positive; the weights absorb magnitude and phase.
    """

    factors: tuple
    weights: np.ndarray
    residual: float = 0.0
    converged: bool = True
    iterations: int = 0
    degenerate: bool = False

    @property
    def rank(self) -> int:
        return len(self.weights)

    @property
    def shape(self):
        return tuple(u.shape[0] for u in self.factors)


def reconstruct(f: CpFactors) -> ComplexTensor3:
    u1, u2, u3 = f.factors
    return np.einsum("r,ir,jr,kr->ijk", f.weights, u1, u2, u3)


def _normalize(factors, weights, eps=1e-14):
    factors = [np.array(u, dtype=complex) for u in factors]
    weights = np.array(weights, dtype=complex)
    for u in factors:
        norms = np.linalg.norm(u, axis=0)
        for r in range(u.shape[1]):
            if norms[r] <= eps:
                u[:, r] = 0.0
                u[0, r] = 1.0
                weights[r] = 0.0
                continue
            col = u[:, r] / norms[r]
            lead = col[np.argmax(np.abs(col) > eps * 1e3)]
            phase = lead / abs(lead)
            u[:, r] = col / phase
            weights[r] *= norms[r] * phase
    return tuple(factors), weights


def _hosvd_init(t, R):
    out = []
    for mode in (1, 2, 3):
        u, _, _ = np.linalg.svd(unfold(t, mode), full_matrices=False)
        n = t.shape[mode - 1]
        if u.shape[1] >= R:
            out.append(u[:, :R])
        else:
            pad = np.zeros((n, R), dtype=complex)
            pad[:, : u.shape[1]] = u
            pad[:, u.shape[1]:] = np.eye(n, R - u.shape[1]) if n >= R else 0.0
            out.append(pad)
    return out


def _als(t, init, max_iters, tol):
    A, B, C = (np.array(u, dtype=complex) for u in init)
    X1, X2, X3 = (unfold(t, m) for m in (1, 2, 3))
    norm_t = np.linalg.norm(t)
    prev = np.inf
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        A = np.linalg.lstsq(khatri_rao(C, B), X1.T, rcond=None)[0].T
        B = np.linalg.lstsq(khatri_rao(C, A), X2.T, rcond=None)[0].T
        C = np.linalg.lstsq(khatri_rao(B, A), X3.T, rcond=None)[0].T
        res = np.linalg.norm(X3 - C @ khatri_rao(B, A).T) / norm_t
        if res < 1e-14 or (np.isfinite(prev) and abs(prev - res) <= tol * prev):
            converged = True
            break
        prev = res
    return (A, B, C), res, it, converged


def _collinear(factors, thresh=1 - 1e-8):
    """True when some pair of components is collinear in every mode."""
    R = factors[0].shape[1]
    for r in range(R):
        for s in range(r + 1, R):
            if all(abs(np.vdot(u[:, r], u[:, s])) > thresh for u in factors):
                return True
    return False


def cp_decompose(t: ComplexTensor3, R: int, max_iters: int = 500, tol: float = 1e-10,
                 restarts: int = 3, seed=0) -> CpFactors:
    """Rank-``R`` CP decomposition by alternating least squares.

    The first attempt starts from the leading singular vectors of each
    unfolding; further attempts use random complex starts. The attempt with
    the smallest relative residual is returned.

    Parameters
    ----------
    t : ndarray, shape (I1, I2, I3)
    R : int
        Number of rank-one components.
    max_iters, tol
        ALS stops when the relative residual changes by less than ``tol``
        (relative) or drops below 1e-14.
    restarts : int
        Extra random starts tried when the first attempt does not reach a
        near-exact fit.
    seed
        Seed for the random starts.

    Returns
    -------
    CpFactors
        ``converged`` is False if no attempt met the stopping rule;
        ``degenerate`` flags components that are collinear in every mode.
    """
    t = np.asarray(t, dtype=complex)
    if t.ndim != 3:
        raise ValueError("expected a third-order tensor")
    if R < 1:
        raise ValueError("rank must be at least 1")
    I = t.shape
    if R > min(I[1] * I[2], I[0] * I[2], I[0] * I[1]):
        raise ValueError("rank exceeds an unfolding dimension")
    norm_t = np.linalg.norm(t)
    if norm_t == 0:
        factors = tuple(np.eye(n, R, dtype=complex) for n in I)
        return CpFactors(factors, np.zeros(R, dtype=complex), 0.0, True, 0, False)

    rng = np.random.default_rng(seed)
    best = None
    inits = [_hosvd_init(t, R)]
    for attempt in range(restarts + 1):
        if attempt > 0:
            if best is not None and best[1] < 1e-12:
                break
            inits.append([rng.standard_normal((n, R)) + 1j * rng.standard_normal((n, R)) for n in I])
        factors, res, it, conv = _als(t, inits[attempt], max_iters, tol)
        if best is None or res < best[1]:
            best = (factors, res, it, conv)

    factors, res, it, conv = best
    weights = np.ones(R, dtype=complex)
    factors, weights = _normalize(factors, weights)
    return CpFactors(factors, weights, float(res), bool(conv), it, _collinear(factors))


def rank1_matrix(m: np.ndarray):
    """Dominant singular pair of a matrix: ``m ~ sigma * u v^T``.

    Returns ``(sigma, u, v)`` with unit-norm ``u`` and ``v`` (``v`` is the
    conjugate of the right singular vector, so the model uses a plain
    transpose), plus the relative residual.
    """
    U, s, Vh = np.linalg.svd(np.asarray(m, dtype=complex))
    u, v = U[:, 0], Vh[0, :]
    norm = np.linalg.norm(m)
    res = 0.0 if norm == 0 else float(np.sqrt(max(np.sum(s[1:] ** 2), 0.0)) / norm)
    return complex(s[0]), u, v, res
