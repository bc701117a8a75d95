"""Pure-numpy REML kernel (fallback for the compiled ``_reml_core``).

Model per genotype i, on its observations y_i::

    V_i = B_i + Z_i U U' Z_i'      B_i = R_i + Z_i Psi Z_i'

B_i is block diagonal by cell, so its inverse is closed-form; the low-rank
part U (n_e x m) goes through Woodbury with K_i = I + U' D_i U, where
D_i = Z_i' B_i^-1 Z_i is diagonal. Cell sufficient statistics (count, sum,
sum of squares) replace the raw observations.
"""

from __future__ import annotations

import numpy as np


def pass1(cnt, s1, s2, U, psi, rvar):
    """Per-genotype Woodbury terms and their sums over genotypes.

    Returns (logdet_B, logdet_K, yBy, A, b, Ut, delta, t) where
    A = X'V^-1X, b = X'V^-1y, Ut[i] = U L_i^-T with K_i = L_i L_i'.
    """
    n_g, n_e = cnt.shape
    m = U.shape[1]
    den = rvar[None, :] + cnt * psi[None, :]
    a = 1.0 / den
    delta = cnt * a
    t = s1 * a
    logdet_b = float((cnt * np.log(rvar)[None, :]).sum() + np.log(den / rvar[None, :]).sum())
    yby = float(((s2 - psi[None, :] * s1 * s1 * a) / rvar[None, :]).sum())

    K = np.einsum("jm,ij,jn->imn", U, delta, U) + np.eye(m)[None]
    L = np.linalg.cholesky(K)
    logdet_k = float(2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum())
    Ut = np.linalg.solve(L, np.broadcast_to(U.T, (n_g, m, n_e))).transpose(0, 2, 1)
    N = delta[:, :, None] * Ut
    q = np.einsum("ijm,ij->im", Ut, t)

    A = np.diag(delta.sum(axis=0)) - np.einsum("ijm,ikm->jk", N, N)
    b = t.sum(axis=0) - np.einsum("ijm,im->j", N, q)
    yvy = yby - float((q * q).sum())
    return logdet_b, logdet_k, yvy, A, b, np.ascontiguousarray(Ut), delta, t


def pass2(cnt, s1, s2, U, psi, rvar, beta, Ainv, Ut, delta, t, grad=True):
    """BLUP kernel vectors e_i = Z_i'V_i^-1(y_i - X_i beta) and gradient pieces.

    Returns (e, S, resid_terms). S = sum_i H_i A^-1 H_i with
    H_i = Z_i'V_i^-1Z_i, and resid_terms[j] = tr(P dV/ds2_j) - y'P dV/ds2_j P y.
    S and resid_terms are None when ``grad`` is false.
    """
    N = delta[:, :, None] * Ut
    tau = t - delta * beta[None, :]
    qt = np.einsum("ijm,ij->im", Ut, tau)
    e = tau - np.einsum("ijm,im->ij", N, qt)
    if not grad:
        return e, None, None

    Y = np.einsum("jk,ikm->ijm", Ainv, N)
    NY = np.einsum("ijm,ijn->imn", N, Y)
    term2 = np.einsum("ij,ijm,ikm->jk", delta, Y, N)
    S = Ainv * (delta.T @ delta) - term2 - term2.T + np.einsum("ijm,imn,ikn->jk", N, NY, N)

    den = rvar[None, :] + cnt * psi[None, :]
    a = 1.0 / den
    r2 = rvar[None, :]
    b_ss = (r2 + (cnt - 1.0) * psi[None, :]) / (r2 * den)
    uku = (Ut * Ut).sum(axis=2)
    vav = np.diag(Ainv)[None, :] - 2.0 * (Y * Ut).sum(axis=2) + np.einsum("ijm,imn,ijn->ij", Ut, NY, Ut)
    trace = (cnt * (b_ss - a * a * (uku + vav))).sum(axis=0)

    rho = s1 - cnt * beta[None, :]
    rr = s2 - 2.0 * beta[None, :] * s1 + cnt * beta[None, :] ** 2
    c = a * (psi[None, :] / r2) * rho + a * np.einsum("ijm,im->ij", Ut, qt)
    quad = (rr / r2**2 - 2.0 * c * rho / r2 + cnt * c * c).sum(axis=0)
    return e, S, trace - quad
